from __future__ import annotations

import hashlib
import logging
import struct

import numpy as np
import pytest
from conftest import random_dataset, random_model

from causalrff.data import SourceDataset
from causalrff.errors import ProtocolError, ResyncRequest, RoundAbortError
from causalrff.federation import (AteSummary, DedupMessage, DedupResult, GradientMessage,
                                  ModelBroadcast, ParameterServer, RunError, SourceWorker, dedup_round,
                                  digest, run_training)
from causalrff.federation import codec
from causalrff.federation.messages import Hello, Resync, Shutdown
from causalrff.model import ALL_HEADS
from causalrff.training import (GradientRecord, LossBreakdown, OptimizerState, apply_update,
                                local_gradient, noise_draws)


def D(s):
    return digest(s)


def toy(m=3, n=6, seed=0, d_x=2, id_sets=None):
    rng = np.random.default_rng(seed)
    dss = []
    for s in range(m):
        ids = id_sets[s] if id_sets else [f"s{s}-r{i}" for i in range(n)]
        dss.append(random_dataset(rng, len(ids), d_x, ids=ids))
    return random_model(m, d_x, seed=seed), dss


class TestDedup:
    def test_digest_is_sha256(self):
        assert D("abc") == hashlib.sha256(b"abc").digest()

    def test_pairwise_overlap(self):
        out = dedup_round([DedupMessage(0, {D("a"), D("b")}), DedupMessage(1, {D("b"), D("c")})])
        assert out == {0: frozenset({D("b")}), 1: frozenset({D("b")})}

    def test_three_way(self):
        out = dedup_round([DedupMessage(0, {D("a"), D("b")}), DedupMessage(1, {D("b"), D("c")}),
                           DedupMessage(2, {D("c"), D("d")})])
        assert out[0] == {D("b")} and out[1] == {D("b"), D("c")} and out[2] == {D("c")}

    def test_single_source(self):
        assert dedup_round([DedupMessage(0, {D("a")})]) == {0: frozenset()}

    def test_empty_source(self):
        out = dedup_round([DedupMessage(0, set()), DedupMessage(1, {D("x")})])
        assert out == {0: frozenset(), 1: frozenset()}

    def test_duplicate_sender(self):
        with pytest.raises(ProtocolError):
            dedup_round([DedupMessage(0, set()), DedupMessage(0, set())])

    def test_bad_digest(self):
        with pytest.raises(ValueError):
            DedupMessage(0, {b"short"})

    def test_worker_drops_shared_records(self):
        ds = random_dataset(np.random.default_rng(0), 3, 2, ids=["a", "b", "c"])
        w = SourceWorker(0, ds)
        w.apply_exclusions({D("b")})
        assert w.dataset.unit_ids == ["a", "c"] and w.excluded == 1
        assert np.array_equal(w.dataset.y, ds.y[[0, 2]])

    def test_fully_excluded_source_warns(self, caplog):
        ds = random_dataset(np.random.default_rng(0), 2, 2, ids=["a", "b"])
        w = SourceWorker(0, ds)
        with caplog.at_level(logging.WARNING):
            w.apply_exclusions({D("a"), D("b")})
        assert len(w.dataset) == 0 and "every record excluded" in caplog.text

    def test_run_removes_overlap_from_all_holders(self):
        model, dss = toy(id_sets=[["a", "b", "c"], ["c", "d"], ["e", "b"]])
        res = run_training(model, dss, 0)
        assert res.excluded == {0: 2, 1: 1, 2: 1}
        assert [len(w.dataset) for w in res.workers] == [1, 1, 1]


class TestCodec:
    def _gradient_message(self):
        model, dss = toy(m=2)
        eps = noise_draws(0, 1, 4, 2, len(dss[1]), 2)
        g, l = local_gradient(model, 1, dss[1], eps, with_losses=True)
        return model, GradientMessage(1, 4, g, l)

    def test_frame_layout(self):
        frame = codec.encode(Resync(3, 9))
        magic, kind, length = struct.unpack("<4sBI", frame[:9])
        assert magic == b"CRFF" and kind == codec.T_RESYNC and length == 8 == len(frame) - 9

    def test_gradient_round_trip(self):
        _, msg = self._gradient_message()
        back = codec.decode(codec.encode(msg))
        assert back.source_id == 1 and back.round == 4 and back.n_s == msg.n_s
        assert codec.arrays_equal(back.gradient, msg.gradient)
        assert back.losses == msg.losses

    def test_broadcast_round_trip(self):
        model, _ = toy()
        back = codec.decode(codec.encode(ModelBroadcast(7, model)))
        assert back.round == 7 and back.model.to_bytes() == model.to_bytes()

    @pytest.mark.parametrize("msg", [Hello(2), DedupMessage(1, {D("x"), D("y")}),
                                     DedupResult(0, {D("z")}), AteSummary(2, 0.25, 40),
                                     Resync(1, 2), Shutdown()])
    def test_small_round_trips(self, msg):
        assert codec.decode(codec.encode(msg)) == msg

    def test_bad_magic(self):
        frame = bytearray(codec.encode(Shutdown()))
        frame[0:4] = b"XXXX"
        with pytest.raises(ProtocolError):
            codec.decode(bytes(frame))

    def test_unknown_type(self):
        with pytest.raises(ProtocolError):
            codec.decode(struct.pack("<4sBI", b"CRFF", 99, 0))

    def test_truncated(self):
        _, msg = self._gradient_message()
        frame = codec.encode(msg)
        with pytest.raises(ProtocolError):
            codec.decode(frame[:-3])

    def test_trailing(self):
        with pytest.raises(ProtocolError):
            codec.decode(codec.encode(Shutdown()) + b"\0")


class TestServer:
    def _messages(self, model, dss, rnd=0):
        out = []
        for s, ds in enumerate(dss):
            eps = noise_draws(0, s, rnd, 2, len(ds), 2)
            g, l = local_gradient(model, s, ds, eps, with_losses=True)
            out.append(GradientMessage(s, rnd, g, l))
        return out

    def _losses(self, s):
        return LossBreakdown(s, *([0.0] * 8))

    def test_zero_gradients_keep_model(self):
        model, _ = toy()
        server = ParameterServer(model, 0.1)
        msgs = [GradientMessage(s, 0, GradientRecord.zeros_like(model), self._losses(s)) for s in range(3)]
        bc = server.server_round(msgs)
        assert bc.round == 1 and bc.model.to_bytes() == model.to_bytes()

    def test_step_is_minus_lr_times_sum(self):
        model, dss = toy()
        msgs = self._messages(model, dss)
        new = ParameterServer(model, 0.05).server_round(msgs).model
        total = GradientRecord.zeros_like(model)
        for m in msgs:
            total += m.gradient
        for v in range(3):
            for c in ALL_HEADS:
                assert np.allclose(getattr(new.params[v], c) - getattr(model.params[v], c),
                                   -0.05 * getattr(total.params[v], c), rtol=1e-12, atol=1e-15)

    def test_order_does_not_matter(self):
        model, dss = toy()
        msgs = self._messages(model, dss)
        a = ParameterServer(model, 0.05).server_round(msgs).model
        b = ParameterServer(model, 0.05).server_round(msgs[::-1]).model
        assert a.to_bytes() == b.to_bytes()

    def test_matches_centralised_step(self):
        model, dss = toy()
        msgs = self._messages(model, dss)
        total = GradientRecord.zeros_like(model)
        for m in msgs:
            total += m.gradient
        ref = apply_update(model, total, OptimizerState(), 0.05)
        assert ParameterServer(model, 0.05).server_round(msgs).model.to_bytes() == ref.to_bytes()

    def test_missing_source_aborts(self):
        model, dss = toy()
        server = ParameterServer(model, 0.1)
        with pytest.raises(RoundAbortError):
            server.server_round(self._messages(model, dss)[:2])
        assert server.round == 0 and server.model is model

    def test_duplicate_or_wrong_round(self):
        model, dss = toy()
        msgs = self._messages(model, dss)
        with pytest.raises(ProtocolError):
            ParameterServer(model).server_round(msgs + msgs[:1])
        with pytest.raises(ProtocolError):
            ParameterServer(model).server_round(self._messages(model, dss, rnd=1))


class TestWorker:
    def test_stale_broadcast(self):
        model, dss = toy()
        w = SourceWorker(0, dss[0])
        w.source_round(ModelBroadcast(0, model))
        with pytest.raises(ResyncRequest):
            w.source_round(ModelBroadcast(0, model))

    def test_empty_dataset_gradient_is_ridge_only(self):
        model, _ = toy()
        msg = SourceWorker(1, SourceDataset.empty(2)).source_round(ModelBroadcast(0, model))
        assert msg.n_s == 0
        z = model.hyper.zeta
        for v in range(3):
            assert np.allclose(msg.gradient.params[v].theta_x, 2 * z / 3 * model.params[v].theta_x)

    def test_determinism(self):
        model, dss = toy()
        a = SourceWorker(2, dss[2], seed=5).source_round(ModelBroadcast(3, model))
        b = SourceWorker(2, dss[2], seed=5).source_round(ModelBroadcast(3, model))
        assert codec.encode(a) == codec.encode(b)

    def test_unknown_message(self):
        model, dss = toy()
        with pytest.raises(ProtocolError):
            SourceWorker(0, dss[0]).handle(AteSummary(0, 0.0, 1))


class TestRunTraining:
    def test_zero_rounds_returns_initial(self):
        model, dss = toy()
        res = run_training(model, dss, 0)
        assert res.model.to_bytes() == model.to_bytes() and res.history == []

    def test_history_shape(self):
        model, dss = toy()
        res = run_training(model, dss, 4, learning_rate=1e-3)
        assert len(res.history) == 4 and all([l.source for l in h] == [0, 1, 2] for h in res.history)

    @pytest.mark.parametrize("transport", ["wire", "tcp"])
    def test_transports_identical(self, transport):
        model, dss = toy()
        ref = run_training(model, dss, 5, learning_rate=1e-3, momentum=0.5, seed=3)
        other = run_training(model, dss, 5, learning_rate=1e-3, momentum=0.5, seed=3, transport=transport)
        assert other.model.to_bytes() == ref.model.to_bytes()
        assert other.history == ref.history

    def test_unknown_transport(self):
        model, dss = toy()
        with pytest.raises(ValueError):
            run_training(model, dss, 1, transport="carrier-pigeon")

    def test_wrong_dataset_count(self):
        model, dss = toy()
        with pytest.raises(ValueError):
            run_training(model, dss[:2], 1)

    def test_failure_reports_round(self):
        model, dss = toy()
        dss[1].y[0] = np.nan
        with pytest.raises(RunError) as info:
            run_training(model, dss, 3)
        assert info.value.round == 0

    def test_frames_carry_no_records(self):
        model, dss = toy(n=8)
        res = run_training(model, dss, 3, learning_rate=1e-3, transport="wire", record_frames=True)
        blob = b"".join(res.frames)
        kinds = {codec.frame_type(f) for f in res.frames}
        assert {codec.T_DEDUP, codec.T_BROADCAST, codec.T_GRADIENT} <= kinds
        for ds in dss:
            for uid in ds.unit_ids:
                assert uid.encode() not in blob
            for v in np.concatenate([ds.y, ds.x.ravel()]):
                assert struct.pack("<d", v) not in blob
