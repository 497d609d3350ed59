"""Server and source roles of the synchronous training protocol."""
from __future__ import annotations

import logging
from collections import Counter

from ..data import SourceDataset
from ..errors import ProtocolError, ResyncRequest, RoundAbortError, ShapeError
from ..model import GlobalModel
from ..training import GradientRecord, OptimizerState, apply_update, local_gradient, noise_draws
from .messages import (DedupMessage, DedupRequest, DedupResult, GradientMessage, ModelBroadcast,
                       Shutdown, digest)

log = logging.getLogger(__name__)


def dedup_round(messages: list[DedupMessage]) -> dict[int, frozenset]:
    """Digests held by two or more distinct sources, restricted to each source's own set."""
    ids = [m.source_id for m in messages]
    dupes = [s for s, c in Counter(ids).items() if c > 1]
    if dupes:
        raise ProtocolError(f"duplicate dedup message from source {dupes[0]}")
    seen = Counter(d for m in messages for d in m.digests)
    shared = frozenset(d for d, c in seen.items() if c >= 2)
    return {m.source_id: frozenset(m.digests & shared) for m in messages}


class ParameterServer:
    """Collects one gradient per source, sums them and broadcasts the updated model."""

    def __init__(self, model: GlobalModel, learning_rate: float = 1e-2, momentum: float = 0.0):
        self.model = model
        self.learning_rate = learning_rate
        self.state = OptimizerState(momentum)
        self.round = 0

    def broadcast(self) -> ModelBroadcast:
        return ModelBroadcast(self.round, self.model)

    def server_round(self, messages: list[GradientMessage]) -> ModelBroadcast:
        m = self.model.m
        by_source = {}
        for msg in messages:
            if msg.source_id in by_source:
                raise ProtocolError(f"two gradients from source {msg.source_id} in round {self.round}")
            if msg.round != self.round:
                raise ProtocolError(f"gradient for round {msg.round} received in round {self.round}")
            by_source[msg.source_id] = msg
        missing = sorted(set(range(m)) - set(by_source))
        if missing:
            raise RoundAbortError(f"round {self.round}: no gradient from sources {missing}")
        if len(by_source) != m:
            raise ProtocolError(f"unknown source ids {sorted(set(by_source) - set(range(m)))}")
        total = GradientRecord.zeros_like(self.model)
        for sid in sorted(by_source):
            try:
                total += by_source[sid].gradient
            except (ShapeError, ValueError) as exc:
                raise ProtocolError(f"source {sid}: {exc}") from exc
        self.model = apply_update(self.model, total, self.state, self.learning_rate)
        self.round += 1
        return self.broadcast()


class SourceWorker:
    """One data holder. Raw records never leave this object."""

    def __init__(self, source_id: int, dataset: SourceDataset, seed: int = 0):
        self.source_id = source_id
        self.dataset = dataset
        self.seed = seed
        self.next_round = 0
        self.excluded = 0

    def dedup_message(self) -> DedupMessage:
        ids = self.dataset.unit_ids or []
        return DedupMessage(self.source_id, frozenset(digest(u) for u in ids))

    def apply_exclusions(self, excluded) -> None:
        excluded = frozenset(excluded)
        if not excluded or self.dataset.unit_ids is None:
            return
        keep = [i for i, u in enumerate(self.dataset.unit_ids) if digest(u) not in excluded]
        self.excluded = len(self.dataset) - len(keep)
        self.dataset = self.dataset.subset(keep)
        if not keep:
            log.warning("source %d: every record excluded by dedup; contributing regulariser-only gradients",
                        self.source_id)

    def source_round(self, broadcast: ModelBroadcast) -> GradientMessage:
        if broadcast.round < self.next_round:
            raise ResyncRequest(f"source {self.source_id}: stale broadcast for round {broadcast.round}, "
                                f"expected {self.next_round}")
        model = broadcast.model
        h = model.hyper
        eps = noise_draws(self.seed, self.source_id, broadcast.round, h.M, len(self.dataset), h.d_z)
        grad, losses = local_gradient(model, self.source_id, self.dataset, eps, with_losses=True)
        self.next_round = broadcast.round + 1
        return GradientMessage(self.source_id, broadcast.round, grad, losses)

    def handle(self, msg):
        """Dispatch one incoming message; returns the reply or ``None``."""
        if isinstance(msg, DedupRequest):
            return self.dedup_message()
        if isinstance(msg, DedupResult):
            self.apply_exclusions(msg.excluded)
            return None
        if isinstance(msg, ModelBroadcast):
            return self.source_round(msg)
        if isinstance(msg, Shutdown):
            return None
        raise ProtocolError(f"source {self.source_id} cannot handle {type(msg).__name__}")
