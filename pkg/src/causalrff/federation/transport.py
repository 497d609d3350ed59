"""Transports and the training driver.

``inprocess`` hands message objects straight to the workers. ``wire`` pushes
every message through the binary codec (and can record the frames).
``tcp`` runs each source in its own thread behind a real socket.
"""
from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, field

from ..data import SourceDataset
from ..errors import CausalRFFError, ParameterError
from ..model import GlobalModel
from . import codec
from .messages import DedupRequest, DedupResult, Hello, Shutdown
from .protocol import ParameterServer, SourceWorker, dedup_round

log = logging.getLogger(__name__)

TRANSPORTS = ("inprocess", "wire", "tcp")


class RunError(CausalRFFError, RuntimeError):
    """Training aborted; ``round`` is the round index (-1 during dedup)."""

    def __init__(self, message, round_index):
        super().__init__(f"round {round_index}: {message}")
        self.round = round_index


class InProcessLink:
    def __init__(self, worker: SourceWorker):
        self.worker = worker

    def request(self, msg):
        return self.worker.handle(msg)

    def send(self, msg):
        self.worker.handle(msg)

    def close(self):
        pass


class WireLink:
    """Encodes every message to bytes and decodes it on the other side."""

    def __init__(self, worker: SourceWorker, frames: list | None = None):
        self.worker = worker
        self.frames = frames

    def _ship(self, msg):
        frame = codec.encode(msg)
        if self.frames is not None:
            self.frames.append(frame)
        return codec.decode(frame)

    def request(self, msg):
        reply = self.worker.handle(self._ship(msg))
        return None if reply is None else self._ship(reply)

    def send(self, msg):
        self.worker.handle(self._ship(msg))

    def close(self):
        pass


class TcpLink:
    def __init__(self, sock: socket.socket, frames: list | None = None):
        self.sock = sock
        self.frames = frames

    def send(self, msg):
        frame = codec.send_msg(self.sock, msg)
        if self.frames is not None:
            self.frames.append(frame)

    def request(self, msg):
        self.send(msg)
        frame = codec.read_frame(self.sock)
        if self.frames is not None:
            self.frames.append(frame)
        return codec.decode(frame)

    def close(self):
        self.sock.close()


def _serve_source(worker: SourceWorker, address, errors: list):
    try:
        with socket.create_connection(address) as sock:
            codec.send_msg(sock, Hello(worker.source_id))
            while True:
                msg = codec.recv_msg(sock)
                if isinstance(msg, Shutdown):
                    return
                reply = worker.handle(msg)
                if reply is not None:
                    codec.send_msg(sock, reply)
    except Exception as exc:  # reported by the server side
        errors.append((worker.source_id, exc))


def parse_address(listen: str | None):
    if not listen:
        return ("127.0.0.1", 0)
    host, _, port = listen.rpartition(":")
    if not host or not port.isdigit():
        raise ParameterError(f"--listen expects host:port, got {listen!r}")
    return (host, int(port))


@dataclass
class TrainingResult:
    model: GlobalModel
    history: list = field(default_factory=list)
    excluded: dict = field(default_factory=dict)
    broadcasts: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    workers: list = field(default_factory=list)

    def __iter__(self):
        # unpacks as (model, history)
        return iter((self.model, self.history))


def _drive(server: ParameterServer, links: dict, rounds: int, result: TrainingResult,
           record_broadcasts: bool):
    rnd = -1
    try:
        replies = [links[s].request(DedupRequest()) for s in sorted(links)]
        exclusions = dedup_round(replies)
        for s in sorted(links):
            links[s].send(DedupResult(s, exclusions[s]))
        result.excluded = {s: len(v) for s, v in exclusions.items()}
        for rnd in range(rounds):
            bc = server.broadcast()
            if record_broadcasts:
                result.broadcasts.append(codec.encode(bc))
            msgs = [links[s].request(bc) for s in sorted(links)]
            result.history.append(sorted((msg.losses for msg in msgs), key=lambda lb: lb.source))
            server.server_round(msgs)
        if record_broadcasts:
            result.broadcasts.append(codec.encode(server.broadcast()))
    except RunError:
        raise
    except (CausalRFFError, OSError, ConnectionError) as exc:
        raise RunError(str(exc), rnd) from exc
    finally:
        for link in links.values():
            try:
                link.send(Shutdown())
            except OSError:
                pass
            link.close()
    result.model = server.model


def run_training(model: GlobalModel, datasets: list[SourceDataset], rounds: int,
                 learning_rate: float = 1e-2, momentum: float = 0.0, seed: int = 0,
                 transport: str = "inprocess", listen: str | None = None,
                 record_frames: bool = False, record_broadcasts: bool = False) -> TrainingResult:
    """Dedup round, then ``rounds`` synchronous gradient rounds.

    ``history[r]`` holds each source's :class:`~causalrff.training.LossBreakdown`
    at the model broadcast in round ``r``.
    """
    if transport not in TRANSPORTS:
        raise ParameterError(f"unknown transport {transport!r}; expected one of {TRANSPORTS}")
    if rounds < 0:
        raise ParameterError("rounds must be >= 0")
    if len(datasets) != model.m:
        raise ParameterError(f"{len(datasets)} datasets for a model with {model.m} sources")
    server = ParameterServer(model, learning_rate, momentum)
    workers = [SourceWorker(s, ds, seed) for s, ds in enumerate(datasets)]
    result = TrainingResult(model, workers=workers)
    frames = result.frames if record_frames else None

    if transport == "inprocess":
        links = {w.source_id: InProcessLink(w) for w in workers}
        _drive(server, links, rounds, result, record_broadcasts)
        return result
    if transport == "wire":
        links = {w.source_id: WireLink(w, frames) for w in workers}
        _drive(server, links, rounds, result, record_broadcasts)
        return result

    errors: list = []
    with socket.create_server(parse_address(listen)) as lsock:
        lsock.settimeout(30.0)
        address = lsock.getsockname()[:2]
        threads = [threading.Thread(target=_serve_source, args=(w, address, errors), daemon=True)
                   for w in workers]
        for t in threads:
            t.start()
        links = {}
        try:
            while len(links) < len(workers):
                conn, _ = lsock.accept()
                conn.settimeout(300.0)
                hello = codec.recv_msg(conn)
                if not isinstance(hello, Hello) or hello.source_id in links:
                    conn.close()
                    raise RunError("bad handshake", -1)
                links[hello.source_id] = TcpLink(conn, frames)
        except (OSError, CausalRFFError) as exc:
            for link in links.values():
                link.close()
            raise RunError(f"source connection failed: {exc}", -1) from exc
        try:
            _drive(server, links, rounds, result, record_broadcasts)
        except RunError as exc:
            if errors:
                sid, err = errors[0]
                raise RunError(f"source {sid} failed: {err!r}", exc.round) from err
            raise
        for t in threads:
            t.join(timeout=30.0)
    return result
