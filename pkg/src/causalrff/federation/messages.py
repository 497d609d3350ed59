"""Messages exchanged between the parameter server and the sources.

Nothing here carries raw records: only digests, gradients, counts, scalar
loss values and local effect summaries.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from ..model import GlobalModel
from ..training import GradientRecord, LossBreakdown


def digest(unit_id: str) -> bytes:
    """SHA-256 of the UTF-8 identifier."""
    return hashlib.sha256(str(unit_id).encode("utf-8")).digest()


@dataclass
class Hello:
    source_id: int


@dataclass
class DedupRequest:
    pass


@dataclass
class DedupMessage:
    source_id: int
    digests: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.digests = frozenset(self.digests)
        for d in self.digests:
            if not isinstance(d, bytes) or len(d) != 32:
                raise ValueError("digests must be 32-byte values")


@dataclass
class DedupResult:
    source_id: int
    excluded: frozenset = field(default_factory=frozenset)


@dataclass
class ModelBroadcast:
    round: int
    model: GlobalModel


@dataclass
class GradientMessage:
    source_id: int
    round: int
    gradient: GradientRecord
    losses: LossBreakdown

    @property
    def n_s(self) -> int:
        return self.gradient.n


@dataclass
class AteSummary:
    source_id: int
    ate: float
    count: int


@dataclass
class Resync:
    source_id: int
    round: int


@dataclass
class Shutdown:
    pass
