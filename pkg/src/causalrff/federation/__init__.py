from .messages import (AteSummary, DedupMessage, DedupResult, GradientMessage, ModelBroadcast,
                       digest)
from .protocol import ParameterServer, SourceWorker, dedup_round
from .transport import TRANSPORTS, RunError, TrainingResult, run_training

__all__ = [
    "AteSummary", "DedupMessage", "DedupResult", "GradientMessage", "ModelBroadcast", "digest",
    "ParameterServer", "SourceWorker", "dedup_round", "TRANSPORTS", "RunError", "TrainingResult",
    "run_training",
]
