"""Experiment configuration: one JSON file, validated before any run."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import BENCHMARK_KINDS, DX_DEFAULT
from .effects import SAMPLERS
from .errors import ParameterError
from .federation.transport import TRANSPORTS
from .model import BINARY, CONTINUOUS, Hyperparams
from .rff import KERNELS, MATERN, MATERN_NUS


class ConfigError(ParameterError):
    """Malformed or inconsistent configuration."""


@dataclass
class BenchmarkConfig:
    kind: str = "diff"
    m: int = 5
    n_per_source: int = 1000
    d_x: int = DX_DEFAULT
    train: int | None = None   # None: scaled 50 per 1000
    test: int | None = None    # None: scaled 450 per 1000
    val: int | None = None     # None: scaled 400 per 1000
    sigma0: float = 1.0
    sigma1: float = 1.0

    def validate(self):
        if self.kind not in BENCHMARK_KINDS:
            raise ConfigError(f"benchmark.kind must be one of {BENCHMARK_KINDS}")
        if self.m < 1 or self.n_per_source < 1 or self.d_x < 1:
            raise ConfigError("benchmark.m, n_per_source and d_x must be >= 1")
        if not (self.sigma0 > 0 and self.sigma1 > 0):
            raise ConfigError("benchmark.sigma0 and sigma1 must be positive")


@dataclass
class ModelConfig:
    num_features: int = 100
    kernel: str = "gaussian"
    lengthscale: tuple = (1.0, 5.0, 5.0)   # z, (x, y) and x bases
    nu: float | None = None
    d_z: int = 5
    M: int = 2
    sigma_z: float = 1.0
    sigma_y: float = 1.0
    sigma_x: float = 1.0
    sigma_q: float = 1.0
    zeta: float = 1e-2
    zeta_w: float = 1e-2
    zeta_y: float = 1e-2
    y_mode: str = CONTINUOUS
    x_mode: str = BINARY
    init_scale: float = 0.1
    factor_init: float = 0.0
    factors: str = "learned"               # "clamped" fixes every transfer factor at 1

    def validate(self):
        if self.num_features < 1:
            raise ConfigError("model.num_features must be >= 1")
        if self.kernel not in KERNELS:
            raise ConfigError(f"model.kernel must be one of {KERNELS}")
        if self.kernel == MATERN and self.nu not in MATERN_NUS:
            raise ConfigError(f"model.nu must be one of {MATERN_NUS} for the Matern kernel")
        if len(self.lengthscale) != 3 or min(self.lengthscale) <= 0:
            raise ConfigError("model.lengthscale must hold three positive values")
        if self.factors not in ("learned", "clamped"):
            raise ConfigError("model.factors must be 'learned' or 'clamped'")
        if self.x_mode not in (CONTINUOUS, BINARY):
            raise ConfigError(f"model.x_mode must be {CONTINUOUS!r} or {BINARY!r}")
        if self.sigma_q <= 0:
            raise ConfigError("model.sigma_q must be positive for training")
        try:
            self.hyperparams()
        except ParameterError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.sigma_z, self.sigma_y, self.sigma_x, self.sigma_q, self.d_z, self.M,
                           self.zeta, self.zeta_w, self.zeta_y, self.y_mode, (self.x_mode,))


@dataclass
class TrainingConfig:
    rounds: int = 500
    learning_rate: float = 1e-4
    momentum: float = 0.9
    log_every: int = 1   # loss-history stride in rounds

    def validate(self):
        if self.rounds < 0:
            raise ConfigError("training.rounds must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("training.learning_rate must be positive")
        if not 0.0 <= self.momentum <= 0.99:
            raise ConfigError("training.momentum must lie in [0, 0.99]")
        if self.log_every < 1:
            raise ConfigError("training.log_every must be >= 1")


@dataclass
class SamplerConfig:
    kind: str = "mh"
    N: int = 200
    chain_len: int = 500
    burn_in: int = 100

    def validate(self):
        if self.kind not in SAMPLERS:
            raise ConfigError(f"sampler.kind must be one of {SAMPLERS}")
        if self.N < 1 or self.chain_len < 1:
            raise ConfigError("sampler.N and chain_len must be >= 1")
        if not 0 <= self.burn_in < self.chain_len:
            raise ConfigError("sampler.burn_in must lie in [0, chain_len)")


@dataclass
class EvaluationConfig:
    split: str = "test"
    max_rows: int | None = None   # None: every row of the split
    workers: int = 1              # threads over records

    def validate(self):
        if self.split not in ("train", "test", "val", "all"):
            raise ConfigError("evaluation.split must be train, test, val or all")
        if self.max_rows is not None and self.max_rows < 1:
            raise ConfigError("evaluation.max_rows must be >= 1")
        if self.workers < 1:
            raise ConfigError("evaluation.workers must be >= 1")


@dataclass
class BoundsConfig:
    m_values: tuple = (1, 2, 5)
    B_values: tuple = (1, 100)
    n_values: tuple = (1, 10, 50, 100, 1000)
    factor_values: tuple = (0.0, 0.5, 1.0)
    d_x: int = 1
    sigma: float = 1.0

    def validate(self):
        if not (self.m_values and self.B_values and self.n_values and self.factor_values):
            raise ConfigError("bounds grids must be non-empty")
        if min(self.m_values) < 1 or min(self.B_values) < 1 or min(self.n_values) < 1:
            raise ConfigError("bounds.m_values, B_values and n_values must be >= 1")
        if min(self.factor_values) < 0 or max(self.factor_values) > 1:
            raise ConfigError("bounds.factor_values must lie in [0, 1]")
        if self.d_x < 1 or not self.sigma > 0:
            raise ConfigError("bounds.d_x must be >= 1 and sigma positive")


_SECTIONS = {
    "benchmark": BenchmarkConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "sampler": SamplerConfig,
    "evaluation": EvaluationConfig,
    "bounds": BoundsConfig,
}
_TUPLE_FIELDS = {"lengthscale", "m_values", "B_values", "n_values", "factor_values"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    transport: str = "inprocess"
    listen: str | None = None
    out_dir: str = "runs/default"
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)

    def validate(self) -> ExperimentConfig:
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"transport must be one of {TRANSPORTS}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        for name in _SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for sec in _SECTIONS:
            for k, v in d[sec].items():
                if isinstance(v, tuple):
                    d[sec][k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        top = {f.name for f in fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in _SECTIONS:
                kw[k] = _section(k, v)
            else:
                kw[k] = v
        try:
            return cls(**kw).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> ExperimentConfig:
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def _section(name: str, d) -> object:
    cls = _SECTIONS[name]
    if not isinstance(d, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kw = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def describe_defaults() -> str:
    """Plain-text listing of every configuration key with its default."""
    lines = []
    base = ExperimentConfig()
    for f in fields(ExperimentConfig):
        if f.name in _SECTIONS:
            continue
        lines.append(f"  {f.name} = {json.dumps(getattr(base, f.name))}")
    for sec, cls in _SECTIONS.items():
        lines.append(f"  [{sec}]")
        inst = cls()
        for f in fields(cls):
            v = getattr(inst, f.name)
            lines.append(f"    {f.name} = {json.dumps(list(v) if isinstance(v, tuple) else v)}")
    return "\n".join(lines)
