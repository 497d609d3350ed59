"""Latent-confounder structural model with RFF heads.

Every head is linear in a random Fourier feature vector. For source ``s`` the
weights actually applied are ``theta^s + sum_{v != s} lambda^{s,v} theta^v``
(see :func:`causalrff.rff.effective_weight`); ``gamma`` plays that role for the
propensity head ``psi`` and ``eta`` for the auxiliary outcome heads ``beta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from . import kernels
from ._binary import Reader, Writer
from .errors import ParameterError, ProtocolError, ShapeError
from .rff import GAUSSIAN, FourierBasis, effective_weight, feature_map, sample_basis

LATENT_HEADS = ("theta_y0", "theta_y1", "theta_w", "theta_x", "theta_q0", "theta_q1")
PROPENSITY_HEADS = ("psi",)
OUTCOME_HEADS = ("beta0", "beta1")
ALL_HEADS = LATENT_HEADS + PROPENSITY_HEADS + OUTCOME_HEADS
FACTOR_NAMES = ("lambda", "gamma", "eta")

# which transfer-factor matrix couples each head across sources
HEAD_FACTOR = {**{h: "lambda" for h in LATENT_HEADS}, "psi": "gamma", "beta0": "eta", "beta1": "eta"}

CONTINUOUS = "continuous"
BINARY = "binary"

BLOB_VERSION = 1


@dataclass
class SourceParams:
    """Head weights owned by one source."""

    theta_y0: NDArray[np.float64]
    theta_y1: NDArray[np.float64]
    theta_w: NDArray[np.float64]
    theta_x: NDArray[np.float64]
    theta_q0: NDArray[np.float64]
    theta_q1: NDArray[np.float64]
    psi: NDArray[np.float64]
    beta0: NDArray[np.float64]
    beta1: NDArray[np.float64]

    def arrays(self):
        return [getattr(self, h) for h in ALL_HEADS]

    def copy(self) -> SourceParams:
        return SourceParams(*(np.array(a, dtype=np.float64, copy=True) for a in self.arrays()))

    @classmethod
    def zeros(cls, bz2: int, bq2: int, bx2: int, d_x: int, d_z: int) -> SourceParams:
        z = np.zeros
        return cls(z(bz2), z(bz2), z(bz2), z((bz2, d_x)), z((bq2, d_z)), z((bq2, d_z)),
                   z(bx2), z(bx2), z(bx2))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class AdaptiveFactors:
    """Unconstrained transfer-factor logits; values are ``logistic(raw)``.

    Diagonal entries are never applied. ``trainable=False`` freezes the factors
    (used for clamped ablations).
    """

    lambda_raw: NDArray[np.float64]
    gamma_raw: NDArray[np.float64]
    eta_raw: NDArray[np.float64]
    trainable: bool = True

    @classmethod
    def constant(cls, m: int, raw: float = 0.0, trainable: bool = True) -> AdaptiveFactors:
        return cls(np.full((m, m), float(raw)), np.full((m, m), float(raw)),
                   np.full((m, m), float(raw)), trainable)

    @property
    def m(self) -> int:
        return self.lambda_raw.shape[0]

    def raw(self, name: str) -> NDArray[np.float64]:
        return getattr(self, f"{name}_raw")

    def values(self, name: str) -> NDArray[np.float64]:
        """Factor matrix in ``(0, 1)`` with a zero diagonal."""
        v = expit(self.raw(name))
        np.fill_diagonal(v, 0.0)
        return v

    @property
    def lam(self):
        return self.values("lambda")

    @property
    def gamma(self):
        return self.values("gamma")

    @property
    def eta(self):
        return self.values("eta")

    def copy(self) -> AdaptiveFactors:
        return AdaptiveFactors(self.lambda_raw.copy(), self.gamma_raw.copy(), self.eta_raw.copy(),
                               self.trainable)


@dataclass(frozen=True)
class Hyperparams:
    sigma_z: float = 1.0
    sigma_y: float = 1.0
    sigma_x: float = 1.0
    sigma_q: float = 1.0
    d_z: int = 5
    M: int = 2
    zeta: float = 1e-2
    zeta_w: float = 1e-2
    zeta_y: float = 1e-2
    y_mode: str = CONTINUOUS
    x_mode: tuple = ()  # one entry per covariate; empty means all continuous

    def __post_init__(self):
        for name in ("sigma_z", "sigma_y", "sigma_x"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        # sigma_q = 0 is allowed for a degenerate (point-mass) encoder at inference time
        if not self.sigma_q >= 0:
            raise ParameterError("sigma_q must be non-negative")
        if int(self.M) < 1 or int(self.d_z) < 1:
            raise ParameterError("M and d_z must be >= 1")
        for name in ("zeta", "zeta_w", "zeta_y"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.y_mode not in (CONTINUOUS, BINARY):
            raise ParameterError(f"y_mode must be {CONTINUOUS!r} or {BINARY!r}")
        xm = (self.x_mode,) if isinstance(self.x_mode, str) else tuple(self.x_mode)
        if any(v not in (CONTINUOUS, BINARY) for v in xm):
            raise ParameterError(f"invalid x_mode entry in {xm}")
        object.__setattr__(self, "x_mode", xm)
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "d_z", int(self.d_z))

    def x_binary_mask(self, d_x: int) -> NDArray[np.bool_]:
        if len(self.x_mode) == 0:
            return np.zeros(d_x, dtype=bool)
        if len(self.x_mode) == 1:
            return np.full(d_x, self.x_mode[0] == BINARY)
        if len(self.x_mode) != d_x:
            raise ShapeError(f"x_mode has {len(self.x_mode)} entries for {d_x} covariates")
        return np.array([v == BINARY for v in self.x_mode])

    @property
    def y_binary(self) -> bool:
        return self.y_mode == BINARY

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["x_mode"] = list(self.x_mode)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Hyperparams:
        return cls(**{**d, "x_mode": tuple(d.get("x_mode", ()))})


@dataclass
class GlobalModel:
    """Everything the server broadcasts: bases, per-source heads, factors, hyperparameters."""

    basis_z: FourierBasis
    basis_xy: FourierBasis
    basis_x: FourierBasis
    params: list[SourceParams]
    factors: AdaptiveFactors
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        if len(self.params) != self.factors.m:
            raise ShapeError(f"{len(self.params)} parameter sets but {self.factors.m}x{self.factors.m} factors")
        d_x = self.basis_x.input_dim
        if self.basis_xy.input_dim != d_x + 1:
            raise ShapeError("basis_xy must act on [x; y] of dimension d_x + 1")
        if self.basis_z.input_dim != self.hyper.d_z:
            raise ShapeError("basis_z dimension must equal d_z")
        expected = SourceParams.zeros(self.basis_z.dim, self.basis_xy.dim, self.basis_x.dim, d_x,
                                      self.hyper.d_z)
        for s, p in enumerate(self.params):
            for h in ALL_HEADS:
                if getattr(p, h).shape != getattr(expected, h).shape:
                    raise ShapeError(f"source {s} head {h} has shape {getattr(p, h).shape}, "
                                     f"expected {getattr(expected, h).shape}")

    @property
    def m(self) -> int:
        return len(self.params)

    @property
    def d_x(self) -> int:
        return self.basis_x.input_dim

    def copy(self) -> GlobalModel:
        return replace(self, params=[p.copy() for p in self.params], factors=self.factors.copy())

    def is_finite(self) -> bool:
        f = self.factors
        return (all(p.is_finite() for p in self.params)
                and all(np.all(np.isfinite(f.raw(n))) for n in FACTOR_NAMES))

    def effective(self, source: int, head: str) -> NDArray[np.float64]:
        """Transferred weights of ``head`` as seen by ``source``."""
        fac = self.factors.values(HEAD_FACTOR[head])
        own = getattr(self.params[source], head)
        others = [(fac[source, v], getattr(self.params[v], head))
                  for v in range(self.m) if v != source]
        return effective_weight(own, others)

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": BLOB_VERSION,
            "hyper": self.hyper.to_dict(),
            "bases": {"z": self.basis_z.to_dict(), "xy": self.basis_xy.to_dict(),
                      "x": self.basis_x.to_dict()},
            "params": [{h: getattr(p, h).tolist() for h in ALL_HEADS} for p in self.params],
            "factors": {**{f"{n}_raw": self.factors.raw(n).tolist() for n in FACTOR_NAMES},
                        "trainable": self.factors.trainable,
                        **{n: self.factors.values(n).tolist() for n in FACTOR_NAMES}},
        }

    @classmethod
    def from_dict(cls, d: dict) -> GlobalModel:
        if d.get("version") != BLOB_VERSION:
            raise ParameterError(f"unsupported checkpoint version {d.get('version')}")
        f = d["factors"]
        return cls(
            FourierBasis.from_dict(d["bases"]["z"]),
            FourierBasis.from_dict(d["bases"]["xy"]),
            FourierBasis.from_dict(d["bases"]["x"]),
            [SourceParams(*(np.asarray(p[h], dtype=np.float64) for h in ALL_HEADS)) for p in d["params"]],
            AdaptiveFactors(*(np.asarray(f[f"{n}_raw"], dtype=np.float64) for n in FACTOR_NAMES),
                            trainable=bool(f["trainable"])),
            Hyperparams.from_dict(d["hyper"]),
        )

    def to_bytes(self) -> bytes:
        out = Writer()
        out.u16(BLOB_VERSION)
        h = self.hyper
        for v in (h.sigma_z, h.sigma_y, h.sigma_x, h.sigma_q, h.zeta, h.zeta_w, h.zeta_y):
            out.f64(v)
        out.u32(h.d_z)
        out.u32(h.M)
        out.u8(int(h.y_binary))
        out.u32(len(h.x_mode))
        out.raw(bytes(int(v == BINARY) for v in h.x_mode))
        for b in (self.basis_z, self.basis_xy, self.basis_x):
            out.blob(b.to_bytes())
        out.u32(self.m)
        out.u8(int(self.factors.trainable))
        for p in self.params:
            for a in p.arrays():
                out.array(a)
        for n in FACTOR_NAMES:
            out.array(self.factors.raw(n))
        return out.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> GlobalModel:
        r = Reader(buf)
        version = r.u16()
        if version != BLOB_VERSION:
            raise ProtocolError(f"unsupported model blob version {version}")
        sz, sy, sx, sq, zeta, zeta_w, zeta_y = (r.f64() for _ in range(7))
        d_z, m_samples = r.u32(), r.u32()
        y_mode = BINARY if r.u8() else CONTINUOUS
        n_x = r.u32()
        x_mode = tuple(BINARY if c else CONTINUOUS for c in r.raw(n_x))
        hyper = Hyperparams(sz, sy, sx, sq, d_z, m_samples, zeta, zeta_w, zeta_y, y_mode, x_mode)
        bases = [FourierBasis.from_bytes(r.blob())[0] for _ in range(3)]
        m = r.u32()
        trainable = bool(r.u8())
        params = [SourceParams(*(r.array() for _ in ALL_HEADS)) for _ in range(m)]
        raws = [r.array() for _ in FACTOR_NAMES]
        if not r.done():
            raise ProtocolError("trailing bytes after model blob")
        return cls(*bases, params, AdaptiveFactors(*raws, trainable=trainable), hyper)


def init_model(
    m: int,
    d_x: int,
    hyper: Hyperparams | None = None,
    num_features: int = 100,
    kernel: str = GAUSSIAN,
    lengthscale: float | tuple = 1.0,
    nu: float | None = None,
    seed: int = 0,
    init_scale: float = 0.1,
    factor_init: float = 0.0,
    trainable_factors: bool = True,
) -> GlobalModel:
    """Fresh model with frozen bases and small random heads.

    ``lengthscale`` is one value for all three bases or a ``(z, xy, x)`` triple.
    ``factor_init`` is the initial logit of every transfer factor (0 gives 0.5).
    """
    if m < 1 or d_x < 1:
        raise ParameterError("m and d_x must be >= 1")
    hyper = hyper or Hyperparams()
    ss = np.random.SeedSequence(seed)
    sz, sxy, sx, sp = (int(c.generate_state(1)[0]) for c in ss.spawn(4))
    lz, lxy, lx = (lengthscale,) * 3 if np.isscalar(lengthscale) else tuple(lengthscale)
    bz = sample_basis(kernel, lz, hyper.d_z, num_features, sz, nu=nu)
    bxy = sample_basis(kernel, lxy, d_x + 1, num_features, sxy, nu=nu)
    bx = sample_basis(kernel, lx, d_x, num_features, sx, nu=nu)
    rng = np.random.default_rng(sp)
    template = SourceParams.zeros(bz.dim, bxy.dim, bx.dim, d_x, hyper.d_z)
    params = [SourceParams(*(init_scale * rng.standard_normal(a.shape) for a in template.arrays()))
              for _ in range(m)]
    factors = AdaptiveFactors.constant(m, factor_init, trainable_factors)
    return GlobalModel(bz, bxy, bx, params, factors, hyper)


# ---------------------------------------------------------------------------
# densities and heads


def prior_log_density(z, hyper: Hyperparams) -> float:
    """log N(z; 0, sigma_z^2 I)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != hyper.d_z:
        raise ShapeError(f"z must have dimension {hyper.d_z}")
    s2 = hyper.sigma_z**2
    return -0.5 * hyper.d_z * math.log(2 * math.pi * s2) - 0.5 * np.sum(z * z, axis=-1) / s2


def propensity_logit(model: GlobalModel, source: int, z) -> float:
    return feature_map(model.basis_z, z) @ model.effective(source, "theta_w")


def propensity_prob(model: GlobalModel, source: int, z) -> float:
    """p(w = 1 | z) for ``source``."""
    return expit(propensity_logit(model, source, z))


def outcome_mean(model: GlobalModel, source: int, z, w) -> float:
    """Mean of p(y | w, z); a probability when outcomes are binary."""
    if np.any((np.asarray(w) != 0) & (np.asarray(w) != 1)):
        raise ParameterError("w must be 0 or 1")
    phi = feature_map(model.basis_z, z)
    a0 = phi @ model.effective(source, "theta_y0")
    a1 = phi @ model.effective(source, "theta_y1")
    mu = (1 - w) * a0 + w * a1
    return expit(mu) if model.hyper.y_binary else mu


@dataclass
class ProxyDistribution:
    """Per-covariate parameters of p(x | z).

    ``mean`` holds the linear head output for every dimension; ``prob`` is its
    logistic transform on binary dimensions and NaN elsewhere.
    """

    mean: NDArray[np.float64]
    prob: NDArray[np.float64]
    binary: NDArray[np.bool_]
    sigma: float


def proxy_distribution(model: GlobalModel, source: int, z) -> ProxyDistribution:
    a = feature_map(model.basis_z, z) @ model.effective(source, "theta_x")
    mask = model.hyper.x_binary_mask(model.d_x)
    return ProxyDistribution(a, np.where(mask, expit(a), np.nan), mask, model.hyper.sigma_x)


def variational_mean(model: GlobalModel, source: int, y, w, x) -> NDArray[np.float64]:
    """Encoder mean ``(1 - w) f_q0([x; y]) + w f_q1([x; y])``."""
    if w not in (0, 1):
        raise ParameterError("w must be 0 or 1")
    u = np.append(np.asarray(x, dtype=np.float64), float(y))
    phi = feature_map(model.basis_xy, u)
    if w == 0:
        return phi @ model.effective(source, "theta_q0")
    return phi @ model.effective(source, "theta_q1")


def reparam_sample(mean, sigma_q: float, epsilon) -> NDArray[np.float64]:
    mean = np.asarray(mean, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if mean.shape != epsilon.shape:
        raise ShapeError(f"mean {mean.shape} and epsilon {epsilon.shape} differ")
    return mean + sigma_q * epsilon


def aux_propensity_prob(model: GlobalModel, source: int, x) -> NDArray[np.float64]:
    """p(w = 1 | x) from the auxiliary head ``psi``."""
    return expit(feature_map(model.basis_x, x) @ model.effective(source, "psi"))


def aux_outcome_mean(model: GlobalModel, source: int, x, w) -> NDArray[np.float64]:
    """Mean (or probability) of p(y | x, w) from the auxiliary heads ``beta``."""
    phi = feature_map(model.basis_x, x)
    w = np.asarray(w, dtype=np.float64)
    mu = (1 - w) * (phi @ model.effective(source, "beta0")) + w * (phi @ model.effective(source, "beta1"))
    return expit(mu) if model.hyper.y_binary else mu


def log_joint(model: GlobalModel, source: int, z, y, w, x) -> NDArray[np.float64]:
    """Unnormalised log posterior ``log p(y|z,w) + log p(w|z) + log p(x|z) + log p(z)``.

    ``z`` has shape ``(k, d_z)``; ``y`` and ``w`` broadcast to ``(k,)``.
    """
    z = np.ascontiguousarray(np.atleast_2d(z), dtype=np.float64)
    k = z.shape[0]
    return kernels.log_joint(
        z,
        np.broadcast_to(np.asarray(w, dtype=np.float64), (k,)).copy(),
        np.broadcast_to(np.asarray(y, dtype=np.float64), (k,)).copy(),
        np.ascontiguousarray(x, dtype=np.float64),
        model.hyper.x_binary_mask(model.d_x),
        model.hyper.y_binary,
        model.effective(source, "theta_y0"),
        model.effective(source, "theta_y1"),
        model.effective(source, "theta_w"),
        np.ascontiguousarray(model.effective(source, "theta_x")),
        model.basis_z.frequencies,
        model.hyper.sigma_y,
        model.hyper.sigma_x,
        model.hyper.sigma_z,
    )
