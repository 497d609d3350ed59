"""Treatment effects from a trained model.

Latent draws for a covariate vector follow the ancestral chain
``w ~ p(w|x)``, ``y ~ p(y|x,w)``, ``z ~ p(z|x,y,w)``, with a fresh ``(w, y)``
for every draw. The last step either samples the encoder directly
(``"variational"``) or runs an independence Metropolis-Hastings chain whose
proposal is the encoder and whose target is the model's exact posterior
(``"mh"``).
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numpy.typing import NDArray

from .errors import NumericalError, ParameterError, StateError
from .model import GlobalModel, aux_outcome_mean, aux_propensity_prob, log_joint
from .rff import feature_map

SAMPLERS = ("mh", "variational")


@dataclass
class MHResult:
    samples: NDArray[np.float64]   # (chain_len - burn_in, n_chains, d) or (chain_len - burn_in, d)
    acceptance_rate: float


def independence_mh(log_target, proposal_mean, proposal_sigma: float, chain_len: int, burn_in: int,
                    rng: np.random.Generator) -> MHResult:
    """Vectorised independence sampler with Gaussian proposal ``N(mean, sigma^2 I)``.

    ``proposal_mean`` has shape ``(k, d)``: ``k`` independent chains, each with
    its own proposal and target (``log_target`` maps a ``(k, d)`` batch to
    ``(k,)``). The first state is a proposal draw; acceptance uses
    ``min(1, p(z*) q(z_t) / (p(z_t) q(z*)))``.
    """
    if not chain_len > burn_in >= 0:
        raise ParameterError("need chain_len > burn_in >= 0")
    if not proposal_sigma > 0:
        raise ParameterError("independence sampler needs a proposal with positive scale")
    mean = np.atleast_2d(np.asarray(proposal_mean, dtype=np.float64))
    k, d = mean.shape
    inv2 = 0.5 / proposal_sigma**2

    def log_q(z):
        # normalising constant cancels in the ratio
        return -inv2 * np.sum((z - mean) ** 2, axis=1)

    def target(z):
        lp = np.asarray(log_target(z), dtype=np.float64)
        if np.any(np.isnan(lp)):
            raise NumericalError("log target evaluated to NaN")
        return lp

    state = mean + proposal_sigma * rng.standard_normal((k, d))
    lp_state, lq_state = target(state), log_q(state)
    out = np.empty((chain_len - burn_in, k, d))
    if burn_in == 0:
        out[0] = state
    accepted = 0
    for t in range(1, chain_len):
        prop = mean + proposal_sigma * rng.standard_normal((k, d))
        lp_prop, lq_prop = target(prop), log_q(prop)
        log_ratio = (lp_prop - lp_state) + (lq_state - lq_prop)
        u = rng.random(k)
        acc = u < np.exp(np.minimum(log_ratio, 0.0))
        state = np.where(acc[:, None], prop, state)
        lp_state = np.where(acc, lp_prop, lp_state)
        lq_state = np.where(acc, lq_prop, lq_state)
        accepted += int(acc.sum())
        if t >= burn_in:
            out[t - burn_in] = state
    rate = accepted / (k * (chain_len - 1)) if chain_len > 1 else 1.0
    return MHResult(out, rate)


def _encoder_means(model: GlobalModel, source: int, x, y, w) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=np.float64)
    u = np.column_stack([np.broadcast_to(x, (len(y), len(x))), y])
    phi = feature_map(model.basis_xy, u)
    q0 = phi @ model.effective(source, "theta_q0")
    q1 = phi @ model.effective(source, "theta_q1")
    return (1 - w)[:, None] * q0 + w[:, None] * q1


def mh_independent_sampler(model: GlobalModel, source: int, x, y: float, w: int, chain_len: int = 500,
                           burn_in: int = 100, seed: int = 0) -> MHResult:
    """Chain targeting p(z | x, y, w) for one observed record; samples have shape
    ``(chain_len - burn_in, d_z)``."""
    if w not in (0, 1):
        raise ParameterError("w must be 0 or 1")
    _require_trained(model)
    ya, wa = np.array([float(y)]), np.array([float(w)])
    mean = _encoder_means(model, source, x, ya, wa)
    res = independence_mh(lambda z: log_joint(model, source, z, ya, wa, x), mean,
                          model.hyper.sigma_q, chain_len, burn_in, np.random.default_rng(seed))
    return MHResult(res.samples[:, 0, :], res.acceptance_rate)


def _require_trained(model: GlobalModel):
    if not model.is_finite():
        raise StateError("model contains non-finite parameters")


def sample_z_given_x(model: GlobalModel, source: int, x, N: int = 200, seed: int = 0,
                     sampler: str = "mh", chain_len: int = 500, burn_in: int = 100) -> NDArray[np.float64]:
    """``N`` latent draws from p(z | x) for ``source``; shape ``(N, d_z)``.

    With ``sampler="mh"`` each draw is the final state of its own
    independence chain of length ``chain_len`` (the chains run in lockstep).
    """
    if sampler not in SAMPLERS:
        raise ParameterError(f"unknown sampler {sampler!r}")
    if N < 1:
        raise ParameterError("N must be >= 1")
    _require_trained(model)
    h = model.hyper
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    p_w = float(aux_propensity_prob(model, source, x))
    w = (rng.random(N) < p_w).astype(np.float64)
    mu_y = aux_outcome_mean(model, source, np.broadcast_to(x, (N, len(x))), w)
    if h.y_binary:
        y = (rng.random(N) < mu_y).astype(np.float64)
    else:
        y = mu_y + h.sigma_y * rng.standard_normal(N)
    mean = _encoder_means(model, source, x, y, w)
    if sampler == "variational":
        return mean + h.sigma_q * rng.standard_normal(mean.shape)
    res = independence_mh(lambda z: log_joint(model, source, z, y, w, x), mean, h.sigma_q,
                          chain_len, min(burn_in, chain_len - 1), rng)
    return res.samples[-1]


def cate_from_latents(model: GlobalModel, source: int, z) -> float:
    """Mean over latent draws of ``f_y1(z) - f_y0(z)`` (same draws for both arms)."""
    phi = feature_map(model.basis_z, np.atleast_2d(z))
    a0 = phi @ model.effective(source, "theta_y0")
    a1 = phi @ model.effective(source, "theta_y1")
    if model.hyper.y_binary:
        from scipy.special import expit
        a0, a1 = expit(a0), expit(a1)
    return float(np.mean(a1 - a0))


def cate(model: GlobalModel, source: int, x, N: int = 200, sampler: str = "mh", seed: int = 0,
         chain_len: int = 500, burn_in: int = 100) -> float:
    z = sample_z_given_x(model, source, x, N, seed, sampler, chain_len, burn_in)
    return cate_from_latents(model, source, z)


def row_seed(seed: int, x) -> int:
    """Seed derived from the row's content so results do not depend on row order."""
    h = hashlib.sha256(int(seed).to_bytes(8, "little", signed=True))
    h.update(np.ascontiguousarray(x, dtype="<f8").tobytes())
    return int.from_bytes(h.digest()[:8], "little")


@dataclass
class EffectEstimate:
    cate: NDArray[np.float64]
    local_ate: float
    n: int
    N: int
    sampler: str


def estimate_effects(model: GlobalModel, source: int, X, N: int = 200, sampler: str = "mh",
                     seed: int = 0, chain_len: int = 500, burn_in: int = 100,
                     workers: int = 1) -> EffectEstimate:
    """CATE for every row of ``X`` and their mean.

    Each row's randomness comes from :func:`row_seed`, so the result does not
    depend on row order or on ``workers`` (threads over rows).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ParameterError("no covariate rows given")

    def one(x):
        return cate(model, source, x, N, sampler, row_seed(seed, x), chain_len, burn_in)

    if workers > 1 and X.shape[0] > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            taus = np.array(list(pool.map(one, X)))
    else:
        taus = np.array([one(x) for x in X])
    return EffectEstimate(taus, float(np.mean(taus)), len(taus), N, sampler)


def local_ate(model: GlobalModel, source: int, X, N: int = 200, sampler: str = "mh", seed: int = 0,
              chain_len: int = 500, burn_in: int = 100) -> tuple[float, int]:
    est = estimate_effects(model, source, X, N, sampler, seed, chain_len, burn_in)
    return est.local_ate, est.n


def global_ate(pairs) -> float:
    """Count-weighted mean of per-source ATEs.

    Accumulated exactly and rounded once, so the result is the double
    nearest the true weighted mean of the given values.
    """
    pairs = list(pairs)
    if not pairs:
        raise ParameterError("no local ATE summaries given")
    num, den = Fraction(0), 0
    for ate, count in pairs:
        if count < 1 or int(count) != count:
            raise ParameterError("counts must be integers >= 1")
        if not math.isfinite(ate):
            raise NumericalError(f"non-finite local ATE {ate}")
        num += Fraction(float(ate)) * int(count)
        den += int(count)
    return float(num / den)
