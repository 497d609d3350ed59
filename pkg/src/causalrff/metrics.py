"""Evaluation metrics and closed-form minimax lower bounds."""
from __future__ import annotations

import math

import numpy as np

from .errors import DomainError, ParameterError, ShapeError


def pehe(true_cate, est_cate) -> float:
    """Root mean squared error over individual effects (sqrt PEHE)."""
    t = np.asarray(true_cate, dtype=np.float64).ravel()
    e = np.asarray(est_cate, dtype=np.float64).ravel()
    if t.shape != e.shape or t.size == 0:
        raise ShapeError(f"need equal non-empty lengths, got {t.size} and {e.size}")
    return float(np.sqrt(np.mean((t - e) ** 2)))


def ate_error(true_ate: float, est_ate: float) -> float:
    return abs(float(true_ate) - float(est_ate))


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n)) over replicates."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ParameterError("no values")
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(np.mean(v)), se


def _transfer_sums(m: int, n_list, factors):
    n = np.asarray(n_list, dtype=np.float64)
    if m < 1 or n.shape != (m,):
        raise ShapeError(f"n_list must have length m={m}")
    if np.any(n < 1):
        raise ParameterError("every n_s must be >= 1")
    if factors is None:
        f = np.zeros((m, m))
    else:
        f = np.array(factors, dtype=np.float64)
        if f.ndim == 0:
            f = np.full((m, m), float(f))
        if f.shape != (m, m):
            raise ShapeError(f"factor matrix must be {m}x{m}")
    off = ~np.eye(m, dtype=bool)
    if np.any((f[off] < 0) | (f[off] > 1)):
        raise DomainError("transfer factors must lie in [0, 1]")
    f = np.where(off, f, 0.0)
    return n, 1.0 + f.sum(axis=1)


def minimax_bound_latent(m: int, B: int, d_x: int, n_list, lambda_matrix=None,
                         binary: bool = False) -> float:
    """Lower bound on the error of the latent-model heads.

    Continuous outcome and proxies by default; ``binary=True`` gives the
    Bernoulli-outcome/proxy variant.
    """
    if B < 1 or d_x < 1:
        raise ParameterError("B and d_x must be >= 1")
    n, t = _transfer_sums(m, n_list, lambda_matrix)
    log_term = math.log(2 * math.sqrt(m))
    if binary:
        return 3 * m * B * log_term / (128 * float(np.sum(n * B * t)))
    return math.sqrt(m * (d_x + 3)) * log_term / (64 * math.sqrt(B) * float(np.sum(n * t**2)))


def minimax_bound_propensity(m: int, n_list, gamma_matrix=None) -> float:
    n, t = _transfer_sums(m, n_list, gamma_matrix)
    return m * math.log(2 * math.sqrt(m)) / (256 * float(np.sum(n * t)))


def minimax_bound_outcome(m: int, B: int, sigma: float, n_list, eta_matrix=None,
                          binary: bool = False) -> float:
    """Lower bound on the error of the auxiliary outcome heads.

    ``binary=True`` gives the Bernoulli-outcome variant (``sigma`` and ``B`` unused).
    """
    if B < 1 or not sigma > 0:
        raise ParameterError("B must be >= 1 and sigma positive")
    n, t = _transfer_sums(m, n_list, eta_matrix)
    log_term = math.log(2 * math.sqrt(m))
    if binary:
        return m * log_term / (32 * math.sqrt(2) * float(np.sum(n * t)))
    return sigma / 2**4.5 * math.sqrt(m * log_term / (B * float(np.sum(n * t**2))))
