"""Per-source objectives, their analytic gradients, and the update rule.

The global objective is a plain sum of per-source objectives. Source ``s``
contributes the negative Monte-Carlo ELBO of its own records (heads applied
with transferred weights), the auxiliary propensity and outcome
log-likelihoods, and ``1/m`` of every ridge regulariser, so summing over
sources reproduces the pooled objective exactly.
"""
from __future__ import annotations

import csv
import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from . import kernels
from .data import SourceDataset
from .errors import NumericalError, ParameterError, ShapeError
from .model import (ALL_HEADS, FACTOR_NAMES, HEAD_FACTOR, LATENT_HEADS, OUTCOME_HEADS,
                    GlobalModel, SourceParams)
from .rff import feature_map

LOG_2PI = math.log(2 * math.pi)


def kl_to_prior(q_mean, sigma_q: float, sigma_z: float) -> float:
    """KL( N(q_mean, sigma_q^2 I) || N(0, sigma_z^2 I) )."""
    if not (sigma_q > 0 and sigma_z > 0):
        raise ParameterError("sigma_q and sigma_z must be positive")
    mu = np.asarray(q_mean, dtype=np.float64)
    return float(np.sum(math.log(sigma_z / sigma_q) + (sigma_q**2 + mu**2) / (2 * sigma_z**2) - 0.5))


def noise_draws(seed: int, source: int, round_: int, M: int, n: int, d_z: int) -> NDArray[np.float64]:
    """Reparameterisation noise for one (source, round), shape ``(M, n, d_z)``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(source), int(round_)]))
    return rng.standard_normal((M, n, d_z))


@dataclass
class LossBreakdown:
    """Objective values for one source at one model snapshot."""

    source: int
    J: float
    J_w: float
    J_y: float
    recon_y: float = 0.0
    recon_w: float = 0.0
    recon_x: float = 0.0
    kl: float = 0.0
    reg: float = 0.0

    @property
    def total(self) -> float:
        return self.J + self.J_w + self.J_y


@dataclass
class GradientRecord:
    """Gradient with respect to every source's heads and the factor logits."""

    params: list[SourceParams]
    lambda_raw: NDArray[np.float64]
    gamma_raw: NDArray[np.float64]
    eta_raw: NDArray[np.float64]
    n: int = 0

    @classmethod
    def zeros_like(cls, model: GlobalModel) -> GradientRecord:
        m = model.m
        params = [SourceParams(*(np.zeros_like(a) for a in p.arrays())) for p in model.params]
        return cls(params, np.zeros((m, m)), np.zeros((m, m)), np.zeros((m, m)), 0)

    def raw(self, name: str) -> NDArray[np.float64]:
        return getattr(self, f"{name}_raw")

    def named_arrays(self):
        """Yield ``(name, array)`` pairs in a fixed order."""
        for s, p in enumerate(self.params):
            for h in ALL_HEADS:
                yield f"source{s}.{h}", getattr(p, h)
        for f in FACTOR_NAMES:
            yield f"{f}_raw", self.raw(f)

    def check_finite(self) -> None:
        for name, a in self.named_arrays():
            if not np.all(np.isfinite(a)):
                raise NumericalError(f"non-finite gradient in {name}")

    def __iadd__(self, other: GradientRecord):
        for (_, a), (_, b) in zip(self.named_arrays(), other.named_arrays()):
            if a.shape != b.shape:
                raise ShapeError(f"gradient shape mismatch {a.shape} vs {b.shape}")
            a += b
        self.n += other.n
        return self

    def flat(self) -> NDArray[np.float64]:
        return np.concatenate([a.ravel() for _, a in self.named_arrays()])


def _check(model: GlobalModel, source: int, ds: SourceDataset, eps=None):
    if eps is not None and not model.hyper.sigma_q > 0:
        raise ParameterError("training needs sigma_q > 0 (the KL term is undefined otherwise)")
    if not 0 <= source < model.m:
        raise ParameterError(f"source {source} out of range for m={model.m}")
    if len(ds) and ds.d_x != model.d_x:
        raise ShapeError(f"dataset has {ds.d_x} covariates, model expects {model.d_x}")
    if eps is not None and eps.shape != (model.hyper.M, len(ds), model.hyper.d_z):
        raise ShapeError(f"noise draws have shape {eps.shape}, expected "
                         f"{(model.hyper.M, len(ds), model.hyper.d_z)}")


def _x(ds: SourceDataset, d_x: int):
    return ds.x if len(ds) else np.zeros((0, d_x))


_FEATURE_CACHE: OrderedDict = OrderedDict()
_FEATURE_CACHE_SIZE = 256


def _data_features(basis, u):
    """Feature matrix of fixed data under a frozen basis, memoised by content."""
    u = np.ascontiguousarray(u, dtype=np.float64)
    h = hashlib.blake2b(digest_size=16)
    h.update(basis.to_bytes())
    h.update(str(u.shape).encode())
    h.update(u.tobytes())
    key = h.digest()
    hit = _FEATURE_CACHE.get(key)
    if hit is not None:
        _FEATURE_CACHE.move_to_end(key)
        return hit
    phi = feature_map(basis, u)
    phi.setflags(write=False)
    _FEATURE_CACHE[key] = phi
    if len(_FEATURE_CACHE) > _FEATURE_CACHE_SIZE:
        _FEATURE_CACHE.popitem(last=False)
    return phi


def _sqnorm(a) -> float:
    a = a.ravel()
    return float(a @ a)


def _latent(model: GlobalModel, source: int, ds: SourceDataset, eps, want_grad: bool):
    h = model.hyper
    x = _x(ds, model.d_x)
    phi_q = _data_features(model.basis_xy, np.column_stack([x, ds.y]))
    eff = {c: np.ascontiguousarray(model.effective(source, c)) for c in LATENT_HEADS}
    terms, grads = kernels.latent_loss_grad(
        phi_q, ds.w, ds.y, np.ascontiguousarray(x), h.x_binary_mask(model.d_x), h.y_binary,
        np.ascontiguousarray(eps, dtype=np.float64), eff["theta_q0"], eff["theta_q1"],
        eff["theta_y0"], eff["theta_y1"], eff["theta_w"], eff["theta_x"],
        model.basis_z.frequencies, h.sigma_q, h.sigma_y, h.sigma_x, h.sigma_z, want_grad)
    g_q0, g_q1, g_y0, g_y1, g_w, g_x = grads
    return terms, {"theta_y0": g_y0, "theta_y1": g_y1, "theta_w": g_w, "theta_x": g_x,
                   "theta_q0": g_q0, "theta_q1": g_q1}


def _aux_propensity(model: GlobalModel, source: int, ds: SourceDataset):
    phi = _data_features(model.basis_x, _x(ds, model.d_x))
    a = phi @ model.effective(source, "psi")
    nll = float(np.sum(np.logaddexp(0.0, a) - ds.w * a))
    return nll, {"psi": phi.T @ (expit(a) - ds.w)}


def _aux_outcome(model: GlobalModel, source: int, ds: SourceDataset):
    h = model.hyper
    phi = _data_features(model.basis_x, _x(ds, model.d_x))
    mu = (1 - ds.w) * (phi @ model.effective(source, "beta0")) + ds.w * (phi @ model.effective(source, "beta1"))
    if h.y_binary:
        nll = float(np.sum(np.logaddexp(0.0, mu) - ds.y * mu))
        d = expit(mu) - ds.y
    else:
        r = mu - ds.y
        nll = float(np.sum(0.5 * (LOG_2PI + 2 * math.log(h.sigma_y)) + 0.5 * r * r / h.sigma_y**2))
        d = r / h.sigma_y**2
    return nll, {"beta0": phi.T @ ((1 - ds.w) * d), "beta1": phi.T @ (ds.w * d)}


def _ridge(model: GlobalModel, heads, zeta: float) -> float:
    return zeta / model.m * sum(_sqnorm(getattr(p, c)) for p in model.params for c in heads)


def local_elbo_loss(model: GlobalModel, source: int, ds: SourceDataset, eps) -> tuple[float, dict]:
    """Negative Monte-Carlo ELBO of ``source`` plus its share of the latent-head ridge."""
    _check(model, source, ds, eps)
    terms, _ = _latent(model, source, ds, eps, want_grad=False)
    reg = _ridge(model, LATENT_HEADS, model.hyper.zeta)
    parts = {"recon_y": terms[0], "recon_w": terms[1], "recon_x": terms[2], "kl": terms[3], "reg": reg}
    return float(terms.sum() + reg), parts


def local_aux_propensity_loss(model: GlobalModel, source: int, ds: SourceDataset) -> float:
    """Cross-entropy of the transferred ``psi`` head plus its ridge share."""
    _check(model, source, ds)
    return _aux_propensity(model, source, ds)[0] + _ridge(model, ("psi",), model.hyper.zeta_w)


def local_aux_outcome_loss(model: GlobalModel, source: int, ds: SourceDataset) -> float:
    """Negative log-likelihood of the gated ``beta`` heads plus their ridge share."""
    _check(model, source, ds)
    return _aux_outcome(model, source, ds)[0] + _ridge(model, OUTCOME_HEADS, model.hyper.zeta_y)


def local_objective(model: GlobalModel, source: int, ds: SourceDataset, eps) -> LossBreakdown:
    value, parts = local_elbo_loss(model, source, ds, eps)
    return LossBreakdown(source, value, local_aux_propensity_loss(model, source, ds),
                         local_aux_outcome_loss(model, source, ds), **parts)


def local_gradient(model: GlobalModel, source: int, ds: SourceDataset, eps,
                   with_losses: bool = False):
    """Gradient of ``J + J_w + J_y`` for ``source``.

    Covers the heads of every source (through the transferred weights and the
    ridge share) and row ``source`` of each factor-logit matrix. Returns the
    :class:`GradientRecord`, or ``(record, LossBreakdown)`` with ``with_losses``.
    """
    _check(model, source, ds, eps)
    h = model.hyper
    terms, g_eff = _latent(model, source, ds, eps, want_grad=True)
    nll_w, g_psi = _aux_propensity(model, source, ds)
    nll_y, g_beta = _aux_outcome(model, source, ds)
    g_eff.update(g_psi)
    g_eff.update(g_beta)

    grad = GradientRecord.zeros_like(model)
    grad.n = len(ds)
    fac = {f: model.factors.values(f) for f in FACTOR_NAMES}
    for c, g in g_eff.items():
        f = fac[HEAD_FACTOR[c]]
        getattr(grad.params[source], c)[...] += g
        for v in range(model.m):
            if v == source:
                continue
            getattr(grad.params[v], c)[...] += f[source, v] * g
            if model.factors.trainable:
                th = getattr(model.params[v], c)
                grad.raw(HEAD_FACTOR[c])[source, v] += float(g.ravel() @ th.ravel()) * f[source, v] * (1 - f[source, v])

    for heads, zeta in ((LATENT_HEADS, h.zeta), (("psi",), h.zeta_w), (OUTCOME_HEADS, h.zeta_y)):
        for v, p in enumerate(model.params):
            for c in heads:
                getattr(grad.params[v], c)[...] += 2.0 * zeta / model.m * getattr(p, c)

    grad.check_finite()
    if not with_losses:
        return grad
    reg = _ridge(model, LATENT_HEADS, h.zeta)
    losses = LossBreakdown(
        source,
        float(terms.sum() + reg),
        nll_w + _ridge(model, ("psi",), h.zeta_w),
        nll_y + _ridge(model, OUTCOME_HEADS, h.zeta_y),
        recon_y=float(terms[0]), recon_w=float(terms[1]), recon_x=float(terms[2]),
        kl=float(terms[3]), reg=reg,
    )
    return grad, losses


# ---------------------------------------------------------------------------
# pooled reference objective


def pooled_objective(model: GlobalModel, datasets: list[SourceDataset], noises: list) -> float:
    """``J + J_w + J_y`` evaluated once over all records with a global regulariser.

    Written independently of the per-source path: records from every source are
    concatenated and each record picks up the transferred weights of the source
    it came from.
    """
    h = model.hyper
    m = model.m
    src = np.concatenate([np.full(len(d), s) for s, d in enumerate(datasets)]).astype(int)
    w = np.concatenate([d.w for d in datasets])
    y = np.concatenate([d.y for d in datasets])
    x = np.concatenate([_x(d, model.d_x) for d in datasets])
    eps = np.concatenate([np.asarray(e) for e in noises], axis=1)  # (M, N, d_z)

    def stack(c):
        return np.stack([model.effective(s, c) for s in range(m)])[src]

    phi_q = feature_map(model.basis_xy, np.column_stack([x, y]))
    mean = (np.einsum("nk,nkd->nd", phi_q, stack("theta_q0")) * (1 - w)[:, None]
            + np.einsum("nk,nkd->nd", phi_q, stack("theta_q1")) * w[:, None])
    kl = sum(kl_to_prior(mu, h.sigma_q, h.sigma_z) for mu in mean)

    Y0, Y1, Wh, Xh = stack("theta_y0"), stack("theta_y1"), stack("theta_w"), stack("theta_x")
    xb = h.x_binary_mask(model.d_x)
    recon = 0.0
    for l in range(h.M):
        z = mean + h.sigma_q * eps[l]
        phi = feature_map(model.basis_z, z)
        mu = (1 - w) * np.einsum("nk,nk->n", phi, Y0) + w * np.einsum("nk,nk->n", phi, Y1)
        if h.y_binary:
            ly = np.logaddexp(0, mu) - y * mu
        else:
            ly = 0.5 * np.log(2 * np.pi * h.sigma_y**2) + (y - mu) ** 2 / (2 * h.sigma_y**2)
        aw = np.einsum("nk,nk->n", phi, Wh)
        lw = np.logaddexp(0, aw) - w * aw
        ax = np.einsum("nk,nkj->nj", phi, Xh)
        lx = np.where(xb, np.logaddexp(0, ax) - x * ax,
                      0.5 * np.log(2 * np.pi * h.sigma_x**2) + (x - ax) ** 2 / (2 * h.sigma_x**2))
        recon += (ly.sum() + lw.sum() + lx.sum()) / h.M

    phx = feature_map(model.basis_x, x)
    a = np.einsum("nk,nk->n", phx, stack("psi"))
    j_w = np.sum(np.logaddexp(0, a) - w * a)
    mu = (1 - w) * np.einsum("nk,nk->n", phx, stack("beta0")) + w * np.einsum("nk,nk->n", phx, stack("beta1"))
    if h.y_binary:
        j_y = np.sum(np.logaddexp(0, mu) - y * mu)
    else:
        j_y = np.sum(0.5 * np.log(2 * np.pi * h.sigma_y**2) + (y - mu) ** 2 / (2 * h.sigma_y**2))

    reg = 0.0
    for p in model.params:
        reg += h.zeta * sum(np.sum(getattr(p, c) ** 2) for c in LATENT_HEADS)
        reg += h.zeta_w * np.sum(p.psi**2)
        reg += h.zeta_y * (np.sum(p.beta0**2) + np.sum(p.beta1**2))
    return float(recon + kl + j_w + j_y + reg)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    momentum: float = 0.0
    velocity: GradientRecord | None = None
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 0.99:
            raise ParameterError("momentum must lie in [0, 0.99]")


def apply_update(model: GlobalModel, grad: GradientRecord, state: OptimizerState,
                 learning_rate: float) -> GlobalModel:
    """One (momentum) gradient-descent step; returns a new model.

    Factor logits are stepped in unconstrained space and left untouched when
    the factors are frozen.
    """
    new = model.copy()
    if state.momentum > 0:
        if state.velocity is None:
            state.velocity = GradientRecord.zeros_like(model)
        for (_, v), (_, g) in zip(state.velocity.named_arrays(), grad.named_arrays()):
            v *= state.momentum
            v += g
        step = state.velocity
    else:
        step = grad
    for p, g in zip(new.params, step.params):
        for c in ALL_HEADS:
            if getattr(g, c).shape != getattr(p, c).shape:
                raise ShapeError(f"gradient for {c} has wrong shape")
            getattr(p, c)[...] -= learning_rate * getattr(g, c)
    if new.factors.trainable:
        for f in FACTOR_NAMES:
            upd = learning_rate * step.raw(f)
            np.fill_diagonal(upd, 0.0)
            new.factors.raw(f)[...] -= upd
    state.step += 1
    return new


def train_centralized(model: GlobalModel, datasets: list[SourceDataset], rounds: int,
                      learning_rate: float = 1e-2, momentum: float = 0.0, seed: int = 0,
                      callback=None):
    """Gradient descent on the pooled objective without any federation layer.

    Uses the same per-(source, round) noise streams as the federated run.
    Returns ``(model, history)`` where history holds one list of
    :class:`LossBreakdown` per round.
    """
    state = OptimizerState(momentum)
    history = []
    for r in range(rounds):
        total = GradientRecord.zeros_like(model)
        losses = []
        for s, ds in enumerate(datasets):
            eps = noise_draws(seed, s, r, model.hyper.M, len(ds), model.hyper.d_z)
            g, lb = local_gradient(model, s, ds, eps, with_losses=True)
            total += g
            losses.append(lb)
        history.append(losses)
        model = apply_update(model, total, state, learning_rate)
        if callback is not None:
            callback(r, model)
    return model, history


def write_loss_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["round", "source_id", "J", "J_w", "J_y", "total"])
        for r, losses in enumerate(history):
            for lb in losses:
                out.writerow([r, lb.source, repr(lb.J), repr(lb.J_w), repr(lb.J_y), repr(lb.total)])
