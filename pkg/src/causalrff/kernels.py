"""Hot numeric kernels.

Each kernel has a vectorised numpy implementation and a loop implementation
compiled with numba. The public wrappers dispatch on :data:`USE_NUMBA`, which
defaults to ``True`` when numba is importable and ``CAUSALRFF_NUMBA`` is not
set to ``0``. Both paths agree to rounding error; within one process the
selected path is deterministic bit-for-bit.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from . import _accel
from ._accel import njit

USE_NUMBA = _accel.ENABLED

LOG_2PI = math.log(2.0 * math.pi)


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for the rest of the process."""
    global USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and _accel._nb is None:  # pragma: no cover
        raise RuntimeError("numba is not installed")
    USE_NUMBA = name == "numba"


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# feature map


def rff_features_numpy(u, omega):
    proj = u @ omega.T
    scale = 1.0 / math.sqrt(omega.shape[0])
    return scale * np.concatenate([np.cos(proj), np.sin(proj)], axis=1)


@njit
def rff_features_numba(u, omega):
    n, d = u.shape
    b = omega.shape[0]
    scale = 1.0 / math.sqrt(b)
    out = np.empty((n, 2 * b))
    for i in range(n):
        for k in range(b):
            p = 0.0
            for j in range(d):
                p += omega[k, j] * u[i, j]
            out[i, k] = scale * math.cos(p)
            out[i, b + k] = scale * math.sin(p)
    return out


def rff_features(u, omega):
    """Batch feature map: ``(n, d)`` inputs to ``(n, 2B)`` features."""
    if USE_NUMBA:
        return rff_features_numba(u, omega)
    return rff_features_numpy(u, omega)


# ---------------------------------------------------------------------------
# latent-model negative ELBO with analytic gradient
#
# Arguments shared by both implementations:
#   phi_q (n, 2Bq)   features of [x; y] under the encoder basis
#   w (n,), y (n,), x (n, dx)      observed records (float64)
#   x_bin (dx,) bool, y_bin bool   Bernoulli vs Gaussian likelihoods
#   eps (M, n, dz)                 standard normal reparameterisation noise
#   q0, q1 (2Bq, dz)               effective encoder heads
#   hy0, hy1, hw (2Bz,), hx (2Bz, dx)   effective likelihood heads
#   omega (Bz, dz)                 latent basis frequencies
# Returns terms = [recon_y, recon_w, recon_x, kl] and gradients with respect to
# the six effective heads (zeros when want_grad is False).


def _softplus(a):
    return np.logaddexp(0.0, a)


def latent_loss_grad_numpy(phi_q, w, y, x, x_bin, y_bin, eps, q0, q1, hy0, hy1, hw, hx,
                           omega, sig_q, sig_y, sig_x, sig_z, want_grad=True):
    m_samples, n, dz = eps.shape
    bz = omega.shape[0]
    scale = 1.0 / math.sqrt(bz)
    inv_m = 1.0 / m_samples
    w_ = w[:, None]

    mean = (1.0 - w_) * (phi_q @ q0) + w_ * (phi_q @ q1)
    z = mean[None] + sig_q * eps
    proj = z @ omega.T
    c, s = np.cos(proj), np.sin(proj)
    phi = scale * np.concatenate([c, s], axis=-1)

    a_y0, a_y1, a_w = phi @ hy0, phi @ hy1, phi @ hw
    a_x = phi @ hx
    mu = (1.0 - w) * a_y0 + w * a_y1

    if y_bin:
        nll_y = _softplus(mu) - y * mu
        d_y = expit(mu) - y
    else:
        r = mu - y
        nll_y = 0.5 * (LOG_2PI + 2.0 * math.log(sig_y)) + 0.5 * r * r / sig_y**2
        d_y = r / sig_y**2
    nll_w = _softplus(a_w) - w * a_w
    d_w = expit(a_w) - w
    rx = a_x - x
    nll_x = np.where(x_bin, _softplus(a_x) - x * a_x,
                     0.5 * (LOG_2PI + 2.0 * math.log(sig_x)) + 0.5 * rx * rx / sig_x**2)
    d_x = np.where(x_bin, expit(a_x) - x, rx / sig_x**2)

    kl = np.sum(math.log(sig_z / sig_q) + (sig_q**2 + mean**2) / (2.0 * sig_z**2) - 0.5)
    terms = np.array([nll_y.sum() * inv_m, nll_w.sum() * inv_m, nll_x.sum() * inv_m, kl])

    if not want_grad:
        z2 = np.zeros
        return terms, (z2(q0.shape), z2(q1.shape), z2(hy0.shape), z2(hy1.shape),
                       z2(hw.shape), z2(hx.shape))

    d_y = d_y * inv_m
    d_w = d_w * inv_m
    d_x = d_x * inv_m
    d_y0 = d_y * (1.0 - w)
    d_y1 = d_y * w
    phi2 = phi.reshape(-1, 2 * bz)
    g_hy0 = phi2.T @ d_y0.ravel()
    g_hy1 = phi2.T @ d_y1.ravel()
    g_hw = phi2.T @ d_w.ravel()
    g_hx = phi2.T @ d_x.reshape(-1, d_x.shape[-1])

    g_phi = (d_y0[..., None] * hy0 + d_y1[..., None] * hy1 + d_w[..., None] * hw
             + d_x @ hx.T)
    g_proj = scale * (g_phi[..., bz:] * c - g_phi[..., :bz] * s)
    g_mean = (g_proj @ omega).sum(axis=0) + mean / sig_z**2
    g_q0 = phi_q.T @ ((1.0 - w_) * g_mean)
    g_q1 = phi_q.T @ (w_ * g_mean)
    return terms, (g_q0, g_q1, g_hy0, g_hy1, g_hw, g_hx)


@njit
def _sp(a):
    if a > 0.0:
        return a + math.log1p(math.exp(-a))
    return math.log1p(math.exp(a))


@njit
def _sig(a):
    if a >= 0.0:
        return 1.0 / (1.0 + math.exp(-a))
    e = math.exp(a)
    return e / (1.0 + e)


@njit
def latent_loss_grad_numba(phi_q, w, y, x, x_bin, y_bin, eps, q0, q1, hy0, hy1, hw, hx,
                           omega, sig_q, sig_y, sig_x, sig_z, want_grad=True):
    m_samples, n, dz = eps.shape
    bz = omega.shape[0]
    bq2 = phi_q.shape[1]
    dx = x.shape[1]
    scale = 1.0 / math.sqrt(bz)
    inv_m = 1.0 / m_samples
    cy = 0.5 * (LOG_2PI + 2.0 * math.log(sig_y))
    cx = 0.5 * (LOG_2PI + 2.0 * math.log(sig_x))
    log_ratio = math.log(sig_z / sig_q)

    g_q0 = np.zeros(q0.shape)
    g_q1 = np.zeros(q1.shape)
    g_hy0 = np.zeros(hy0.shape)
    g_hy1 = np.zeros(hy1.shape)
    g_hw = np.zeros(hw.shape)
    g_hx = np.zeros(hx.shape)
    rec_y = 0.0
    rec_w = 0.0
    rec_x = 0.0
    kl = 0.0

    mean = np.empty(dz)
    zv = np.empty(dz)
    cs = np.empty(bz)
    sn = np.empty(bz)
    phi = np.empty(2 * bz)
    ax = np.empty(dx)
    dxv = np.empty(dx)
    g_mean = np.empty(dz)

    for i in range(n):
        wi = w[i]
        for d in range(dz):
            acc0 = 0.0
            acc1 = 0.0
            for k in range(bq2):
                acc0 += phi_q[i, k] * q0[k, d]
                acc1 += phi_q[i, k] * q1[k, d]
            mean[d] = (1.0 - wi) * acc0 + wi * acc1
            kl += log_ratio + (sig_q * sig_q + mean[d] * mean[d]) / (2.0 * sig_z * sig_z) - 0.5
            g_mean[d] = mean[d] / (sig_z * sig_z)

        for l in range(m_samples):
            for d in range(dz):
                zv[d] = mean[d] + sig_q * eps[l, i, d]
            for k in range(bz):
                p = 0.0
                for d in range(dz):
                    p += omega[k, d] * zv[d]
                cs[k] = math.cos(p)
                sn[k] = math.sin(p)
                phi[k] = scale * cs[k]
                phi[bz + k] = scale * sn[k]
            a0 = 0.0
            a1 = 0.0
            aw = 0.0
            for k in range(2 * bz):
                a0 += phi[k] * hy0[k]
                a1 += phi[k] * hy1[k]
                aw += phi[k] * hw[k]
            for j in range(dx):
                ax[j] = 0.0
            for k in range(2 * bz):
                pk = phi[k]
                for j in range(dx):
                    ax[j] += pk * hx[k, j]
            mu = (1.0 - wi) * a0 + wi * a1
            if y_bin:
                rec_y += _sp(mu) - y[i] * mu
                dy = _sig(mu) - y[i]
            else:
                r = mu - y[i]
                rec_y += cy + 0.5 * r * r / (sig_y * sig_y)
                dy = r / (sig_y * sig_y)
            rec_w += _sp(aw) - wi * aw
            dw = _sig(aw) - wi
            for j in range(dx):
                if x_bin[j]:
                    rec_x += _sp(ax[j]) - x[i, j] * ax[j]
                    dxv[j] = (_sig(ax[j]) - x[i, j]) * inv_m
                else:
                    r = ax[j] - x[i, j]
                    rec_x += cx + 0.5 * r * r / (sig_x * sig_x)
                    dxv[j] = r / (sig_x * sig_x) * inv_m
            if not want_grad:
                continue
            dy0 = dy * (1.0 - wi) * inv_m
            dy1 = dy * wi * inv_m
            dw = dw * inv_m
            for k in range(2 * bz):
                g_hy0[k] += dy0 * phi[k]
                g_hy1[k] += dy1 * phi[k]
                g_hw[k] += dw * phi[k]
                for j in range(dx):
                    g_hx[k, j] += phi[k] * dxv[j]
            for k in range(bz):
                gc = dy0 * hy0[k] + dy1 * hy1[k] + dw * hw[k]
                gs = dy0 * hy0[bz + k] + dy1 * hy1[bz + k] + dw * hw[bz + k]
                for j in range(dx):
                    gc += dxv[j] * hx[k, j]
                    gs += dxv[j] * hx[bz + k, j]
                gp = scale * (gs * cs[k] - gc * sn[k])
                for d in range(dz):
                    g_mean[d] += gp * omega[k, d]

        if want_grad:
            for k in range(bq2):
                pk = phi_q[i, k]
                for d in range(dz):
                    g_q0[k, d] += pk * (1.0 - wi) * g_mean[d]
                    g_q1[k, d] += pk * wi * g_mean[d]

    terms = np.array([rec_y * inv_m, rec_w * inv_m, rec_x * inv_m, kl])
    return terms, (g_q0, g_q1, g_hy0, g_hy1, g_hw, g_hx)


def latent_loss_grad(phi_q, w, y, x, x_bin, y_bin, eps, q0, q1, hy0, hy1, hw, hx,
                     omega, sig_q, sig_y, sig_x, sig_z, want_grad=True):
    fn = latent_loss_grad_numba if USE_NUMBA else latent_loss_grad_numpy
    return fn(phi_q, w, y, x, x_bin, bool(y_bin), eps, q0, q1, hy0, hy1, hw, hx,
              omega, float(sig_q), float(sig_y), float(sig_x), float(sig_z), bool(want_grad))


# ---------------------------------------------------------------------------
# unnormalised log posterior of z for a batch of latent points
#
#   log p(y|z,w) + log p(w|z) + log p(x|z) + log N(z; 0, sig_z^2 I)
# with one (w, y) pair per row of z and a shared covariate vector x.


def log_joint_numpy(z, w, y, x, x_bin, y_bin, hy0, hy1, hw, hx, omega, sig_y, sig_x, sig_z):
    k, dz = z.shape
    bz = omega.shape[0]
    proj = z @ omega.T
    phi = np.concatenate([np.cos(proj), np.sin(proj)], axis=1) / math.sqrt(bz)
    mu = (1.0 - w) * (phi @ hy0) + w * (phi @ hy1)
    if y_bin:
        out = y * mu - _softplus(mu)
    else:
        out = -0.5 * (LOG_2PI + 2.0 * math.log(sig_y)) - 0.5 * (y - mu) ** 2 / sig_y**2
    aw = phi @ hw
    out = out + w * aw - _softplus(aw)
    ax = phi @ hx
    lx = np.where(x_bin, x * ax - _softplus(ax),
                  -0.5 * (LOG_2PI + 2.0 * math.log(sig_x)) - 0.5 * (x - ax) ** 2 / sig_x**2)
    out = out + lx.sum(axis=1)
    out = out - 0.5 * dz * (LOG_2PI + 2.0 * math.log(sig_z)) - 0.5 * np.sum(z * z, axis=1) / sig_z**2
    return out


@njit
def log_joint_numba(z, w, y, x, x_bin, y_bin, hy0, hy1, hw, hx, omega, sig_y, sig_x, sig_z):
    k_rows, dz = z.shape
    bz = omega.shape[0]
    dx = x.shape[0]
    scale = 1.0 / math.sqrt(bz)
    cy = -0.5 * (LOG_2PI + 2.0 * math.log(sig_y))
    cx = -0.5 * (LOG_2PI + 2.0 * math.log(sig_x))
    cz = -0.5 * dz * (LOG_2PI + 2.0 * math.log(sig_z))
    out = np.empty(k_rows)
    phi = np.empty(2 * bz)
    ax = np.empty(dx)
    for r in range(k_rows):
        zz = 0.0
        for d in range(dz):
            zz += z[r, d] * z[r, d]
        for b in range(bz):
            p = 0.0
            for d in range(dz):
                p += omega[b, d] * z[r, d]
            phi[b] = scale * math.cos(p)
            phi[bz + b] = scale * math.sin(p)
        a0 = 0.0
        a1 = 0.0
        aw = 0.0
        for b in range(2 * bz):
            a0 += phi[b] * hy0[b]
            a1 += phi[b] * hy1[b]
            aw += phi[b] * hw[b]
        wr = w[r]
        mu = (1.0 - wr) * a0 + wr * a1
        if y_bin:
            acc = y[r] * mu - _sp(mu)
        else:
            acc = cy - 0.5 * (y[r] - mu) ** 2 / (sig_y * sig_y)
        acc += wr * aw - _sp(aw)
        for j in range(dx):
            ax[j] = 0.0
        for b in range(2 * bz):
            pb = phi[b]
            for j in range(dx):
                ax[j] += pb * hx[b, j]
        for j in range(dx):
            a = ax[j]
            if x_bin[j]:
                acc += x[j] * a - _sp(a)
            else:
                acc += cx - 0.5 * (x[j] - a) ** 2 / (sig_x * sig_x)
        out[r] = acc + cz - 0.5 * zz / (sig_z * sig_z)
    return out


def log_joint(z, w, y, x, x_bin, y_bin, hy0, hy1, hw, hx, omega, sig_y, sig_x, sig_z):
    fn = log_joint_numba if USE_NUMBA else log_joint_numpy
    return fn(z, w, y, x, x_bin, bool(y_bin), hy0, hy1, hw, hx, omega,
              float(sig_y), float(sig_x), float(sig_z))
