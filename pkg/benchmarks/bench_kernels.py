"""Time the numba and numpy kernel paths side by side.

Usage::

    python benchmarks/bench_kernels.py [--repeats 200] [--json out.json]

Each case runs once to trigger compilation, then reports the best of
``--repeats`` timings (milliseconds) for both backends and checks that the
two outputs agree.
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from causalrff import kernels, training
from causalrff.data import make_benchmark
from causalrff.model import Hyperparams, init_model


def _latent_args(n, dx, dz, B, M, rng):
    phi_q = rng.standard_normal((n, 2 * B)) / np.sqrt(B)
    w = (rng.random(n) < 0.5).astype(float)
    y = rng.standard_normal(n)
    x = (rng.random((n, dx)) < 0.5).astype(float)
    x_bin = np.ones(dx, dtype=bool)
    eps = rng.standard_normal((M, n, dz))
    q0, q1 = (0.1 * rng.standard_normal((2 * B, dz)) for _ in range(2))
    hy0, hy1, hw = (0.1 * rng.standard_normal(2 * B) for _ in range(3))
    hx = 0.1 * rng.standard_normal((2 * B, dx))
    omega = rng.standard_normal((B, dz))
    return (phi_q, w, y, x, x_bin, False, eps, q0, q1, hy0, hy1, hw, hx, omega, 1.0, 1.0, 1.0, 1.0, True)


def _log_joint_args(k, dx, dz, B, rng):
    z = rng.standard_normal((k, dz))
    w = (rng.random(k) < 0.5).astype(float)
    y = rng.standard_normal(k)
    x = (rng.random(dx) < 0.5).astype(float)
    x_bin = np.ones(dx, dtype=bool)
    hy0, hy1, hw = (0.1 * rng.standard_normal(2 * B) for _ in range(3))
    hx = 0.1 * rng.standard_normal((2 * B, dx))
    omega = rng.standard_normal((B, dz))
    return (z, w, y, x, x_bin, False, hy0, hy1, hw, hx, omega, 1.0, 1.0, 1.0)


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(a) for part in out for a in (part if isinstance(part, tuple) else (part,))])
    return np.ravel(out)


def _time(fn, repeats):
    fn()
    return 1e3 * min(timeit.repeat(fn, number=1, repeat=repeats))


def run(repeats: int = 200):
    rng = np.random.default_rng(0)
    cases = []
    for n, B in ((50, 100), (450, 100), (50, 400)):
        u = rng.standard_normal((n, 31))
        om = rng.standard_normal((B, 31))
        cases.append((f"rff_features n={n} B={B}", kernels.rff_features_numpy,
                      kernels.rff_features_numba, (u, om)))
        cases.append((f"latent_loss_grad n={n} B={B}", kernels.latent_loss_grad_numpy,
                      kernels.latent_loss_grad_numba, _latent_args(n, 30, 5, B, 2, rng)))
    for k in (1, 50, 200):
        cases.append((f"log_joint k={k} B=100", kernels.log_joint_numpy, kernels.log_joint_numba,
                      _log_joint_args(k, 30, 5, 100, rng)))

    rows = []
    for name, f_np, f_nb, args in cases:
        a, b = _flat(f_np(*args)), _flat(f_nb(*args))
        err = float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))))
        t_np = _time(lambda: f_np(*args), repeats)
        t_nb = _time(lambda: f_nb(*args), repeats)
        rows.append({"case": name, "numpy_ms": t_np, "numba_ms": t_nb, "speedup": t_np / t_nb,
                     "max_rel_diff": err})

    # one source's full gradient step, as called by the training loop
    sources, _ = make_benchmark("diff", 5, 1000, 0, train=50, test=10, val=1)
    ds = sources[0].split("train")
    model = init_model(5, 30, Hyperparams(x_mode=("binary",)), lengthscale=(1.0, 5.0, 5.0))
    eps = training.noise_draws(0, 0, 0, 2, len(ds), model.hyper.d_z)
    timings = {}
    prev = kernels.backend()
    try:
        for name in ("numpy", "numba"):
            kernels.set_backend(name)
            timings[name] = _time(lambda: training.local_gradient(model, 0, ds, eps, with_losses=True),
                                  max(10, repeats // 4))
    finally:
        kernels.set_backend(prev)
    rows.append({"case": "local_gradient m=5 n=50 B=100", "numpy_ms": timings["numpy"],
                 "numba_ms": timings["numba"], "speedup": timings["numpy"] / timings["numba"],
                 "max_rel_diff": float("nan")})
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args()
    rows = run(args.repeats)
    print(f"{'case':<36}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max rel diff':>14}")
    for r in rows:
        print(f"{r['case']:<36}{r['numpy_ms']:>10.3f}{r['numba_ms']:>10.3f}{r['speedup']:>9.2f}"
              f"{r['max_rel_diff']:>14.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
