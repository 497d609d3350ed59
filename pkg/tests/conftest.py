from __future__ import annotations

import numpy as np
import pytest

from causalrff import kernels
from causalrff.data import SourceDataset
from causalrff.model import Hyperparams, init_model


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel backend."""
    prev = kernels.backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def random_dataset(rng, n, d_x, binary_x=False, ids=None):
    x = (rng.random((n, d_x)) < 0.5).astype(float) if binary_x else rng.standard_normal((n, d_x))
    w = (rng.random(n) < 0.5).astype(float)
    y = rng.standard_normal(n) + w
    return SourceDataset(w, y, x, ids)


def random_model(m, d_x, d_z=2, B=8, M=2, seed=0, scale=0.3, x_mode=(), y_mode="continuous",
                 kernel="gaussian", nu=None, zeta=1e-2, factor_spread=1.0, **hyper):
    """Small model with non-trivial heads and factor logits."""
    h = Hyperparams(d_z=d_z, M=M, x_mode=x_mode, y_mode=y_mode, zeta=zeta, zeta_w=zeta, zeta_y=zeta,
                    **hyper)
    model = init_model(m, d_x, h, num_features=B, kernel=kernel, nu=nu, seed=seed, init_scale=scale)
    rng = np.random.default_rng(seed + 1000)
    for name in ("lambda", "gamma", "eta"):
        model.factors.raw(name)[...] = factor_spread * rng.standard_normal((m, m))
    return model


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
