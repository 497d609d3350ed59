from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import random_model
from scipy import stats
from scipy.special import expit, log_expit

from causalrff.effects import (cate, cate_from_latents, estimate_effects, global_ate, independence_mh,
                               local_ate, mh_independent_sampler, row_seed, sample_z_given_x)
from causalrff.errors import ParameterError, StateError
from causalrff.rff import FourierBasis


class TestIndependenceMH:
    def test_proposal_equal_to_target_always_accepts(self):
        mean = np.array([[0.5, -1.0], [2.0, 0.0]])

        def log_target(z):
            return -np.sum((z - mean) ** 2, axis=1) / (2 * 0.7**2) + 7.0

        res = independence_mh(log_target, mean, 0.7, 50, 10, np.random.default_rng(0))
        assert res.acceptance_rate == 1.0
        assert res.samples.shape == (40, 2, 2)

    def test_one_dimensional_toy(self):
        # target N(1, 1), proposal N(0, 2^2): final states of many short chains
        k = 20000
        res = independence_mh(lambda z: -0.5 * (z[:, 0] - 1.0) ** 2, np.zeros((k, 1)), 2.0, 40, 39,
                              np.random.default_rng(1))
        z = res.samples[-1, :, 0]
        assert abs(z.mean() - 1.0) < 4 / math.sqrt(k)
        assert abs(z.var() - 1.0) < 0.05
        # stationarity: equiprobable bins under the target
        edges = stats.norm.ppf(np.linspace(0, 1, 21), loc=1.0)
        counts = np.histogram(z, bins=edges)[0]
        assert stats.chisquare(counts).pvalue > 1e-3
        assert 0.3 < res.acceptance_rate < 0.9

    def test_invalid(self):
        f = lambda z: np.zeros(len(z))  # noqa: E731
        with pytest.raises(ParameterError):
            independence_mh(f, np.zeros((1, 1)), 1.0, 10, 10, np.random.default_rng(0))
        with pytest.raises(ParameterError):
            independence_mh(f, np.zeros((1, 1)), 0.0, 10, 1, np.random.default_rng(0))

    def test_nan_target(self):
        from causalrff.errors import NumericalError
        with pytest.raises(NumericalError):
            independence_mh(lambda z: np.full(len(z), np.nan), np.zeros((1, 1)), 1.0, 5, 1,
                            np.random.default_rng(0))


class TestSamplers:
    def test_record_chain_shape(self):
        model = random_model(2, 3, d_z=2)
        res = mh_independent_sampler(model, 0, [0.1, 0.2, 0.3], 0.5, 1, chain_len=30, burn_in=5)
        assert res.samples.shape == (25, 2) and 0 <= res.acceptance_rate <= 1
        with pytest.raises(ParameterError):
            mh_independent_sampler(model, 0, [0.1, 0.2, 0.3], 0.5, 2)

    def test_zero_encoder_scale_variational(self):
        model = random_model(2, 3, sigma_q=0.0)
        z = sample_z_given_x(model, 0, np.zeros(3), N=5, sampler="variational")
        assert z.shape == (5, 2)
        with pytest.raises(ParameterError):
            sample_z_given_x(model, 0, np.zeros(3), N=5, sampler="mh")

    def test_single_step_chain_equals_variational(self):
        model = random_model(2, 3)
        x = np.array([0.3, -0.2, 1.0])
        a = sample_z_given_x(model, 1, x, N=20, seed=4, sampler="variational")
        b = sample_z_given_x(model, 1, x, N=20, seed=4, sampler="mh", chain_len=1, burn_in=0)
        assert np.array_equal(a, b)

    def test_errors(self):
        model = random_model(1, 2)
        with pytest.raises(ParameterError):
            sample_z_given_x(model, 0, np.zeros(2), N=0)
        with pytest.raises(ParameterError):
            sample_z_given_x(model, 0, np.zeros(2), sampler="gibbs")
        model.params[0].theta_w[0] = np.nan
        with pytest.raises(StateError):
            cate(model, 0, np.zeros(2), N=3)


class TestCate:
    @pytest.mark.parametrize("sampler", ["mh", "variational"])
    def test_deterministic(self, sampler, backend):
        model = random_model(2, 3)
        x = np.array([0.3, -0.2, 1.0])
        a = cate(model, 0, x, N=30, sampler=sampler, seed=3, chain_len=20, burn_in=5)
        b = cate(model, 0, x, N=30, sampler=sampler, seed=3, chain_len=20, burn_in=5)
        assert a == b

    def test_identical_arms_give_zero(self):
        model = random_model(2, 3)
        for p in model.params:
            p.theta_y1[...] = p.theta_y0
        model.factors.lambda_raw[...] = 0.0
        assert cate(model, 0, np.ones(3), N=40, chain_len=20, burn_in=5) == 0.0

    def test_constant_features(self):
        model = random_model(2, 2, B=1, d_z=2)
        zero = FourierBasis("gaussian", 1.0, np.zeros((1, 2)))
        model = replace(model, basis_z=zero)
        t1, t0 = model.effective(0, "theta_y1"), model.effective(0, "theta_y0")
        expected = float(t1[0] - t0[0])
        got = cate(model, 0, np.zeros(2), N=25, chain_len=10, burn_in=2)
        assert got == pytest.approx(expected, abs=1e-14)

    def test_binary_outcome_constant_features(self):
        model = random_model(1, 2, B=1, y_mode="binary")
        model = replace(model, basis_z=FourierBasis("gaussian", 1.0, np.zeros((1, 2))))
        p = model.params[0]
        expected = expit(p.theta_y1[0]) - expit(p.theta_y0[0])
        assert cate(model, 0, np.zeros(2), N=5, chain_len=5, burn_in=1) == pytest.approx(expected, abs=1e-14)

    def test_swapping_arms_negates_variational(self):
        model = random_model(2, 3, seed=5)
        x = np.array([0.5, 0.1, -0.4])
        a = cate(model, 1, x, N=50, sampler="variational", seed=1)
        for p in model.params:
            p.theta_y0, p.theta_y1 = p.theta_y1.copy(), p.theta_y0.copy()
        b = cate(model, 1, x, N=50, sampler="variational", seed=1)
        assert b == pytest.approx(-a, abs=1e-12)

    def test_same_latents_for_both_arms(self):
        model = random_model(1, 2)
        z = np.random.default_rng(0).normal(size=(7, 2))
        from causalrff.rff import feature_map
        phi = feature_map(model.basis_z, z)
        p = model.params[0]
        assert cate_from_latents(model, 0, z) == pytest.approx(float(np.mean(phi @ (p.theta_y1 - p.theta_y0))),
                                                              rel=1e-13)


def _posterior_grid_oracle(model, source, x, sampler, K, seed):
    """Independent numpy evaluation of the CATE for d_z = 1 by quadrature over z."""
    h = model.hyper
    rng = np.random.default_rng(seed)
    lam = {f: expit(model.factors.raw(f)) for f in ("lambda", "gamma", "eta")}
    fac = {"theta_y0": "lambda", "theta_y1": "lambda", "theta_w": "lambda", "theta_x": "lambda",
           "theta_q0": "lambda", "theta_q1": "lambda", "psi": "gamma", "beta0": "eta", "beta1": "eta"}

    def eff(c):
        out = getattr(model.params[source], c).copy()
        for v, p in enumerate(model.params):
            if v != source:
                out = out + lam[fac[c]][source, v] * getattr(p, c)
        return out

    def feats(omega, u):
        a = u @ omega.T
        return np.concatenate([np.cos(a), np.sin(a)], axis=-1) / math.sqrt(omega.shape[0])

    phx = feats(model.basis_x.frequencies, x[None, :])[0]
    pw = expit(phx @ eff("psi"))
    w = (rng.random(K) < pw).astype(float)
    y = np.where(w == 1, phx @ eff("beta1"), phx @ eff("beta0")) + h.sigma_y * rng.standard_normal(K)
    grid = np.linspace(-7, 7, 1401)
    phz = feats(model.basis_z.frequencies, grid[:, None])
    f0, f1, fw = phz @ eff("theta_y0"), phz @ eff("theta_y1"), phz @ eff("theta_w")
    tau = f1 - f0
    if sampler == "variational":
        u = np.column_stack([np.tile(x, (K, 1)), y])
        phq = feats(model.basis_xy.frequencies, u)
        mq = np.where(w == 1, phq @ eff("theta_q1")[:, 0], phq @ eff("theta_q0")[:, 0])
        logp = -0.5 * ((grid[None, :] - mq[:, None]) / h.sigma_q) ** 2
    else:
        mu = np.where(w[:, None] == 1, f1[None, :], f0[None, :])
        logp = -0.5 * ((y[:, None] - mu) / h.sigma_y) ** 2
        logp += np.where(w[:, None] == 1, log_expit(fw)[None, :], log_expit(-fw)[None, :])
        ax = phz @ eff("theta_x")
        logp += np.sum(-0.5 * ((x[None, :] - ax) / h.sigma_x) ** 2, axis=1)[None, :]
        logp += -0.5 * (grid / h.sigma_z) ** 2
    wts = np.exp(logp - logp.max(axis=1, keepdims=True))
    wts /= wts.sum(axis=1, keepdims=True)
    means = wts @ tau
    second = wts @ tau**2
    total_var = np.mean(second) - np.mean(means) ** 2
    return float(np.mean(means)), math.sqrt(total_var)


@pytest.mark.parametrize("sampler", ["variational", "mh"])
def test_cate_matches_quadrature_oracle(sampler):
    model = random_model(2, 2, d_z=1, B=6, seed=11, scale=0.5, sigma_q=1.2)
    x = np.array([0.4, -0.9])
    N = 4000
    got = cate(model, 0, x, N=N, sampler=sampler, seed=2, chain_len=150, burn_in=20)
    K = 20_000
    ref, sd = _posterior_grid_oracle(model, 0, x, sampler, K, seed=99)
    assert abs(got - ref) < 5 * sd * math.sqrt(1 / N + 1 / K)


class TestEstimateEffects:
    def _setup(self):
        model = random_model(2, 3, seed=2)
        X = np.random.default_rng(0).normal(size=(6, 3))
        return model, X

    def test_permutation_invariant(self):
        model, X = self._setup()
        a = estimate_effects(model, 0, X, N=20, chain_len=15, burn_in=3, seed=1)
        perm = np.array([3, 0, 5, 1, 4, 2])
        b = estimate_effects(model, 0, X[perm], N=20, chain_len=15, burn_in=3, seed=1)
        assert np.array_equal(a.cate[perm], b.cate)
        assert a.local_ate == pytest.approx(b.local_ate, abs=1e-15)

    def test_workers_invariant(self):
        model, X = self._setup()
        a = estimate_effects(model, 1, X, N=20, chain_len=15, burn_in=3, workers=1)
        b = estimate_effects(model, 1, X, N=20, chain_len=15, burn_in=3, workers=4)
        assert np.array_equal(a.cate, b.cate)

    def test_local_ate_is_mean(self):
        model, X = self._setup()
        est = estimate_effects(model, 0, X, N=10, sampler="variational")
        assert est.local_ate == pytest.approx(float(np.mean(est.cate)))
        assert local_ate(model, 0, X, N=10, sampler="variational") == (est.local_ate, 6)

    def test_empty(self):
        model, _ = self._setup()
        with pytest.raises(ParameterError):
            estimate_effects(model, 0, np.zeros((0, 3)))

    def test_row_seed(self):
        assert row_seed(0, [1.0, 2.0]) == row_seed(0, np.array([1.0, 2.0]))
        assert row_seed(0, [1.0, 2.0]) != row_seed(1, [1.0, 2.0])


class TestGlobalAte:
    def test_weighted(self):
        assert global_ate([(1.0, 10), (3.0, 30)]) == pytest.approx(2.5)

    def test_single(self):
        assert global_ate([(0.7, 3)]) == 0.7

    def test_correctly_rounded(self):
        assert global_ate([(7.0, 10), (8.5, 8), (6.8, 12)]) == 7.32
        assert global_ate([(0.1, 1), (0.2, 1)]) == 0.15000000000000002

    def test_errors(self):
        with pytest.raises(ParameterError):
            global_ate([])
        with pytest.raises(ParameterError):
            global_ate([(1.0, 0)])
        with pytest.raises(ParameterError):
            global_ate([(1.0, 2.5)])
        from causalrff.errors import NumericalError
        with pytest.raises(NumericalError):
            global_ate([(float("nan"), 2)])
