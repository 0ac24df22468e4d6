import numpy as np
import pytest
import scipy.sparse as sp

from hvfilter.filters import LinearEvolution
from hvfilter.likelihoods import Gaussian, PoissonLog
from hvfilter.models import (
    AdvDiffConfig,
    DenseGaussianSampler,
    ExpCovariance,
    ExpKernel,
    Lorenz05Config,
    StateSpaceModel,
    advection_diffusion_matrix,
    circle_locations,
    exp_covariance,
    grid_locations,
    lorenz05_moments,
    lorenz05_rhs,
    lorenz05_step,
    simulate_field,
    simulate_ssm,
)
from hvfilter.models import _rhs_jacobian

from oracles import lorenz96_rhs


class TestKernel:
    def test_examples(self):
        c = exp_covariance(np.array([[0.0, 0.0], [0.15, 0.0], [0.0, 0.3]]), ExpKernel(2.0, 0.15))
        assert c(0, 0) == pytest.approx(2.0)
        assert c(0, 1) == pytest.approx(2.0 * np.exp(-1))
        unit = exp_covariance(np.array([[0.0], [0.15]]), ExpKernel(1.0, 0.15))
        assert unit(0, 1) == pytest.approx(0.36787944117144233)

    def test_symmetric_positive_definite(self):
        locs = np.random.default_rng(0).uniform(size=(500, 2))
        c = ExpCovariance(locs).to_dense()
        assert np.array_equal(c, c.T)
        np.linalg.cholesky(c)

    def test_dense_matches_entries(self):
        locs = grid_locations(5)
        c = ExpCovariance(locs, ExpKernel(1.5, 0.2))
        i, j = np.meshgrid(np.arange(25), np.arange(25), indexing="ij")
        np.testing.assert_allclose(c.to_dense(), c.entries(i.ravel(), j.ravel()).reshape(25, 25), atol=1e-15)

    def test_permuted(self):
        c = ExpCovariance(grid_locations(4))
        order = np.random.default_rng(1).permutation(16)
        np.testing.assert_allclose(c.permuted(order).to_dense(), c.to_dense()[np.ix_(order, order)])

    def test_invalid(self):
        with pytest.raises(ValueError):
            ExpKernel(0.0, 1.0)
        with pytest.raises(ValueError):
            ExpKernel(1.0, -1.0)

    def test_circle_chords(self):
        locs = circle_locations(8)
        d = np.linalg.norm(locs[0] - locs[4])
        assert d == pytest.approx(1 / np.pi)


class TestAdvectionDiffusion:
    def test_constant_field(self):
        e = advection_diffusion_matrix(AdvDiffConfig(6, 4e-3, 1e-1))
        np.testing.assert_allclose(e @ np.full(36, 3.0), np.full(36, 3.0), atol=1e-12)

    def test_identity(self):
        e = advection_diffusion_matrix(AdvDiffConfig(5, 0.0, 0.0))
        assert (e != sp.eye(25)).nnz == 0

    def test_single_peak(self):
        g, a, b = 5, 0.01, 0.1
        e = advection_diffusion_matrix(AdvDiffConfig(g, a, b))
        x = np.zeros(g * g)
        x[2 * g + 2] = 1.0
        y = (e @ x).reshape(g, g)
        lap, adv = a * g * g, b * g / 2
        assert y[2, 2] == pytest.approx(1 - 4 * lap)
        # the up/right neighbour of a cell pulls with +adv, so the peak feeds the cells below/left of it
        assert y[1, 2] == pytest.approx(lap + adv)
        assert y[3, 2] == pytest.approx(lap - adv)
        assert y[2, 1] == pytest.approx(lap + adv)
        assert y[2, 3] == pytest.approx(lap - adv)
        assert np.count_nonzero(y) == 5

    def test_periodic_wrap(self):
        g = 4
        e = advection_diffusion_matrix(AdvDiffConfig(g, 0.01, 0.0)).toarray()
        assert e[0, (g - 1) * g] != 0 and e[0, g - 1] != 0

    def test_row_support_and_diffusion_rows(self):
        e = advection_diffusion_matrix(AdvDiffConfig(34, 4e-5, 1e-2))
        assert np.diff(e.indptr).max() <= 5
        d = advection_diffusion_matrix(AdvDiffConfig(10, 1e-3, 0.0)) - sp.eye(100)
        np.testing.assert_allclose(np.asarray(d.sum(axis=1)).ravel(), 0, atol=1e-14)

    def test_invalid(self):
        with pytest.raises(ValueError):
            AdvDiffConfig(2)
        with pytest.raises(ValueError):
            AdvDiffConfig(5, -1.0)


class TestLorenz:
    def test_k1_is_lorenz96(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.standard_normal(40) * 3
            assert np.max(np.abs(lorenz05_rhs(x, 1, 8.0) - lorenz96_rhs(x, 8.0))) < 1e-12

    def test_fixed_point(self):
        assert np.max(np.abs(lorenz05_rhs(np.full(20, 8.0), 1, 8.0))) == 0.0

    def test_rhs_matches_double_sum(self):
        rng = np.random.default_rng(1)
        n, K, F = 41, 4, 10.0
        x = rng.standard_normal(n)
        h = K // 2
        ref = np.empty(n)
        for i in range(n):
            acc = sum(-x[(i - 2 * K - l) % n] * x[(i - K - j) % n] + x[(i - K + j - l) % n] * x[(i + K + j) % n]
                      for j in range(-h, h + 1) for l in range(-h, h + 1))
            ref[i] = acc / K ** 2 - x[i] + F
        np.testing.assert_allclose(lorenz05_rhs(x, K, F), ref, atol=1e-12)

    def test_rhs_jacobian(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(60) * 2
        jac = _rhs_jacobian(x, 2)
        eps = 1e-6
        fd = np.column_stack([(lorenz05_rhs(x + eps * e, 2, 10.0) - lorenz05_rhs(x - eps * e, 2, 10.0)) / (2 * eps)
                              for e in np.eye(60)])
        assert np.max(np.abs(jac - fd)) / np.max(np.abs(fd)) < 1e-6

    def test_step_jacobian(self):
        cfg = Lorenz05Config(n=60, K=2)
        rng = np.random.default_rng(3)
        x = cfg.b * (cfg.F + 2 * rng.standard_normal(60))
        _, jac = lorenz05_step(x, cfg)
        eps = 1e-6
        fd = np.column_stack([(lorenz05_step(x + eps * e, cfg, False)[0] - lorenz05_step(x - eps * e, cfg, False)[0])
                              / (2 * eps) for e in np.eye(60)])
        assert np.max(np.abs(jac - fd)) / np.max(np.abs(fd)) < 1e-4

    def test_rk4_order(self):
        rng = np.random.default_rng(4)
        base = dict(n=40, K=2, F=10.0, b=1.0)
        x = 10.0 + rng.standard_normal(40)
        horizon, dt = 0.1, 0.01
        ref = lorenz05_step(x, Lorenz05Config(dt=dt / 10, substeps=100, **base), False)[0]
        e1 = np.max(np.abs(lorenz05_step(x, Lorenz05Config(dt=dt, substeps=10, **base), False)[0] - ref))
        e2 = np.max(np.abs(lorenz05_step(x, Lorenz05Config(dt=dt / 2, substeps=20, **base), False)[0] - ref))
        assert horizon == pytest.approx(10 * dt)
        assert 12 <= e1 / e2 <= 20

    def test_scale_cancels(self):
        x = np.random.default_rng(5).standard_normal(30)
        a = lorenz05_step(0.2 * x, Lorenz05Config(n=30, K=2, b=0.2))
        b = lorenz05_step(x, Lorenz05Config(n=30, K=2, b=1.0))
        np.testing.assert_allclose(a[0], 0.2 * b[0], atol=1e-12)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            Lorenz05Config(n=10, K=4)
        with pytest.raises(ValueError):
            lorenz05_step(np.full(30, np.nan), Lorenz05Config(n=30, K=2))

    def test_moments(self):
        cfg = Lorenz05Config(n=40, K=2)
        mean, cov = lorenz05_moments(cfg, ExpKernel(0.2, 0.15), burn_in=100, steps=2000)
        assert mean.shape == (40,) and cov.shape == (40, 40)
        np.linalg.cholesky(cov)
        assert np.all(np.isfinite(mean))


class TestSimulation:
    def setup_method(self):
        g = 6
        self.locs = grid_locations(g)
        self.e = advection_diffusion_matrix(AdvDiffConfig(g, 1e-3, 1e-2))
        self.sigma0 = ExpCovariance(self.locs)

    def test_noise_free_limit(self):
        model = StateSpaceModel(self.locs, np.zeros(36), self.sigma0, LinearEvolution(self.e))
        sim = simulate_ssm(model, 5, 0.5, Gaussian(1e-300), np.random.default_rng(0))
        assert sim.truth.shape == (6, 36)
        for b in sim.observations:
            np.testing.assert_allclose(b.values, sim.truth[b.t][b.indices], atol=1e-12)
            np.testing.assert_allclose(sim.truth[b.t], self.e @ sim.truth[b.t - 1], atol=1e-12)

    def test_no_observations(self):
        model = StateSpaceModel(self.locs, np.zeros(36), self.sigma0, LinearEvolution(self.e, self.sigma0))
        sim = simulate_ssm(model, 4, 0.0, Gaussian(0.1), np.random.default_rng(0))
        assert all(len(b) == 0 for b in sim.observations)
        assert [b.t for b in sim.observations] == [1, 2, 3, 4]

    def test_observation_count(self):
        model = StateSpaceModel(self.locs, np.zeros(36), self.sigma0, LinearEvolution(self.e, self.sigma0))
        sim = simulate_ssm(model, 3, 0.1, PoissonLog(), np.random.default_rng(0))
        assert all(len(b) == 4 for b in sim.observations)
        assert all(np.all(b.values == np.round(b.values)) for b in sim.observations)

    def test_seeded(self):
        model = StateSpaceModel(self.locs, np.zeros(36), self.sigma0, LinearEvolution(self.e, self.sigma0))
        a = simulate_ssm(model, 3, 0.3, Gaussian(0.1), np.random.default_rng(9))
        b = simulate_ssm(model, 3, 0.3, Gaussian(0.1), np.random.default_rng(9))
        assert np.array_equal(a.truth, b.truth)
        assert all(np.array_equal(x.values, y.values) for x, y in zip(a.observations, b.observations))

    def test_poisson_mean(self):
        model = StateSpaceModel(np.zeros((1, 2)), np.zeros(1), ExpCovariance(np.zeros((1, 2)), ExpKernel(1e-300, 1)))
        rng = np.random.default_rng(2)
        y = np.concatenate([PoissonLog().sample(np.zeros(1000), rng) for _ in range(100)])
        assert abs(y.mean() - 1) < 0.01
        sim = simulate_field(model, 1.0, PoissonLog(), rng)
        assert sim.truth.shape == (1, 1) and len(sim.observations[0]) == 1

    def test_dense_sampler_covariance(self):
        c = ExpCovariance(grid_locations(3))
        smp = DenseGaussianSampler(c)
        np.testing.assert_allclose(smp.factor @ smp.factor.T, c.to_dense(), atol=1e-12)
