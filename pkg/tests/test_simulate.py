"""Simulation tests: OU paths, the hybrid density/cloud transition scheme,
fan charts, and the stochastic steady state."""

import numpy as np
import pytest

from masterpde import fd, simulate
from masterpde.discrete_state import GridDist, kfe_matrix, uniform_grid
from masterpde.economy import EconomyKS


@pytest.fixture(scope="module")
def econ():
    return EconomyKS()


@pytest.fixture(scope="module")
def ss(econ):
    return fd.solve_steady_state(econ, 0.0, 61)


def frozen_policy(ss):
    return lambda z, prices, cloud: ss.policy


class TestOUPath:
    def test_sigma_zero_at_mean_is_constant(self):
        econ = EconomyKS(sigma=0.0)
        z = simulate.ou_path(econ, econ.zbar, 0.1, 50,
                             np.random.default_rng(0))
        np.testing.assert_array_equal(z, econ.zbar)

    def test_sigma_zero_decays_exponentially(self):
        econ = EconomyKS(sigma=0.0)
        dt = 1e-3
        z = simulate.ou_path(econ, 0.04, dt, 2000, np.random.default_rng(0))
        t = np.arange(2001) * dt
        np.testing.assert_allclose(z, 0.04 * np.exp(-econ.eta * t),
                                   atol=0.04 * econ.eta * dt)

    def test_moments_match_discrete_ou(self):
        econ = EconomyKS()
        dt, steps, n = 0.01, 200, 4000
        rng = np.random.default_rng(1)
        ends = np.array([simulate.ou_path(econ, 0.02, dt, steps, rng)[-1]
                         for _ in range(n)])
        decay = (1.0 - econ.eta * dt) ** steps
        mean_th = 0.02 * decay
        var_th = econ.sigma ** 2 * dt \
            * (1.0 - (1.0 - econ.eta * dt) ** (2 * steps)) \
            / (1.0 - (1.0 - econ.eta * dt) ** 2)
        assert ends.mean() == pytest.approx(mean_th,
                                            abs=3 * np.sqrt(var_th / n))
        assert ends.var() == pytest.approx(var_th,
                                           abs=3 * var_th * np.sqrt(2.0 / n))

    def test_deterministic_per_seed(self):
        econ = EconomyKS()
        z1 = simulate.ou_path(econ, 0.0, 0.1, 30, np.random.default_rng(7))
        z2 = simulate.ou_path(econ, 0.0, 0.1, 30, np.random.default_rng(7))
        np.testing.assert_array_equal(z1, z2)

    def test_bad_dt_rejected(self):
        with pytest.raises(ValueError):
            simulate.ou_path(EconomyKS(), 0.0, 0.0, 5,
                             np.random.default_rng(0))


class TestDrawCloud:
    def test_marginals_match_masses(self):
        grid = uniform_grid(0.0, 4.0, 5)
        masses = np.zeros((5, 2))
        masses[1, 0] = 0.3
        masses[3, 1] = 0.7
        dist = GridDist(grid, masses)
        rng = np.random.default_rng(0)
        cloud = simulate.draw_cloud(dist, 1000, rng)
        frac = np.mean((cloud.wealth == grid[3]) & (cloud.labels == 1))
        # stratified sampling pins the counts almost exactly
        assert frac == pytest.approx(0.7, abs=1e-3)
        assert np.all(np.isin(cloud.wealth, grid[[1, 3]]))

    def test_zero_mass_rejected(self):
        dist = GridDist(uniform_grid(0, 1, 3), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            simulate.draw_cloud(dist, 10, np.random.default_rng(0))


class TestKFEGenerator:
    def test_matches_columnwise_oracle(self, econ, ss):
        dist = GridDist(ss.grid, ss.g)
        L1 = simulate.kfe_generator(econ, ss.policy, 0.0, dist)
        L2 = kfe_matrix(econ, ss.policy, 0.0, dist)
        np.testing.assert_array_equal(L1, L2)

    def test_columns_sum_to_zero(self, econ, ss):
        dist = GridDist(ss.grid, ss.g)
        L = simulate.kfe_generator(econ, ss.policy, 0.02, dist)
        np.testing.assert_allclose(L.sum(axis=0), 0.0, atol=1e-12)


class TestHybridTransition:
    def test_mass_conserved_each_step(self, econ, ss):
        tp = simulate.hybrid_transition(econ, frozen_policy(ss), ss.g,
                                        np.zeros(11), ss.grid, n_sim=2,
                                        rng=np.random.default_rng(0))
        for t in range(11):
            assert tp.g[t].sum() == pytest.approx(1.0, abs=1e-10)

    def test_steady_state_is_invariant(self, econ, ss):
        tp = simulate.hybrid_transition(econ, frozen_policy(ss), ss.g,
                                        np.zeros(101), ss.grid, n_sim=2,
                                        rng=np.random.default_rng(0))
        assert np.abs(tp.g[-1] - ss.g).max() < 1e-6
        assert tp.K[-1] == pytest.approx(ss.capital, abs=1e-8)

    def test_scalar_z_accepted(self, econ, ss):
        tp = simulate.hybrid_transition(econ, frozen_policy(ss), ss.g, 0.0,
                                        ss.grid, n_sim=1,
                                        rng=np.random.default_rng(0))
        assert tp.K.size == 2

    def test_policy_sees_cloud_draws(self, econ, ss):
        seen = []

        def spy(z, prices, cloud):
            seen.append(cloud)
            return ss.policy

        simulate.hybrid_transition(econ, spy, ss.g, np.zeros(3), ss.grid,
                                   n_sim=4, n_agents=11,
                                   rng=np.random.default_rng(0))
        assert len(seen) == 8
        assert all(c.n == 11 for c in seen)

    def test_bad_shapes_rejected(self, econ, ss):
        with pytest.raises(ValueError, match="shape"):
            simulate.hybrid_transition(econ, frozen_policy(ss),
                                       ss.g[:-1], 0.0, ss.grid)
        bad = lambda z, p, c: np.ones(3)
        with pytest.raises(ValueError, match="policy"):
            simulate.hybrid_transition(econ, bad, ss.g, 0.0, ss.grid,
                                       n_sim=1)

    def test_deterministic_per_seed(self, econ, ss):
        runs = [simulate.hybrid_transition(
            econ, frozen_policy(ss), ss.g, np.full(6, 0.01), ss.grid,
            n_sim=3, rng=np.random.default_rng(5)) for _ in range(2)]
        np.testing.assert_array_equal(runs[0].K, runs[1].K)
        np.testing.assert_array_equal(runs[0].g, runs[1].g)


class TestStochasticSteadyState:
    def test_fd_policy_fixed_point(self, econ, ss):
        # start away from the stationary density; the frozen-policy flow
        # must return to it
        g0 = ss.g.copy()
        g0 = np.roll(g0, 2, axis=0)
        g0 /= g0.sum()
        g_fix, steps = simulate.stochastic_steady_state(
            econ, frozen_policy(ss), g0, ss.grid, dt=0.5, tol=1e-9,
            max_steps=5000)
        dist_K = float(ss.grid @ g_fix.sum(axis=1))
        assert dist_K == pytest.approx(ss.capital, rel=2e-2)
        assert steps > 1

    def test_max_steps_exceeded(self, econ, ss):
        with pytest.raises(RuntimeError, match="fixed point"):
            simulate.stochastic_steady_state(econ, frozen_policy(ss),
                                             ss.g * 0 + ss.g[::-1],
                                             ss.grid, tol=0.0, max_steps=2)


class TestFanChart:
    def test_percentiles_monotone(self, econ, ss):
        times, bands = simulate.fan_chart(
            econ, frozen_policy(ss), ss.g, ss.grid, horizon=0.5, dt=0.1,
            n_paths=20, n_sim=1, rng=np.random.default_rng(0))
        for t in range(times.size):
            vals = [bands[p][t] for p in (10, 30, 50, 70, 90)]
            assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_sigma_zero_bands_coincide(self, ss):
        econ0 = EconomyKS(sigma=0.0)
        times, bands = simulate.fan_chart(
            econ0, frozen_policy(ss), ss.g, ss.grid, horizon=0.3, dt=0.1,
            n_paths=5, n_sim=1, rng=np.random.default_rng(0))
        np.testing.assert_allclose(bands[10], bands[90], atol=1e-14)

    def test_median_starts_at_initial_capital(self, econ, ss):
        times, bands = simulate.fan_chart(
            econ, frozen_policy(ss), ss.g, ss.grid, horizon=0.2, dt=0.1,
            n_paths=7, n_sim=1, rng=np.random.default_rng(1))
        assert bands[50][0] == pytest.approx(ss.capital, abs=1e-12)


class TestCSV:
    def test_transition_csv(self, econ, ss, tmp_path):
        tp = simulate.hybrid_transition(econ, frozen_policy(ss), ss.g,
                                        np.zeros(3), ss.grid, n_sim=1,
                                        rng=np.random.default_rng(0))
        path = tmp_path / "tp.csv"
        simulate.save_transition_csv(path, tp)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "t,z,K,r,w,K_rel_change"
        assert len(lines) == 4
        assert float(lines[1].split(",")[-1]) == 0.0

    def test_fan_chart_csv(self, tmp_path):
        times = np.array([0.0, 0.1])
        bands = {10: np.array([1.0, 2.0]), 90: np.array([3.0, 4.0])}
        path = tmp_path / "fan.csv"
        simulate.save_fan_chart_csv(path, times, bands)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "t,p10,p90"
        assert lines[2] == "0.1,2.0,4.0"
