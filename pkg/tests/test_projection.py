import numpy as np
import pytest
import scipy.linalg

from masterpde import fd, projection
from masterpde.autodiff import Dual2
from masterpde.economy import EconomyKS, HouseholdPoint, ks_residual
from masterpde.projection import (EigenBasis, ProjCoeffs, ProjectionBackend,
                                  build_basis, capital_drift, coeff_drifts,
                                  lg_projection, linear_kfe_evolution_check,
                                  load_basis, save_basis)


@pytest.fixture(scope="module")
def econ():
    return EconomyKS()


@pytest.fixture(scope="module")
def ss(econ):
    return fd.solve_steady_state(econ, 0.0, 101)


@pytest.fixture(scope="module")
def basis(econ, ss):
    return build_basis(econ, ss)


def flat(v):
    return np.asarray(v).ravel(order="F")


class TestBasisConstruction:
    def test_stationary_direction(self, basis):
        assert np.abs(basis.kfe @ flat(basis.b0)).max() < 1e-10

    def test_node_sums(self, basis):
        assert flat(basis.b0).sum() == pytest.approx(1.0, abs=1e-10)
        for n in range(5):
            assert abs(flat(basis.b[n]).sum()) < 1e-10

    def test_capital_moment_isolated(self, basis):
        assert abs(basis.K_of_b[0]) > 1.0
        for n in range(1, 5):
            assert abs(basis.K_of_b[n]) < 1e-10

    def test_capital_consistency(self, basis):
        rng = np.random.default_rng(0)
        k = np.concatenate([basis.grid, basis.grid])
        K0 = k @ flat(basis.b0)
        for _ in range(5):
            phi = rng.normal(scale=0.05, size=5)
            K = k @ flat(basis.reconstruct(phi))
            assert K == pytest.approx(K0 + phi[0] * basis.K_of_b[0],
                                      rel=1e-10)

    def test_reconstruction_mass_always_one(self, basis):
        rng = np.random.default_rng(1)
        for _ in range(5):
            phi = rng.normal(size=5)
            assert flat(basis.reconstruct(phi)).sum() == pytest.approx(
                1.0, abs=1e-9)

    def test_eigenvalues_negative_real_part(self, basis):
        assert np.all(basis.eigenvalues.real < 0)
        # sorted by descending real part (slowest first)
        assert np.all(np.diff(basis.eigenvalues.real) <= 1e-12)

    def test_labor_chain_rates(self, econ):
        # pure 2-state employment chain: generator for the marginal masses
        lam = econ.switch_rates
        M = np.array([[-lam[0], lam[1]], [lam[0], -lam[1]]])
        vals = np.sort(np.linalg.eigvals(M).real)
        np.testing.assert_allclose(vals, [-(lam[0] + lam[1]), 0.0],
                                   atol=1e-12)

    def test_labor_marginal_left_eigenvector(self, econ, basis):
        # the employment-marginal difference is an exact left eigenvector
        # of the full KFE generator at rate -(lambda1 + lambda2); the kept
        # basis directions are orthogonal to it
        m = basis.m
        lam = econ.switch_rates
        d = np.concatenate([np.ones(m), -np.ones(m)])
        np.testing.assert_allclose(d @ basis.kfe, -(lam[0] + lam[1]) * d,
                                   atol=1e-10)
        for n in range(5):
            assert abs(d @ flat(basis.b[n])) < 1e-8


class TestProjCoeffs:
    def test_shape_enforced(self):
        with pytest.raises(ValueError):
            ProjCoeffs(np.zeros(4))
        assert ProjCoeffs(np.zeros(5)).phi.shape == (5,)


class TestCapitalDrift:
    def test_zero_at_steady_state(self, econ, ss, basis):
        mu_K = capital_drift(econ, ss.policy, 0.0, np.zeros(5), basis)
        assert abs(mu_K) < 1e-3

    def test_linearity_in_consumption(self, econ, ss, basis):
        mu1 = capital_drift(econ, ss.policy, 0.0, np.zeros(5), basis)
        mu2 = capital_drift(econ, 2.0 * ss.policy, 0.0, np.zeros(5), basis)
        C = float(np.sum(ss.policy * basis.b0))
        assert mu2 - mu1 == pytest.approx(-C, rel=1e-12)

    def test_nonpositive_capital_rejected(self, econ, ss, basis):
        phi = np.zeros(5)
        phi[0] = -10.0 * abs(
            projection.reconstruct_capital(basis, np.zeros(5))
            / basis.K_of_b[0])
        with pytest.raises(ValueError):
            capital_drift(econ, ss.policy, 0.0, phi, basis)

    def test_negative_lobe_warning(self, econ, ss, basis, caplog):
        phi = np.zeros(5)
        phi[1] = 5.0
        with caplog.at_level("WARNING", logger="masterpde.projection"):
            try:
                capital_drift(econ, ss.policy, 0.0, phi, basis)
            except ValueError:
                pass
        assert any("negative lobe" in r.message for r in caplog.records)


class TestCoeffDrifts:
    def test_zero_at_steady_state(self, econ, ss, basis):
        mu = coeff_drifts(econ, ss.policy, 0.0, np.zeros(5), basis)
        assert np.abs(mu).max() < 1e-3

    def test_gram_symmetric_positive_definite(self, basis):
        B2 = np.column_stack([flat(basis.b[n]) for n in range(1, 5)])
        gram = B2.T @ B2
        np.testing.assert_allclose(gram, gram.T, atol=1e-14)
        assert np.linalg.eigvalsh(gram).min() > 0

    def test_projection_recovers_span_member(self, basis):
        # least-squares step is exact on drifts already in span{b2..b5}
        B2 = np.column_stack([flat(basis.b[n]) for n in range(1, 5)])
        x = np.array([0.4, -0.2, 0.1, 0.05])
        resid = B2 @ x
        sol = np.linalg.solve(B2.T @ B2, B2.T @ resid)
        np.testing.assert_allclose(sol, x, atol=1e-12)


class TestLgProjection:
    def test_coeff_independent_network(self, econ, ss, basis):
        def W_eval(a, l, z, phi):
            return Dual2._coerce(2.0) if isinstance(phi, Dual2) else 2.0

        out = lg_projection(econ, W_eval, HouseholdPoint(3.0, 0), 0.0,
                            np.zeros(5), basis, policy=ss.policy)
        assert out == 0.0

    def test_linear_network_inner_product(self, econ, ss, basis):
        w = np.array([0.3, -0.1, 0.2, 0.05, -0.4])
        phi0 = np.array([0.01, -0.02, 0.005, 0.0, 0.01])

        def W_eval(a, l, z, phi):
            if isinstance(phi, Dual2):
                return Dual2(1.0 + float(w @ phi.v), float(w @ phi.d1), 0.0)
            return 1.0 + float(w @ phi)

        out = lg_projection(econ, W_eval, HouseholdPoint(3.0, 0), 0.0,
                            phi0, basis, policy=ss.policy)
        mu = coeff_drifts(econ, ss.policy, 0.0, phi0, basis)
        assert out == pytest.approx(float(w @ mu), rel=1e-12)

    def test_directional_fd_oracle(self, econ, ss, basis):
        phi0 = np.array([0.02, -0.01, 0.0, 0.005, -0.003])

        def W_raw(phi):
            return 1.0 + 0.3 * phi[0] ** 2 - 0.2 * phi[1] * phi[3] \
                + 0.1 * np.sin(phi[4])

        def W_eval(a, l, z, phi):
            if isinstance(phi, Dual2):
                h = 1e-6
                base = W_raw(phi.v)
                d1 = (W_raw(phi.v + h * phi.d1)
                      - W_raw(phi.v - h * phi.d1)) / (2 * h)
                return Dual2(base, d1, 0.0)
            return W_raw(phi)

        mu = coeff_drifts(econ, ss.policy, 0.0, phi0, basis)
        h = 1e-6
        expected = (W_raw(phi0 + h * mu) - W_raw(phi0 - h * mu)) / (2 * h)
        out = lg_projection(econ, W_eval, HouseholdPoint(3.0, 0), 0.0,
                            phi0, basis, policy=ss.policy)
        assert out == pytest.approx(expected, rel=1e-6)

    def test_backend_residual_finite(self, econ, ss, basis):
        from scipy.interpolate import CubicSpline
        splines = [CubicSpline(ss.grid, ss.W[:, j]) for j in (0, 1)]

        def W_eval(a, l, z, phi):
            a = Dual2._coerce(a)
            sp = splines[l]
            return Dual2(float(sp(a.v)), a.d1 * float(sp(a.v, 1)),
                         a.d2 * float(sp(a.v, 1))
                         + (a.d1 * a.d1) * float(sp(a.v, 2)))

        backend = ProjectionBackend(basis, np.zeros(5), policy=ss.policy)
        res = ks_residual(econ, W_eval, HouseholdPoint(8.0, 1), 0.0, backend)
        assert np.isfinite(res)
        assert abs(res) < 0.1


class TestLinearEvolution:
    def test_initial_density(self, basis):
        c0 = np.array([0.1, -0.05, 0.02, 0.0, 0.01])
        g0 = basis.b0 + np.tensordot(c0, basis.raw_vectors, axes=1)
        np.testing.assert_allclose(
            linear_kfe_evolution_check(basis, c0, 0.0), g0, atol=1e-14)

    def test_decay_to_stationary(self, basis):
        c0 = np.array([0.1, -0.05, 0.02, 0.0, 0.01])
        g_inf = linear_kfe_evolution_check(basis, c0, 500.0)
        np.testing.assert_allclose(g_inf, basis.b0, atol=1e-12)

    def test_matches_matrix_exponential(self, basis):
        rng = np.random.default_rng(7)
        c0 = rng.normal(scale=0.05, size=5)
        g0 = basis.b0 + np.tensordot(c0, basis.raw_vectors, axes=1)
        for t in (0.5, 1.0, 2.5, 5.0):
            expected = scipy.linalg.expm(basis.kfe * t) @ flat(g0)
            got = flat(linear_kfe_evolution_check(basis, c0, t))
            assert np.abs(got - expected).max() < 1e-8

    def test_complex_pair_block(self):
        # synthetic generator with a complex pair exercises the rotation
        # block of the closed-form evolution
        grid = np.array([0.0, 1.0])
        kfe = np.array([[-1.0, 2.0, 0.0, 0.0],
                        [-2.0, -1.0, 0.0, 0.0],
                        [0.0, 0.0, -0.5, 0.0],
                        [0.0, 0.0, 0.0, 0.0]])
        vals, vecs = scipy.linalg.eig(kfe)
        i = int(np.argmax(vals.imag))
        u = vecs[:, i]
        lam = vals[i]
        raw_vals = np.array([lam, lam.conjugate(), -0.5 + 0j])
        cols = [u.real, u.imag, np.array([0.0, 0.0, 1.0, 0.0])]
        basis = EigenBasis(
            grid=grid, b0=np.array([[0.0, 0.0], [0.0, 1.0]]),
            b=np.zeros((5, 2, 2)), eigenvalues=raw_vals[:5],
            K_of_b=np.zeros(5), raw_eigenvalues=raw_vals,
            raw_vectors=np.stack([c.reshape((2, 2), order="F")
                                  for c in cols]),
            kfe=kfe)
        c0 = np.array([0.3, -0.2, 0.4])
        g0 = basis.b0 + np.tensordot(c0, basis.raw_vectors, axes=1)
        for t in (0.3, 1.7):
            expected = scipy.linalg.expm(kfe * t) @ flat(g0)
            got = flat(linear_kfe_evolution_check(basis, c0, t))
            np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_weight_count_enforced(self, basis):
        with pytest.raises(ValueError):
            linear_kfe_evolution_check(basis, np.zeros(3), 1.0)


class TestPersistence:
    def test_roundtrip_bit_exact(self, basis, tmp_path):
        path = tmp_path / "basis.bin"
        save_basis(path, basis)
        loaded = load_basis(path)
        for name in ("grid", "b0", "b", "K_of_b", "raw_vectors", "kfe"):
            a, b = getattr(basis, name), getattr(loaded, name)
            assert np.array_equal(np.asarray(a), np.asarray(b))
        assert np.array_equal(basis.eigenvalues, loaded.eigenvalues)
        assert np.array_equal(basis.raw_eigenvalues, loaded.raw_eigenvalues)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b'{"magic": "nope"}\n')
        with pytest.raises(ValueError):
            load_basis(path)


class TestProjectDensity:
    def test_recovers_span_member(self, basis):
        rng = np.random.default_rng(7)
        phi = rng.normal(scale=0.05, size=5)
        masses = basis.b0 + np.einsum("n,nij->ij", phi, basis.b)
        back = projection.project_density(basis, masses)
        np.testing.assert_allclose(back.phi, phi, atol=1e-10)

    def test_zero_for_stationary_density(self, basis):
        back = projection.project_density(basis, basis.b0)
        np.testing.assert_allclose(back.phi, 0.0, atol=1e-10)

    def test_least_squares_optimality(self, basis):
        # perturb off-span; the residual must be orthogonal to the basis
        rng = np.random.default_rng(11)
        masses = basis.b0 + rng.normal(scale=1e-3, size=basis.b0.shape)
        back = projection.project_density(basis, masses)
        B = np.column_stack([basis.b[n].ravel(order="F") for n in range(5)])
        resid = (masses - basis.b0).ravel(order="F") - B @ back.phi
        np.testing.assert_allclose(B.T @ resid, 0.0, atol=1e-12)
