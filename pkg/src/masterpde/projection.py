"""Projection distribution backend: density in an eigenvector basis.

The density is written as g = b0 + sum_n phi_n b_n where b0 is the
stationary density of the frozen KFE generator and b_1..b_5 span the
slowest decaying perturbation directions. The basis is rotated so that
b_1 alone carries the capital moment: K(g) = K(b0) + phi_1 K(b_1) and
K(b_n) = 0 for n >= 2. The first coefficient drift then matches the
aggregate-capital law of motion exactly and the remaining drifts are the
least-squares projection of the grid KFE drift onto b_2..b_5.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .autodiff import Dual2, value_of
from .economy import (EconomyKS, HouseholdPoint, Prices, labor_aggregate,
                      optimal_consumption, prices_from_aggregates)
from .discrete_state import GridDist, kfe_drift_upwind

log = logging.getLogger(__name__)

N_COEFFS = 5
_SELECT = 7          # eigenvectors taken before the labor-marginal cut

_BASIS_MAGIC = "masterpde-eigenbasis-v1"


@dataclass
class EigenBasis:
    grid: np.ndarray            # (M,) wealth nodes
    b0: np.ndarray              # (M, 2) stationary density, node sum 1
    b: np.ndarray               # (N_COEFFS, M, 2) rotated basis vectors
    eigenvalues: np.ndarray     # (N_COEFFS,) complex, descending real part
    K_of_b: np.ndarray          # (N_COEFFS,) capital functional of each b_n
    raw_eigenvalues: np.ndarray  # perturbation eigenvalues before rotation
    raw_vectors: np.ndarray      # (k, M, 2) real/imag parts of eigenvectors
    kfe: np.ndarray              # (2M, 2M) frozen KFE generator (masses)

    @property
    def m(self):
        return self.grid.size

    def reconstruct(self, coeffs):
        """Density on the grid for a coefficient vector, shape (M, 2)."""
        coeffs = np.asarray(coeffs, dtype=np.float64)
        return self.b0 + np.tensordot(coeffs, self.b, axes=1)


@dataclass
class ProjCoeffs:
    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.shape != (N_COEFFS,):
            raise ValueError(f"expected {N_COEFFS} coefficients")


def _capital_functional(grid):
    """k with K(v) = k . vec(v) under node-sum quadrature (F layout)."""
    return np.concatenate([grid, grid])


def _flat(v):
    """(M, 2) -> (2M,) with the l1 block first (matches the KFE matrix)."""
    return np.asarray(v).ravel(order="F")


def _unflat(v, m):
    return np.asarray(v).reshape((m, 2), order="F")


def build_basis(econ: EconomyKS, fd_solution) -> EigenBasis:
    """Eigenvector basis of the steady-state KFE generator.

    `fd_solution` is a SteadyState from the finite-difference reference;
    the KFE generator for the mass vector is the transpose of its HJB
    generator A. The slowest eigenvectors are taken, directions that
    disturb the employment marginal are dropped, and the remainder is
    rotated toward the capital functional.
    """
    m = fd_solution.grid.size
    kfe = np.asarray(fd_solution.A.T.todense())
    vals, vecs = scipy.linalg.eig(kfe)
    order = np.argsort(-vals.real)
    vals, vecs = vals[order], vecs[:, order]

    lam0 = vals[0]
    if abs(lam0) > 1e-8:
        raise RuntimeError(
            f"no stationary eigenvalue near 0 (closest: {lam0})")

    # the employment marginal difference decays at rate lambda1 + lambda2;
    # eigenvectors carrying it are exact eigenvectors for that rate and
    # must be excluded so perturbations keep the ergodic (1/2, 1/2) split
    d = np.concatenate([np.ones(m), -np.ones(m)])
    keep = []
    for i in range(1, _SELECT):
        u = vecs[:, i]
        if abs(d @ u) > 1e-6 * np.abs(u).sum():
            continue
        keep.append(i)
    if len(keep) < _SELECT - 2:
        raise RuntimeError(
            "labor-marginal restriction removed more than one eigenvector; "
            f"eigenvalues {vals[1:_SELECT]}")
    keep = keep[:_SELECT - 2]

    # realify: a conjugate pair contributes its real and imaginary parts
    raw_vals = []
    raw_cols = []
    skip = set()
    for i in keep:
        if i in skip:
            continue
        lam = vals[i]
        u = vecs[:, i]
        u = u / np.abs(u).max()     # one scale per eigenvector, so that a
        # conjugate pair keeps consistent real and imaginary parts
        if abs(lam.imag) > 1e-12:
            raw_vals.extend([lam, lam.conjugate()])
            raw_cols.extend([u.real, u.imag])
            for j in keep:
                if j != i and abs(vals[j] - lam.conjugate()) < 1e-10:
                    skip.add(j)
                    break
        else:
            raw_vals.append(lam)
            raw_cols.append(u.real)
    raw_vals = np.array(raw_vals[:N_COEFFS])
    span = np.column_stack(raw_cols[:N_COEFFS])       # (2M, 5)
    if span.shape[1] != N_COEFFS:
        raise RuntimeError(
            f"only {span.shape[1]} usable eigen-directions")

    # rotate: b1 is the representer of the capital functional in the span,
    # b2..b5 an orthonormal basis of its orthogonal complement (so that
    # K(b_n) = <b1, b_n> = 0 for n >= 2)
    k = _capital_functional(fd_solution.grid)
    gram = span.T @ span
    try:
        coef = np.linalg.solve(gram, span.T @ k)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"degenerate eigen-span: {exc}") from None
    b1 = span @ coef
    b1 /= np.linalg.norm(b1)
    rest = span - np.outer(b1, b1 @ span)
    q, s, _ = np.linalg.svd(rest, full_matrices=False)
    rest = q[:, :N_COEFFS - 1]
    # deterministic sign: largest-magnitude entry positive
    for i in range(rest.shape[1]):
        j = np.argmax(np.abs(rest[:, i]))
        if rest[j, i] < 0:
            rest[:, i] = -rest[:, i]
    basis_flat = np.column_stack([b1, rest])

    b0 = np.asarray(fd_solution.g, dtype=np.float64)
    b0 = b0 / b0.sum()
    b = np.stack([_unflat(basis_flat[:, i], m) for i in range(N_COEFFS)])
    K_of_b = basis_flat.T @ k
    return EigenBasis(grid=fd_solution.grid.copy(), b0=b0, b=b,
                      eigenvalues=vals[1:1 + N_COEFFS],
                      K_of_b=K_of_b, raw_eigenvalues=raw_vals,
                      raw_vectors=np.stack([_unflat(span[:, i], m)
                                            for i in range(N_COEFFS)]),
                      kfe=kfe)


def project_density(basis: EigenBasis, masses) -> ProjCoeffs:
    """Least-squares coefficients of a density relative to b0."""
    resid = _flat(masses) - _flat(basis.b0)
    B = np.column_stack([_flat(basis.b[n]) for n in range(N_COEFFS)])
    phi = np.linalg.solve(B.T @ B, B.T @ resid)
    return ProjCoeffs(phi)


def reconstruct_capital(basis: EigenBasis, coeffs) -> float:
    coeffs = np.asarray(value_of(coeffs), dtype=np.float64)
    return float(_capital_functional(basis.grid) @ _flat(basis.b0)
                 + coeffs @ basis.K_of_b)


def projection_prices(econ: EconomyKS, z, basis: EigenBasis,
                      coeffs) -> Prices:
    K = reconstruct_capital(basis, coeffs)
    return prices_from_aggregates(econ, z, K, labor_aggregate(econ))


def capital_drift(econ: EconomyKS, policy, z, coeffs,
                  basis: EigenBasis) -> float:
    """Aggregate-capital drift: output minus consumption minus depreciation.

    `policy` is consumption on the basis grid, shape (M, 2); integrals are
    node sums against the reconstructed density.
    """
    g = basis.reconstruct(value_of(coeffs))
    if g.min() < -1e-3:
        log.warning("reconstructed density has negative lobe %.3e", g.min())
    K = float(_capital_functional(basis.grid) @ _flat(g))
    if K <= 0.0:
        raise ValueError(f"nonpositive capital K={K}")
    L = labor_aggregate(econ)
    Y = np.exp(z) * K ** econ.alpha * L ** (1.0 - econ.alpha)
    C = float(np.sum(np.asarray(policy) * g))
    return Y - C - econ.delta * K


def coeff_drifts(econ: EconomyKS, policy, z, coeffs,
                 basis: EigenBasis) -> np.ndarray:
    """Drifts of the five projection coefficients.

    The first matches the capital law of motion exactly; the others are
    the least-squares projection of the grid KFE drift of the
    reconstructed density onto b_2..b_5.
    """
    coeffs = np.asarray(value_of(coeffs), dtype=np.float64)
    mu_K = capital_drift(econ, policy, z, coeffs, basis)
    mu1 = mu_K / basis.K_of_b[0]

    g = basis.reconstruct(coeffs)
    dist = GridDist(basis.grid, basis.b0)
    prices = projection_prices(econ, z, basis, coeffs)
    mu_g = kfe_drift_upwind(econ, policy, z, dist, prices=prices, masses=g)
    resid = _flat(mu_g) - mu1 * _flat(basis.b[0])
    B2 = np.column_stack([_flat(basis.b[n]) for n in range(1, N_COEFFS)])
    gram = B2.T @ B2
    try:
        rest = np.linalg.solve(gram, B2.T @ resid)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"singular basis Gram matrix: {exc}") from None
    return np.concatenate([[mu1], rest])


def lg_projection(econ: EconomyKS, W_eval, point: HouseholdPoint, z,
                  coeffs, basis: EigenBasis, c_eval=None,
                  policy=None) -> float:
    """Inner product of coefficient drifts with the coeff-partials of W."""
    coeffs = np.asarray(value_of(coeffs), dtype=np.float64)
    if policy is None:
        # FOC consumption at every grid node; the approximation's
        # distribution input is the coefficient vector itself
        policy = np.empty((basis.m, 2))
        for j in (0, 1):
            for i, a in enumerate(basis.grid):
                if c_eval is not None:
                    policy[i, j] = value_of(c_eval(a, j, z, coeffs))
                else:
                    W = W_eval(a, j, z, coeffs)
                    W = W.v if isinstance(W, Dual2) else W
                    policy[i, j] = value_of(W) ** (-1.0 / econ.gamma)
    mu = coeff_drifts(econ, policy, z, coeffs, basis)
    out = W_eval(point.a, point.l, z, Dual2(coeffs, mu, 0.0))
    return out.d1


class ProjectionBackend:
    """Adapter giving ks_residual prices and L_g for one coefficient vector."""

    def __init__(self, basis: EigenBasis, coeffs, policy=None):
        self.basis = basis
        self.coeffs = np.asarray(coeffs, dtype=np.float64)
        self.policy = policy

    @property
    def dist(self):
        return self.coeffs

    def prices(self, econ, z, exclude=None):
        return projection_prices(econ, z, self.basis, self.coeffs)

    def lg(self, econ, W_eval, point, z, c_eval=None):
        return lg_projection(econ, W_eval, point, z, self.coeffs,
                             self.basis, c_eval=c_eval, policy=self.policy)


def linear_kfe_evolution_check(basis: EigenBasis, coeffs0, t) -> np.ndarray:
    """Closed-form evolution of the frozen linear KFE, shape (M, 2).

    The initial density is b0 plus a combination of the raw eigenvector
    columns with real weights `coeffs0`. Real eigenvalues decay as
    exp(lambda t); a conjugate pair (stored as real and imaginary part
    columns) evolves by the corresponding rotation-scaling block. This is
    the analytic counterpart of propagating the generator itself and is
    used as a test oracle.
    """
    coeffs0 = np.asarray(coeffs0, dtype=np.float64)
    vals = basis.raw_eigenvalues
    if coeffs0.shape != vals.shape:
        raise ValueError("one weight per raw eigen-direction expected")
    c_t = np.zeros_like(coeffs0)
    i = 0
    while i < len(vals):
        lam = vals[i]
        if abs(lam.imag) > 1e-12:
            # columns i, i+1 hold Re(u), Im(u) for lam = alpha + i beta
            alpha, beta = lam.real, lam.imag
            c1, c2 = coeffs0[i], coeffs0[i + 1]
            ea = np.exp(alpha * t)
            cb, sb = np.cos(beta * t), np.sin(beta * t)
            c_t[i] = ea * (cb * c1 + sb * c2)
            c_t[i + 1] = ea * (-sb * c1 + cb * c2)
            i += 2
        else:
            c_t[i] = coeffs0[i] * np.exp(lam.real * t)
            i += 1
    return basis.b0 + np.tensordot(c_t, basis.raw_vectors, axes=1)


def save_basis(path, basis: EigenBasis):
    arrays = {
        "grid": basis.grid,
        "b0": basis.b0,
        "b": basis.b,
        "eigenvalues_re": basis.eigenvalues.real,
        "eigenvalues_im": basis.eigenvalues.imag,
        "K_of_b": basis.K_of_b,
        "raw_eigenvalues_re": basis.raw_eigenvalues.real,
        "raw_eigenvalues_im": basis.raw_eigenvalues.imag,
        "raw_vectors": basis.raw_vectors,
        "kfe": basis.kfe,
    }
    header = {"magic": _BASIS_MAGIC,
              "shapes": {k: list(v.shape) for k, v in arrays.items()}}
    flat = np.concatenate([np.asarray(v, dtype=np.float64).ravel()
                           for v in arrays.values()])
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode())
        f.write(flat.astype("<f8").tobytes())


def load_basis(path) -> EigenBasis:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("magic") != _BASIS_MAGIC:
            raise ValueError("not an eigenbasis file")
        flat = np.frombuffer(f.read(), dtype="<f8")
    arrays = {}
    pos = 0
    for name, shape in header["shapes"].items():
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    return EigenBasis(
        grid=arrays["grid"], b0=arrays["b0"], b=arrays["b"],
        eigenvalues=arrays["eigenvalues_re"] + 1j * arrays["eigenvalues_im"],
        K_of_b=arrays["K_of_b"],
        raw_eigenvalues=(arrays["raw_eigenvalues_re"]
                         + 1j * arrays["raw_eigenvalues_im"]),
        raw_vectors=arrays["raw_vectors"], kfe=arrays["kfe"])
