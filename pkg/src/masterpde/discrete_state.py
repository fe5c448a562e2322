"""Discrete-state distribution backend: masses on a fixed wealth grid.

The density is a vector of point masses at M uniformly spaced wealth
levels for each of the two employment states. Its law of motion is the
conservative upwind discretization of the KFE (backward differences where
savings are positive, forward differences where negative, no-flux
boundaries) plus the employment-switch jump terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Dual2, value_of
from .economy import (EconomyKS, HouseholdPoint, Prices, labor_aggregate,
                      optimal_consumption, prices_from_aggregates, savings)


@dataclass
class GridDist:
    grid: np.ndarray          # (M,) wealth points, uniformly spaced
    masses: np.ndarray        # (M, 2) nonnegative masses

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.masses.shape != (self.grid.size, 2):
            raise ValueError("masses must have shape (M, 2)")
        d = np.diff(self.grid)
        if d.size == 0 or not np.allclose(d, d[0], rtol=1e-10, atol=1e-12):
            raise ValueError("grid must be uniform")
        if d[0] <= 0:
            raise ValueError("grid must be increasing")

    @property
    def da(self):
        return self.grid[1] - self.grid[0]

    @property
    def m(self):
        return self.grid.size


def uniform_grid(a_min, a_max, m):
    return np.linspace(a_min, a_max, m)


def capital(dist: GridDist) -> float:
    """Aggregate capital: node sum of a * mass (point-mass quadrature)."""
    return float(dist.grid @ dist.masses.sum(axis=1))


def grid_prices(econ: EconomyKS, z, dist: GridDist) -> Prices:
    return prices_from_aggregates(econ, z, capital(dist),
                                  labor_aggregate(econ))


def grid_savings(econ: EconomyKS, policy, z, dist: GridDist,
                 prices: Prices | None = None):
    """Savings flow at every grid node given consumption `policy` (M,2)."""
    if prices is None:
        prices = grid_prices(econ, z, dist)
    a = dist.grid[:, None]
    lvals = econ.l_values[None, :]
    return savings(econ, a, lvals, policy, prices)


def kfe_drift_upwind(econ: EconomyKS, policy, z, dist: GridDist,
                     prices: Prices | None = None, masses=None):
    """Time derivative of the mass vector, shape (M, 2).

    `masses` may override dist.masses with a Dual2/array of the same shape
    (used when differentiating through the drift). Mass is conserved
    exactly: the scheme is in flux form with zero boundary fluxes.
    """
    phi = dist.masses if masses is None else masses
    s = grid_savings(econ, np.asarray(policy, dtype=np.float64), z, dist,
                     prices)
    s = np.asarray(value_of(s), dtype=np.float64)
    da = dist.da
    splus = np.maximum(s, 0.0)
    sminus = np.minimum(s, 0.0)
    splus[-1, :] = 0.0     # no outflow through the top boundary
    sminus[0, :] = 0.0     # no outflow through the bottom boundary

    def shift_down(x):     # x_{m-1} with zero fill
        return _shift(x, +1)

    def shift_up(x):       # x_{m+1} with zero fill
        return _shift(x, -1)

    if isinstance(phi, Dual2):
        comp = lambda c: _drift_terms(c, splus, sminus, da) \
            if not np.isscalar(c) else 0.0
        adv = Dual2(comp(phi.v), comp(phi.d1), comp(phi.d2))
        jump = Dual2(*(_jump_terms(c, econ) if not np.isscalar(c) else 0.0
                       for c in (phi.v, phi.d1, phi.d2)))
        return adv + jump
    return _drift_terms(phi, splus, sminus, da) + _jump_terms(phi, econ)


def _shift(x, k):
    out = np.zeros_like(np.asarray(x, dtype=np.float64))
    if k > 0:
        out[k:, :] = x[:-k, :]
    else:
        out[:k, :] = x[-k:, :]
    return out


def _drift_terms(phi, splus, sminus, da):
    phi = np.asarray(phi, dtype=np.float64)
    return (_shift(splus * phi, +1) - splus * phi
            + sminus * phi - _shift(sminus * phi, -1)) / da


def _jump_terms(phi, econ):
    phi = np.asarray(phi, dtype=np.float64)
    lam = econ.switch_rates
    out = np.empty_like(phi)
    out[:, 0] = lam[1] * phi[:, 1] - lam[0] * phi[:, 0]
    out[:, 1] = lam[0] * phi[:, 0] - lam[1] * phi[:, 1]
    return out


def kfe_matrix(econ: EconomyKS, policy, z, dist: GridDist,
               prices: Prices | None = None):
    """Dense generator L with drift = L @ vec(masses); oracle/simulation."""
    m = dist.m
    n = 2 * m
    L = np.zeros((n, n))
    base = GridDist(dist.grid, dist.masses)
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        L[:, k] = kfe_drift_upwind(econ, policy, z, base, prices=prices,
                                   masses=e.reshape(m, 2)).ravel()
    return L


def lg_discrete(econ: EconomyKS, W_eval, point: HouseholdPoint, z,
                dist: GridDist, c_eval=None, policy=None):
    """Inner product of the KFE drift with the mass-partials of W.

    Consumption on the grid comes from `policy` (M,2) if given, else from
    `c_eval`, else from the FOC on W evaluated at every grid node.
    """
    if policy is None:
        policy = grid_policy(econ, W_eval, z, dist, c_eval=c_eval)
    mu = kfe_drift_upwind(econ, policy, z, dist)
    out = W_eval(point.a, point.l, z,
                 Dual2(dist.masses, mu, 0.0))
    return out.d1


def grid_policy(econ: EconomyKS, W_eval, z, dist: GridDist, c_eval=None):
    """Consumption at all grid nodes under the current approximation."""
    policy = np.empty((dist.m, 2))
    for j in (0, 1):
        for m, a in enumerate(dist.grid):
            if c_eval is not None:
                policy[m, j] = value_of(c_eval(a, j, z, dist.masses))
            else:
                W = W_eval(a, j, z, dist.masses)
                W = W.v if isinstance(W, Dual2) else W
                policy[m, j] = value_of(
                    optimal_consumption(econ, W))
    return policy


class DiscreteStateBackend:
    """Adapter giving ks_residual prices and L_g for one GridDist."""

    def __init__(self, dist: GridDist, policy=None):
        self.gdist = dist
        self.policy = policy     # optional fixed consumption on the grid

    @property
    def dist(self):
        return self.gdist.masses

    def prices(self, econ, z, exclude=None):
        return grid_prices(econ, z, self.gdist)

    def lg(self, econ, W_eval, point, z, c_eval=None):
        return lg_discrete(econ, W_eval, point, z, self.gdist,
                           c_eval=c_eval, policy=self.policy)


def save_griddist_csv(path, dist: GridDist):
    data = np.column_stack([dist.grid, dist.masses])
    np.savetxt(path, data, delimiter=",", header="a,mass_l1,mass_l2",
               comments="")


def load_griddist_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    return GridDist(data[:, 0], data[:, 1:3])
