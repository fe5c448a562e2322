"""Continuous-time Krusell-Smith economy primitives.

Households hold wealth ``a`` and an employment state ``l`` in {l1, l2}
switching at Poisson rates (lambda1, lambda2); firms rent capital and labor
at prices set by marginal products under aggregate productivity ``z``
following an OU process. The borrowing limit is enforced through a
quadratic penalty below ``a_lb`` rather than a hard constraint.

The unknown solved throughout is W = dV/da (the marginal value of wealth);
V itself is never materialized. ``ks_residual`` assembles the master
equation residual for W given any distribution backend (an object exposing
prices and the distribution-impact operator L_g).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Dual2, value_of


class Prices(NamedTuple):
    r: float
    w: float


class HouseholdPoint(NamedTuple):
    a: float
    l: int          # employment index: 0 (low, l1) or 1 (high, l2)


@dataclass(frozen=True)
class EconomyKS:
    alpha: float = 1.0 / 3.0
    delta: float = 0.1
    gamma: float = 2.1
    rho: float = 0.05
    zbar: float = 0.0
    eta: float = 0.5
    sigma: float = 0.01
    lambda1: float = 0.4
    lambda2: float = 0.4
    l1: float = 0.3
    l2: float = 1.7
    a_lb: float = 1.0
    kappa: float = 3.0
    a_underbar: float = 0.0
    a_min: float = 1e-6
    a_max: float = 20.0
    z_min: float = -0.04
    z_max: float = 0.04

    def __post_init__(self):
        if not (self.gamma > 0 and self.rho > 0 and 0 < self.delta < 1):
            raise ValueError("gamma, rho must be positive, delta in (0,1)")
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("switching rates must be positive")
        if not (self.a_min < self.a_lb < self.a_max):
            raise ValueError("need a_min < a_lb < a_max")
        if not self.z_min < self.z_max:
            raise ValueError("need z_min < z_max")
        expected_l2 = 1.0 + (self.lambda2 / self.lambda1) * (1.0 - self.l1)
        if abs(self.l2 - expected_l2) > 1e-12:
            raise ValueError(
                f"l2={self.l2} inconsistent with labor normalization "
                f"(expected {expected_l2})")

    @property
    def l_values(self):
        return np.array([self.l1, self.l2])

    @property
    def switch_rates(self):
        """Poisson rate out of each employment state."""
        return np.array([self.lambda1, self.lambda2])


def labor_aggregate(econ: EconomyKS) -> float:
    """Aggregate labor under the stationary employment distribution."""
    lam1, lam2 = econ.lambda1, econ.lambda2
    return (lam2 * econ.l1 + lam1 * econ.l2) / (lam1 + lam2)


def prices_from_aggregates(econ: EconomyKS, z, K, L) -> Prices:
    if np.any(value_of(K) <= 0) or np.any(value_of(L) <= 0):
        raise ValueError("prices require K > 0 and L > 0")
    tfp = ad.exp(z) if isinstance(z, (Dual2,)) else np.exp(z)
    r = econ.alpha * tfp * ad.power(K, econ.alpha - 1.0) \
        * ad.power(L, 1.0 - econ.alpha) - econ.delta
    w = (1.0 - econ.alpha) * tfp * ad.power(K, econ.alpha) \
        * ad.power(L, -econ.alpha)
    return Prices(r, w)


def utility(econ: EconomyKS, c):
    return ad.power(c, 1.0 - econ.gamma) / (1.0 - econ.gamma)


def marginal_utility(econ: EconomyKS, c):
    return ad.power(c, -econ.gamma)


def optimal_consumption(econ: EconomyKS, W_value):
    """Invert the first-order condition u'(c) = W."""
    if np.any(value_of(W_value) <= 0):
        raise ValueError("optimal_consumption needs W > 0 "
                         "(invalid network output)")
    return ad.power(W_value, -1.0 / econ.gamma)


def savings(econ: EconomyKS, a, l_value, c, prices: Prices):
    return prices.w * l_value + prices.r * a - c


def penalty_derivative(econ: EconomyKS, a):
    """d/da of the quadratic penalty, active only at or below a_lb."""
    av = value_of(a)
    return np.where(av <= econ.a_lb, -econ.kappa * (av - econ.a_lb), 0.0)


def z_drift(econ: EconomyKS, z):
    return econ.eta * (econ.zbar - z)


def ks_residual(econ: EconomyKS, W_eval, point: HouseholdPoint, z, backend,
                c_eval=None):
    """Scalar reference implementation of the master-equation residual.

    ``W_eval(a, l_index, z, dist)`` evaluates the W-approximation with any
    argument optionally a Dual2 (dist is passed through to the backend's
    native representation). ``backend`` supplies ``prices(econ, z)``,
    ``lg(econ, W_eval, point, z)`` and ``dist`` (its native state). When
    ``c_eval`` is given (staggered policy network) consumption comes from
    it, otherwise from the FOC on W.

    This pointwise version is the oracle for the vectorized trainer path.
    """
    a, l = point.a, point.l
    dist = backend.dist
    prices = backend.prices(econ, z, exclude=getattr(point, "index", None))

    W = W_eval(Dual2(a, 1.0, 0.0), l, Dual2(z, 0.0, 0.0), dist)
    W_a = W.d1
    Wz = W_eval(Dual2(a, 0.0, 0.0), l, Dual2(z, 1.0, 0.0), dist)
    W_z, W_zz = Wz.d1, Wz.d2
    W_val = W.v

    if c_eval is not None:
        c = c_eval(a, l, z, dist)
    else:
        c = optimal_consumption(econ, W_val)
    s = savings(econ, a, econ.l_values[l], c, prices)

    W_hat = W_eval(Dual2(a, 0.0, 0.0), 1 - l, Dual2(z, 0.0, 0.0), dist).v
    lam = econ.switch_rates[l]

    lg = backend.lg(econ, W_eval, point, z, c_eval=c_eval)

    return ((prices.r - econ.rho) * W_val
            + penalty_derivative(econ, a)
            + s * W_a
            + lam * (W_hat - W_val)
            + z_drift(econ, z) * W_z
            + 0.5 * econ.sigma ** 2 * W_zz
            + lg)
