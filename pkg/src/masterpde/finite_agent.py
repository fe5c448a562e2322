"""Finite-agent distribution backend.

The cross-sectional distribution is replaced by the positions of N agents:
wealths and employment labels. Each agent perceives prices computed from
the other N-1 agents (price taking), and the distribution-impact operator
sums the effect of every other agent's savings drift and employment
switches on the value approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Dual2
from .economy import (EconomyKS, HouseholdPoint, Prices, labor_aggregate,
                      optimal_consumption, prices_from_aggregates, savings)


@dataclass
class AgentCloud:
    """Positions of all N agents (the own agent included)."""
    wealth: np.ndarray        # (N,)
    labels: np.ndarray        # (N,) int in {0, 1}

    def __post_init__(self):
        self.wealth = np.asarray(self.wealth, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.wealth.shape != self.labels.shape or self.wealth.ndim != 1:
            raise ValueError("wealth and labels must be equal-length vectors")
        if self.wealth.size < 2:
            raise ValueError("need at least two agents")
        if not np.all(np.isfinite(self.wealth)):
            raise ValueError("non-finite wealth in cloud")

    @property
    def n(self):
        return self.wealth.size


@dataclass
class Others:
    """The other-agent block of the network state (wealths may be Dual2)."""
    wealth: object            # (N-1,) array or Dual2 thereof
    labels: np.ndarray        # (N-1,)


def prices_excluding(econ: EconomyKS, z, cloud: AgentCloud, i: int) -> Prices:
    """Prices perceived by agent i: capital is the mean over agents j != i."""
    if not 0 <= i < cloud.n:
        raise IndexError(f"agent index {i} out of range")
    K = (cloud.wealth.sum() - cloud.wealth[i]) / (cloud.n - 1)
    return prices_from_aggregates(econ, z, K, labor_aggregate(econ))


def _others(cloud: AgentCloud, i: int) -> Others:
    keep = np.arange(cloud.n) != i
    return Others(cloud.wealth[keep], cloud.labels[keep])


def lg_finite_agent(econ: EconomyKS, W_eval, i: int, z, cloud: AgentCloud,
                    c_eval=None):
    """Distribution-impact term at agent i's point.

    ``W_eval(a, l, z, others)`` evaluates the approximation; ``others`` is
    an ``Others`` block whose wealth may carry Dual2 seeds. The sum runs
    over every other agent j: savings drift times the partial of W in j's
    wealth slot, plus the label-switch jump.
    """
    others = _others(cloud, i)
    a_i, l_i = cloud.wealth[i], cloud.labels[i]
    W0 = W_eval(a_i, l_i, z, others)
    W0 = W0.v if isinstance(W0, Dual2) else W0

    total = 0.0
    lvals = econ.l_values
    rates = econ.switch_rates
    pos = 0     # position of agent j within the others block
    for j in range(cloud.n):
        if j == i:
            continue
        a_j, l_j = cloud.wealth[j], cloud.labels[j]
        pr_j = prices_excluding(econ, z, cloud, j)
        if c_eval is not None:
            c_j = c_eval(a_j, l_j, z, _others(cloud, j))
        else:
            Wj = W_eval(a_j, l_j, z, _others(cloud, j))
            Wj = Wj.v if isinstance(Wj, Dual2) else Wj
            c_j = optimal_consumption(econ, Wj)
        s_j = savings(econ, a_j, lvals[l_j], c_j, pr_j)

        direction = np.zeros(cloud.n - 1)
        direction[pos] = 1.0
        dW = W_eval(a_i, l_i, z,
                    Others(Dual2(others.wealth, direction, 0.0),
                           others.labels)).d1

        flipped = others.labels.copy()
        flipped[pos] = 1 - flipped[pos]
        W_sw = W_eval(a_i, l_i, z, Others(others.wealth, flipped))
        W_sw = W_sw.v if isinstance(W_sw, Dual2) else W_sw

        total = total + s_j * dW + rates[l_j] * (W_sw - W0)
        pos += 1
    return total


class FiniteAgentBackend:
    """Adapter giving ks_residual prices and L_g for one (cloud, i) pair."""

    def __init__(self, cloud: AgentCloud, i: int):
        self.cloud = cloud
        self.i = i

    @property
    def dist(self):
        return _others(self.cloud, self.i)

    def prices(self, econ, z, exclude=None):
        return prices_excluding(econ, z, self.cloud, self.i)

    def lg(self, econ, W_eval, point: HouseholdPoint, z, c_eval=None):
        return lg_finite_agent(econ, W_eval, self.i, z, self.cloud,
                               c_eval=c_eval)

    def point(self) -> HouseholdPoint:
        return HouseholdPoint(self.cloud.wealth[self.i],
                              int(self.cloud.labels[self.i]))


def sort_others(others: Others):
    """Other agents sorted by wealth ascending (the network input order)."""
    order = np.argsort(others.wealth if not isinstance(others.wealth, Dual2)
                       else np.asarray(others.wealth.v), kind="stable")
    if isinstance(others.wealth, Dual2):
        w = others.wealth
        take = lambda c: c[order] if isinstance(c, np.ndarray) else c
        wealth = Dual2(take(w.v), take(w.d1), take(w.d2))
    else:
        wealth = others.wealth[order]
    return Others(wealth, others.labels[order]), order
