"""Post-training simulation: productivity paths, hybrid grid transitions
driven by trained consumption policies, fan charts, and the stochastic
steady state.

The hybrid scheme keeps the cross-sectional density on a wealth grid but
feeds the policy sampled agent clouds, so distribution-dependent networks
see the state representation they were trained on. Each step averages the
upwind transition generator over the sampled clouds and advances the
masses implicitly, which conserves total mass exactly.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .discrete_state import GridDist, capital, grid_prices, grid_savings
from .economy import EconomyKS, Prices
from .finite_agent import AgentCloud

log = logging.getLogger(__name__)

__all__ = ["ou_path", "draw_cloud", "kfe_generator", "hybrid_transition",
           "stochastic_steady_state", "fan_chart", "TransitionPath",
           "save_transition_csv", "save_fan_chart_csv"]


def ou_path(econ: EconomyKS, z0, dt, steps, rng):
    """Euler scheme for the productivity process; returns (steps+1,) values.

    z' = z + eta (zbar - z) dt + sigma sqrt(dt) xi, with xi standard normal.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = np.empty(steps + 1)
    z[0] = z0
    xi = rng.standard_normal(steps) if steps > 0 else np.empty(0)
    root_dt = np.sqrt(dt)
    for t in range(steps):
        z[t + 1] = z[t] + econ.eta * (econ.zbar - z[t]) * dt \
            + econ.sigma * root_dt * xi[t]
    return z


def draw_cloud(dist: GridDist, n, rng) -> AgentCloud:
    """Stratified inverse-CDF draw of n agents from the grid masses."""
    p = dist.masses.ravel(order="F")
    total = p.sum()
    if total <= 0:
        raise ValueError("cannot sample from nonpositive masses")
    cdf = np.cumsum(p) / total
    u = (np.arange(n) + rng.uniform(size=n)) / n
    idx = np.searchsorted(cdf, u, side="left")
    idx = np.minimum(idx, p.size - 1)
    return AgentCloud(dist.grid[idx % dist.m], idx // dist.m)


def kfe_generator(econ: EconomyKS, policy, z, dist: GridDist,
                  prices: Prices | None = None) -> np.ndarray:
    """Dense (2M, 2M) generator of the upwind KFE on C-raveled masses.

    Matches kfe_drift_upwind column by column: flux-form advection with
    zero boundary fluxes plus employment switching. Every column sums to
    zero, so the implicit update conserves total mass to solver precision.
    """
    m = dist.m
    s = np.asarray(grid_savings(econ, policy, z, dist, prices),
                   dtype=np.float64)
    splus = np.maximum(s, 0.0)
    sminus = np.minimum(s, 0.0)
    splus[-1, :] = 0.0
    sminus[0, :] = 0.0
    da = dist.da

    L = np.zeros((2 * m, 2 * m))
    idx = np.arange(m)[:, None] * 2 + np.arange(2)[None, :]   # C-ravel of (M,2)
    src = idx.ravel()
    diag = ((sminus - splus) / da).ravel()
    L[src, src] += diag
    up = idx[:-1, :].ravel()      # mass leaving node i upward lands at i+1
    L[idx[1:, :].ravel(), up] += (splus[:-1, :] / da).ravel()
    dn = idx[1:, :].ravel()
    L[idx[:-1, :].ravel(), dn] += (-sminus[1:, :] / da).ravel()
    lam = econ.switch_rates
    for j in (0, 1):
        L[idx[:, 1 - j], idx[:, j]] += lam[j]
        L[idx[:, j], idx[:, j]] -= lam[j]
    return L


@dataclass
class TransitionPath:
    t: np.ndarray             # (T+1,)
    z: np.ndarray             # (T+1,)
    K: np.ndarray             # (T+1,)
    r: np.ndarray             # (T+1,)
    w: np.ndarray             # (T+1,)
    g: np.ndarray             # (T+1, M, 2)


def hybrid_transition(econ: EconomyKS, policy, g0, z_path, grid, *,
                      dt=0.1, n_sim=100, n_agents=41, rng=None,
                      mass_tol=1e-10) -> TransitionPath:
    """Advance the density under a trained policy along a z path.

    ``policy(z, prices, cloud) -> (M, 2)`` returns grid-node consumption;
    ``cloud`` is a fresh agent draw from the current density, so
    distribution-dependent networks receive their trained state. ``z_path``
    may be a scalar (held fixed) or an array of per-step values; the run
    takes ``len(z_path) - 1`` steps. Prices come from the current density's
    capital each step; the cloud enters only through the policy.
    """
    g = np.asarray(g0, dtype=np.float64).copy()
    m = np.asarray(grid).size
    if g.shape != (m, 2):
        raise ValueError("g0 must have shape (M, 2)")
    if np.isscalar(z_path) or np.ndim(z_path) == 0:
        z_path = np.full(2, float(z_path))
    z_path = np.asarray(z_path, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(0)
    steps = z_path.size - 1
    mass0 = g.sum()

    K = np.empty(steps + 1)
    r = np.empty(steps + 1)
    w = np.empty(steps + 1)
    gs = np.empty((steps + 1, m, 2))
    eye = np.eye(2 * m)
    for t in range(steps + 1):
        dist = GridDist(grid, g)
        K[t] = capital(dist)
        prices = grid_prices(econ, z_path[t], dist)
        r[t], w[t] = prices
        gs[t] = g
        if t == steps:
            break
        Lbar = np.zeros((2 * m, 2 * m))
        for _ in range(n_sim):
            cloud = draw_cloud(dist, n_agents, rng)
            c = np.asarray(policy(z_path[t], prices, cloud), dtype=np.float64)
            if c.shape != (m, 2):
                raise ValueError("policy must return (M, 2) consumption")
            Lbar += kfe_generator(econ, c, z_path[t], dist, prices)
        Lbar /= n_sim
        try:
            g_flat = np.linalg.solve(eye - dt * Lbar, g.ravel())
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"implicit step failed at t={t}") from exc
        if abs(g_flat.sum() - mass0) > mass_tol:
            raise RuntimeError(f"mass not conserved at t={t}: "
                               f"{g_flat.sum() - mass0:.3e}")
        if g_flat.min() < -1e-10:
            raise RuntimeError(f"negative mass {g_flat.min():.3e} at t={t}")
        g = np.maximum(g_flat, 0.0).reshape(m, 2)

    return TransitionPath(np.arange(steps + 1) * dt, z_path, K, r, w, gs)


def stochastic_steady_state(econ: EconomyKS, policy, g0, grid, *,
                            dt=0.1, tol=1e-8, max_steps=20000,
                            n_sim=1, n_agents=41, rng=None):
    """Fixed point of the z = zbar deterministic flow under the policy.

    Iterates implicit steps at frozen z until the one-step L1 change of
    the masses falls below ``tol``. Returns (masses, steps_taken).
    """
    g = np.asarray(g0, dtype=np.float64).copy()
    if rng is None:
        rng = np.random.default_rng(0)
    z2 = np.full(2, econ.zbar)
    for it in range(max_steps):
        path = hybrid_transition(econ, policy, g, z2, grid, dt=dt,
                                 n_sim=n_sim, n_agents=n_agents, rng=rng)
        g_next = path.g[-1]
        change = np.abs(g_next - g).sum()
        g = g_next
        if change < tol:
            return g, it + 1
    raise RuntimeError(f"no fixed point within {max_steps} steps "
                       f"(last change {change:.3e})")


def fan_chart(econ: EconomyKS, policy, g0, grid, *, horizon, dt=0.1,
              n_paths=1000, n_sim=10, n_agents=41, z0=0.0,
              percentiles=(10, 30, 50, 70, 90), rng=None):
    """Percentile bands of aggregate capital across simulated shock paths.

    Returns (times, bands) where ``bands[p]`` is the p-th percentile of K
    at each time index across ``n_paths`` independent productivity paths.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    steps = int(round(horizon / dt))
    Ks = np.empty((n_paths, steps + 1))
    for k in range(n_paths):
        z = ou_path(econ, z0, dt, steps, rng)
        path = hybrid_transition(econ, policy, g0, z, grid, dt=dt,
                                 n_sim=n_sim, n_agents=n_agents, rng=rng)
        Ks[k] = path.K
    times = np.arange(steps + 1) * dt
    bands = {p: np.percentile(Ks, p, axis=0) for p in percentiles}
    return times, bands


def save_transition_csv(path, tp: TransitionPath):
    """t, z, K, r, w plus relative capital change from the initial level."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "z", "K", "r", "w", "K_rel_change"])
        for i in range(tp.t.size):
            wr.writerow([tp.t[i], tp.z[i], tp.K[i], tp.r[i], tp.w[i],
                         tp.K[i] / tp.K[0] - 1.0])


def save_fan_chart_csv(path, times, bands):
    keys = sorted(bands)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + [f"p{p}" for p in keys])
        for i, t in enumerate(times):
            wr.writerow([t] + [bands[p][i] for p in keys])
