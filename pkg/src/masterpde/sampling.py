"""Training-set generators: moment, steady-state-mixture, ergodic and
active sampling, plus the scheme-mixing schedule.

A sample point is a triple (x, z, dist): own household state, aggregate
productivity, and a distribution payload whose concrete type depends on
the approximation backend (agent cloud, grid masses, or projection
coefficients).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .economy import EconomyKS, HouseholdPoint, labor_aggregate
from .discrete_state import GridDist, grid_prices, kfe_drift_upwind
from .finite_agent import AgentCloud

log = logging.getLogger(__name__)

R_LB, R_RB = 0.01, 0.05
ACTIVE_SUBINTERVALS = 16
ACTIVE_ALLOCATION = (16, 8, 4)
# ceiling on the ergodic-point fraction per training method
ERGODIC_CEILING = {"discrete-state": 0.90, "projection": 0.80,
                   "spatial": 0.95}


@dataclass
class SampleBatch:
    points: list                  # [(HouseholdPoint, z, dist payload)]
    scheme_tags: list

    def __post_init__(self):
        if len(self.points) != len(self.scheme_tags):
            raise ValueError("one tag per point required")

    def validate_bounds(self, econ: EconomyKS):
        for point, z, _ in self.points:
            if not (econ.z_min <= z <= econ.z_max):
                raise ValueError(f"z={z} outside sampling bounds")
            if not (econ.a_min <= point.a <= econ.a_max):
                raise ValueError(f"a={point.a} outside sampling bounds")
        return self

    def __len__(self):
        return len(self.points)

    def __add__(self, other):
        return SampleBatch(self.points + other.points,
                           self.scheme_tags + other.scheme_tags)


def latin_hypercube_wealth(econ: EconomyKS, rng, n) -> np.ndarray:
    """n wealth draws, one per equal-width stratum of [a_min, a_max]."""
    sampler = qmc.LatinHypercube(d=1, seed=rng)
    u = sampler.random(n=n)[:, 0]
    return econ.a_min + (econ.a_max - econ.a_min) * u


def stationary_labor_probs(econ: EconomyKS) -> np.ndarray:
    lam = econ.switch_rates
    return np.array([lam[1], lam[0]]) / (lam[0] + lam[1])


def moment_sample_fa(econ: EconomyKS, rng, batch: int,
                     n_agents: int) -> SampleBatch:
    """Interest-rate-targeted agent clouds (finite-agent moment sampling).

    Each point draws r uniform on [R_LB, R_RB] and z uniform, inverts the
    firm demand for the implied aggregate capital, and rescales a Latin
    hypercube wealth cloud so its mean matches it. The own household is
    agent 0 of the cloud.
    """
    L = labor_aggregate(econ)
    pi = stationary_labor_probs(econ)
    points = []
    while len(points) < batch:
        z = rng.uniform(econ.z_min, econ.z_max)
        r = rng.uniform(R_LB, R_RB)
        K = ((r + econ.delta) / (econ.alpha * np.exp(z))) \
            ** (1.0 / (econ.alpha - 1.0)) * L
        if not (0.0 < K < np.inf):
            continue
        wealth = latin_hypercube_wealth(econ, rng, n_agents)
        wealth = wealth * (K / wealth.mean())
        wealth = np.clip(wealth, econ.a_min, econ.a_max)
        labels = (rng.random(n_agents) < pi[1]).astype(np.int64)
        cloud = AgentCloud(wealth, labels)
        own = HouseholdPoint(float(wealth[0]), int(labels[0]))
        points.append((own, z, cloud))
    return SampleBatch(points, ["moment"] * batch).validate_bounds(econ)


def _simplex_weights(rng, k):
    e = rng.exponential(size=k)
    return e / e.sum()


def _draw_own(econ: EconomyKS, rng):
    a = rng.uniform(econ.a_min, econ.a_max)
    l = int(rng.random() < 0.5)
    return HouseholdPoint(a, l)


def mixed_ss_sample(econ: EconomyKS, rng, steady_states, d_g: float,
                    batch: int, variant: str = "ks") -> SampleBatch:
    """Random mixtures of steady-state densities with node-level noise.

    `steady_states` is a list of mass arrays (all the same shape). The KS
    variant renormalizes each draw to unit mass; the spatial variant keeps
    a deliberate total-mass perturbation in [0.98, 1.02] after blending
    with the noisy mixture.
    """
    if len(steady_states) == 0:
        raise ValueError("at least one steady state required")
    if variant not in ("ks", "spatial"):
        raise ValueError(f"unknown variant {variant!r}")
    bases = [np.asarray(g, dtype=np.float64) for g in steady_states]
    points = []
    for _ in range(batch):
        w = _simplex_weights(rng, len(bases))
        mix = sum(wi * g for wi, g in zip(w, bases))
        omega = rng.uniform(1.0 - d_g, 1.0 + d_g, size=mix.shape)
        masses = mix * omega
        if variant == "ks":
            masses = masses / masses.sum()
        else:
            blend = rng.uniform(0.95, 1.0)
            noise = rng.uniform(size=mix.shape)
            noise /= noise.sum()
            masses = blend * masses / masses.sum() + (1.0 - blend) * noise
            masses = masses * rng.uniform(0.98, 1.02) / masses.sum()
        z = rng.uniform(econ.z_min, econ.z_max)
        points.append((_draw_own(econ, rng), z, masses))
    return SampleBatch(points, ["mixed-ss"] * batch).validate_bounds(econ)


@dataclass
class ErgodicBuffer:
    """Rolling simulation state for ergodic sampling (grid masses)."""
    econ: EconomyKS
    grid: np.ndarray
    rng: np.random.Generator
    steady_states: list
    d_g: float
    n_traj: int
    z: np.ndarray = field(init=False)
    masses: list = field(init=False)

    def __post_init__(self):
        self.z = np.zeros(self.n_traj)
        self.masses = []
        seed_batch = mixed_ss_sample(self.econ, self.rng,
                                     self.steady_states, self.d_g,
                                     self.n_traj)
        for i, (_, z, m) in enumerate(seed_batch.points):
            self.z[i] = z
            self.masses.append(m)

    def reset_trajectory(self, i):
        fresh = mixed_ss_sample(self.econ, self.rng, self.steady_states,
                                self.d_g, 1)
        _, z, m = fresh.points[0]
        self.z[i] = z
        self.masses[i] = m


def ergodic_sample(buffer: ErgodicBuffer, policy_fn, dt: float,
                   steps: int) -> SampleBatch:
    """Advance each buffered distribution under the current policy.

    `policy_fn(z, dist) -> (M, 2)` gives consumption on the grid.
    Each trajectory gets an independent OU innovation path for z (clipped
    to the sampling box); masses follow Euler steps of the upwind KFE.
    Non-finite trajectories are reset from a fresh steady-state mixture.
    """
    econ = buffer.econ
    for i in range(buffer.n_traj):
        z = buffer.z[i]
        masses = buffer.masses[i].copy()
        for _ in range(steps):
            dist = GridDist(buffer.grid, masses)
            policy = policy_fn(z, dist)
            mu = kfe_drift_upwind(econ, policy, z, dist)
            masses = masses + dt * mu
            z = z + econ.eta * (econ.zbar - z) * dt \
                + econ.sigma * np.sqrt(dt) * buffer.rng.standard_normal()
            z = float(np.clip(z, econ.z_min, econ.z_max))
        if not (np.all(np.isfinite(masses)) and np.isfinite(z)):
            log.warning("ergodic trajectory %d went non-finite; reset", i)
            buffer.reset_trajectory(i)
        else:
            buffer.z[i] = z
            buffer.masses[i] = masses
    points = [(_draw_own(econ, buffer.rng), buffer.z[i], buffer.masses[i])
              for i in range(buffer.n_traj)]
    return SampleBatch(points, ["ergodic"] * buffer.n_traj) \
        .validate_bounds(econ)


def active_sample_a(econ: EconomyKS, losses, rng) -> np.ndarray:
    """Extra wealth points concentrated on the worst-loss subinterval.

    `losses` holds one residual statistic per subinterval of an even
    partition of [a_min, a_max]. The worst subinterval receives 16 points,
    its worse neighbor 8 and the other neighbor 4; at the boundary the
    single neighbor receives 8 and the 4-point allocation lapses. Ties
    break toward the lowest index.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != (ACTIVE_SUBINTERVALS,):
        raise ValueError(f"expected {ACTIVE_SUBINTERVALS} subinterval losses")
    edges = np.linspace(econ.a_min, econ.a_max, ACTIVE_SUBINTERVALS + 1)
    worst = int(np.argmax(losses))
    targets = [(worst, ACTIVE_ALLOCATION[0])]
    neighbors = [i for i in (worst - 1, worst + 1)
                 if 0 <= i < ACTIVE_SUBINTERVALS]
    if len(neighbors) == 1:
        targets.append((neighbors[0], ACTIVE_ALLOCATION[1]))
    else:
        lo, hi = neighbors
        first, second = (lo, hi) if losses[lo] >= losses[hi] else (hi, lo)
        targets.append((first, ACTIVE_ALLOCATION[1]))
        targets.append((second, ACTIVE_ALLOCATION[2]))
    out = []
    for idx, count in targets:
        out.append(rng.uniform(edges[idx], edges[idx + 1], size=count))
    return np.concatenate(out)


def ergodic_fraction(epoch: int, method: str, ramp_start: int = 0,
                     ramp_epochs: int = 2000) -> float:
    """Monotone nondecreasing ergodic-point share, reaching the ceiling."""
    ceiling = ERGODIC_CEILING[method]
    if epoch <= ramp_start:
        return 0.0
    frac = ceiling * (epoch - ramp_start) / max(ramp_epochs, 1)
    return float(min(ceiling, frac))


def save_batch_csv(path, batch: SampleBatch):
    """Audit dump: own state, z and tag per point (payload omitted)."""
    with open(path, "w") as f:
        f.write("a,l,z,tag\n")
        for (point, z, _), tag in zip(batch.points, batch.scheme_tags):
            f.write(f"{point.a!r},{point.l},{z!r},{tag}\n")
