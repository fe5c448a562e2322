"""Training loop for the master-equation residual networks.

The generic algorithm: draw a batch of (household state, aggregate state,
distribution) points, assemble the squared master-equation residual plus
shape penalties on a tape, backpropagate to the network parameters, and
take an ADAM step under a geometrically decaying learning rate.

Each approximation backend gets a vectorized loss (`FiniteAgentMethod`,
`DiscreteStateMethod`, `ProjectionMethod`) whose per-point values agree
with the scalar `economy.ks_residual` oracle to rounding error; the tests
enforce that equality. Pre-training helpers fit the networks to
finite-difference value tables before residual training starts.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import autodiff as ad
from . import networks as nets
from .autodiff import Dual2, Tape, amean, maximum, value_of
from .discrete_state import (GridDist, capital, grid_prices, kfe_drift_upwind,
                             uniform_grid)
from .economy import (EconomyKS, labor_aggregate, optimal_consumption,
                      prices_from_aggregates)
from .finite_agent import Others, sort_others
from .networks import DGMSpec, MLPSpec, bind, dgm_eval, mlp_eval, pack, unpack
from .projection import (EigenBasis, coeff_drifts, project_density,
                         projection_prices, reconstruct_capital)
from .sampling import SampleBatch

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """ADAM over a flat parameter vector (bias-corrected moments)."""

    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, x, grad, lr):
        grad = np.asarray(grad, dtype=np.float64)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return x - lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# configuration and reporting
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    kappa_e: float = 100.0
    kappa_s: float = 1.0
    lr_start: float = 3e-4
    lr_end: float = 1e-6
    batch: int = 512
    epochs: int = 100
    steps_per_epoch: int = 16
    policy_update_period: int = 10
    policy_fit_steps: int = 20
    seed: int = 0
    checkpoint_every: int = 0          # epochs; 0 disables
    checkpoint_dir: str | None = None
    trace_path: str | None = None

    def __post_init__(self):
        if self.kappa_e < 0 or self.kappa_s < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        if min(self.batch, self.epochs, self.steps_per_epoch,
               self.policy_update_period) < 1:
            raise ValueError("batch, epochs, steps, period must be >= 1")


@dataclass
class LossReport:
    total: float
    residual_mse: float
    shape_penalty: float
    epoch: int

    @classmethod
    def assemble(cls, cfg: TrainConfig, residual_mse, shape_penalty, epoch):
        return cls(cfg.kappa_e * residual_mse + cfg.kappa_s * shape_penalty,
                   residual_mse, shape_penalty, epoch)


def lr_at(cfg: TrainConfig, step, total_steps):
    """Geometric interpolation from lr_start to lr_end over the budget."""
    if total_steps <= 1 or cfg.lr_end == cfg.lr_start:
        return cfg.lr_start
    frac = step / (total_steps - 1)
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class Model:
    spec: object                 # MLPSpec or DGMSpec
    params: dict

    @property
    def is_dgm(self):
        return isinstance(self.spec, DGMSpec)

    def eval(self, params, x, phi=None):
        """Forward pass with explicit parameters (bound Vars or arrays)."""
        if self.is_dgm:
            return dgm_eval(self.spec, params, x, phi)
        if phi is not None:
            x = ad.concat([x, phi], axis=-1)
        return mlp_eval(self.spec, params, x)


def _flat1(x):
    """Network output (R, 1) -> (R,), generic over Var/Dual2/array."""
    if isinstance(x, Dual2):
        return Dual2(_flat1(x.v), _flat1(x.d1), _flat1(x.d2))
    if np.isscalar(x) or (isinstance(x, float)):
        return x
    return x.reshape(-1)


def _scalar(x):
    """Single-element network output -> python float."""
    return float(np.asarray(value_of(x)).reshape(-1)[0])


def _per_agent_prices(econ: EconomyKS, wealth_sorted, z):
    """Prices perceived by each agent (leave-one-out capital), (B, N)."""
    B, N = wealth_sorted.shape
    S = wealth_sorted.sum(axis=1, keepdims=True)
    K = (S - wealth_sorted) / (N - 1)
    ez = np.exp(np.asarray(z, dtype=np.float64)).reshape(B, 1)
    L = labor_aggregate(econ)
    r = econ.alpha * ez * K ** (econ.alpha - 1.0) * L ** (1.0 - econ.alpha) \
        - econ.delta
    w = (1.0 - econ.alpha) * ez * K ** econ.alpha * L ** (-econ.alpha)
    return r, w


def _penalty_vec(econ: EconomyKS, a, a_lb):
    a = np.asarray(a, dtype=np.float64)
    return np.where(a <= a_lb, -econ.kappa * (a - a_lb), 0.0)


# ---------------------------------------------------------------------------
# finite-agent method
# ---------------------------------------------------------------------------

class FiniteAgentMethod:
    """Batched master-equation loss over agent clouds.

    Network input row (sorted others for permutation invariance):
        [a_own, l_own, (z), (a_lb), others' wealth ascending, their labels].
    The own household is agent 0 of each cloud.
    """

    name = "finite-agent"

    def __init__(self, econ: EconomyKS, n_agents=41, include_z=False,
                 calibrated=False):
        self.econ = econ
        self.n = n_agents
        self.include_z = include_z
        self.calibrated = calibrated
        c = np.arange(n_agents - 1)
        # IDX[q, c]: sorted-cloud index of the c-th other of sorted agent q
        self.IDX = c[None, :] + (c[None, :] >= np.arange(n_agents)[:, None])

    @property
    def n_lead(self):
        return 2 + int(self.include_z) + int(self.calibrated)

    @property
    def input_dim(self):
        return self.n_lead + 2 * (self.n - 1)

    def default_spec(self, width=64, hidden=5):
        return MLPSpec([self.input_dim] + [width] * hidden + [1],
                       hidden_activation="tanh",
                       output_activation="softplus")

    # -- staging ----------------------------------------------------------
    def _stage(self, batch: SampleBatch, a_lb=None):
        B, N = len(batch), self.n
        A = np.empty((B, N))
        Lbl = np.empty((B, N), dtype=int)
        Z = np.empty(B)
        p0 = np.empty(B, dtype=int)
        for b, (pt, z, cloud) in enumerate(batch.points):
            if cloud.n != N:
                raise ValueError(f"cloud size {cloud.n} != method N={N}")
            order = np.argsort(cloud.wealth, kind="stable")
            A[b] = cloud.wealth[order]
            Lbl[b] = cloud.labels[order]
            Z[b] = z
            p0[b] = int(np.nonzero(order == 0)[0][0])
        alb = np.full(B, self.econ.a_lb) if a_lb is None \
            else np.asarray(a_lb, dtype=np.float64)
        rows = np.arange(B)
        OW = A[:, self.IDX]                       # (B, N, N-1)
        OL = Lbl[:, self.IDX]
        cols = [A[..., None], Lbl[..., None].astype(np.float64)]
        if self.include_z:
            cols.append(np.broadcast_to(Z[:, None, None], (B, N, 1)))
        if self.calibrated:
            cols.append(np.broadcast_to(alb[:, None, None], (B, N, 1)))
        cols += [OW, OL.astype(np.float64)]
        X_all = np.concatenate(cols, axis=-1)     # (B, N, D)
        return dict(A=A, Lbl=Lbl, Z=Z, p0=p0, alb=alb, rows=rows,
                    X_all=X_all, X_own=X_all[rows, p0],
                    gidx=self.IDX[p0])

    def own_inputs(self, batch: SampleBatch, a_lb=None):
        """Own-point network rows plus perceived prices (pre-training)."""
        st = self._stage(batch, a_lb)
        r, w = _per_agent_prices(self.econ, st["A"], st["Z"])
        rows, p0 = st["rows"], st["p0"]
        return st["X_own"], dict(a=st["A"][rows, p0],
                                 l=st["Lbl"][rows, p0],
                                 z=st["Z"], a_lb=st["alb"],
                                 r=r[rows, p0], w=w[rows, p0])

    # -- batched loss -----------------------------------------------------
    def loss(self, tape, bound, model: Model, batch: SampleBatch,
             policy=None, a_lb=None):
        econ = self.econ
        st = self._stage(batch, a_lb)
        B, N = len(batch), self.n
        A, Lbl, Z, p0, rows = st["A"], st["Lbl"], st["Z"], st["p0"], st["rows"]
        X_all, X_own, gidx = st["X_all"], st["X_own"], st["gidx"]
        rates = econ.switch_rates
        lvals = econ.l_values

        # value rows: every agent's own evaluation, the own-label flip, and
        # one flip per other agent's label
        lab0 = self.n_lead + (N - 1)
        X_ownflip = X_own.copy()
        X_ownflip[:, 1] = 1.0 - X_ownflip[:, 1]
        X_of = np.repeat(X_own[:, None, :], N - 1, axis=1)
        k = np.arange(N - 1)
        idx = (rows[:, None], k[None, :], lab0 + k[None, :])
        X_of[idx] = 1.0 - X_of[idx]
        X_big = np.concatenate([X_all.reshape(B * N, -1), X_ownflip,
                                X_of.reshape(B * (N - 1), -1)])
        V_big = _flat1(model.eval(bound, X_big))
        W_all = V_big[:B * N].reshape(B, N)
        W_ownflip = V_big[B * N:B * N + B]
        W_of = V_big[B * N + B:].reshape(B, N - 1)

        if policy is not None:
            pmodel, pparams = policy
            c_all = _flat1(pmodel.eval(pparams,
                                       X_all.reshape(B * N, -1)))
            c_all = value_of(c_all).reshape(B, N)
        else:
            c_all = optimal_consumption(econ, W_all)
        r_ag, w_ag = _per_agent_prices(econ, A, Z)
        s_all = w_ag * lvals[Lbl] + r_ag * A - c_all

        s_own = s_all[rows, p0]
        s_oth = s_all[rows[:, None], gidx]
        if isinstance(s_own, np.ndarray):
            seed = np.zeros_like(X_own)
            seed[:, 0] = s_own
            seed[:, self.n_lead:lab0] = s_oth
        else:
            seed = ad.concat([s_own.reshape(B, 1),
                              np.zeros((B, self.n_lead - 1)),
                              s_oth, np.zeros((B, N - 1))], axis=-1)
        P_dir = model.eval(bound, Dual2(X_own, seed, 0.0))
        transport = _flat1(P_dir.d1)

        e_a = np.zeros_like(X_own)
        e_a[:, 0] = 1.0
        P_a = model.eval(bound, Dual2(X_own, e_a, 0.0))
        W_own = _flat1(P_a.v)
        W_a = _flat1(P_a.d1)

        l_own = Lbl[rows, p0]
        lam_own = rates[l_own]
        pen = _penalty_vec(econ, A[rows, p0], st["alb"])
        rates_oth = rates[Lbl[rows[:, None], gidx]]
        jump = (rates_oth * (W_of - W_own.reshape(B, 1))).sum(axis=1)

        res = ((r_ag[rows, p0] - econ.rho) * W_own + pen + transport
               + lam_own * (W_ownflip - W_own) + jump)
        shape = amean(maximum(W_a, 0.0) ** 2)
        if self.include_z:
            e_z = np.zeros_like(X_own)
            e_z[:, 2] = 1.0
            P_z = model.eval(bound, Dual2(X_own, e_z, 0.0))
            W_z, W_zz = _flat1(P_z.d1), _flat1(P_z.d2)
            res = res + econ.eta * (econ.zbar - Z) * W_z \
                + 0.5 * econ.sigma ** 2 * W_zz
            shape = shape + amean(maximum(W_z, 0.0) ** 2)
        return res, shape

    # -- scalar adapter (oracle tests, simulation) ------------------------
    def w_eval(self, model: Model, params, a_lb=None):
        """Pointwise ``W_eval(a, l, z, others)`` closure over plain params."""
        alb = self.econ.a_lb if a_lb is None else float(a_lb)

        def evaluate(a, l, z, others: Others):
            others, _ = sort_others(others)
            parts = [Dual2._coerce(a), Dual2(float(l), 0.0, 0.0)]
            if self.include_z:
                parts.append(Dual2._coerce(z))
            if self.calibrated:
                parts.append(Dual2(alb, 0.0, 0.0))
            parts.append(Dual2._coerce(others.wealth))
            parts.append(Dual2(others.labels.astype(np.float64), 0.0, 0.0))

            def comp(f):
                return np.concatenate([
                    np.atleast_1d(np.broadcast_to(
                        np.asarray(value_of(getattr(p, f)), dtype=np.float64),
                        np.shape(value_of(p.v)) or (1,)))
                    for p in parts])

            x = Dual2(comp("v")[None, :], comp("d1")[None, :],
                      comp("d2")[None, :])
            out = model.eval(params, x)
            return Dual2(_scalar(out.v), _scalar(out.d1),
                         _scalar(out.d2))

        return evaluate

    def grid_policy_fn(self, model: Model, params, grid, a_lb=None):
        """Vectorized ``policy(z, prices, cloud) -> (M, 2)`` consumption.

        For the hybrid simulation scheme: the first N-1 cloud agents fill
        the network's other-agent block (sorted), and the net is evaluated
        at every grid node for both employment states in one pass.
        """
        grid = np.asarray(grid, dtype=np.float64)
        m = grid.size
        alb = self.econ.a_lb if a_lb is None else float(a_lb)
        n_oth = self.n - 1

        def policy(z, prices, cloud):
            if cloud.n < n_oth:
                raise ValueError(f"need at least {n_oth} agents in cloud")
            order = np.argsort(cloud.wealth[:n_oth], kind="stable")
            ow = cloud.wealth[:n_oth][order]
            ol = cloud.labels[:n_oth][order].astype(np.float64)
            X = np.empty((2 * m, self.input_dim))
            X[:, 0] = np.concatenate([grid, grid])
            X[:, 1] = np.repeat([0.0, 1.0], m)
            col = 2
            if self.include_z:
                X[:, col] = z
                col += 1
            if self.calibrated:
                X[:, col] = alb
                col += 1
            X[:, col:col + n_oth] = ow
            X[:, col + n_oth:] = ol
            W = value_of(_flat1(model.eval(params, X)))
            c = W ** (-1.0 / self.econ.gamma)
            return c.reshape(2, m).T

        return policy


# ---------------------------------------------------------------------------
# grid-distribution methods (discrete-state and projection)
# ---------------------------------------------------------------------------

class _GridMethodBase:
    """Shared machinery: distribution enters through the DGM embedding."""

    include_z = True

    def default_spec(self, emb_hidden=32, emb_out=10, layers=3, width=100):
        emb = MLPSpec([self.phi_dim, emb_hidden, emb_out],
                      hidden_activation="tanh",
                      output_activation="identity")
        return DGMSpec(embedding=emb, main_inputs=3,
                       recurrent_layers=layers, recurrent_width=width,
                       output_activation="elu")

    def _phi(self, payload):
        raise NotImplementedError

    def _grid_policy_np(self, model, np_params, Z, Phi, policy=None):
        """Consumption at all grid nodes for every point, (B, m, 2)."""
        B = Z.size
        m = self.grid.size
        a_col = np.concatenate([self.grid, self.grid])
        l_col = np.repeat([0.0, 1.0], m)
        x_main = np.empty((B, 2 * m, 3))
        x_main[:, :, 0] = a_col
        x_main[:, :, 1] = l_col
        x_main[:, :, 2] = Z[:, None]
        phi_rep = np.repeat(Phi[:, None, :], 2 * m, axis=1)
        x2 = x_main.reshape(B * 2 * m, 3)
        p2 = phi_rep.reshape(B * 2 * m, -1)
        if policy is not None:
            pmodel, pparams = policy
            c = value_of(_flat1(pmodel.eval(pparams, x2, p2)))
        else:
            W = value_of(_flat1(self_model_eval(model, np_params, x2, p2)))
            c = W ** (-1.0 / self.econ.gamma)
        return c.reshape(B, 2, m).transpose(0, 2, 1)

    def loss(self, tape, bound, model: Model, batch: SampleBatch,
             policy=None):
        econ = self.econ
        B = len(batch)
        Z = np.array([z for _, z, _ in batch.points])
        Phi = np.stack([self._phi(d) for _, _, d in batch.points])
        a_own = np.array([pt.a for pt, _, _ in batch.points])
        l_own = np.array([pt.l for pt, _, _ in batch.points], dtype=int)

        np_params = {k: v.value for k, v in bound.items()}
        policy_grid = self._grid_policy_np(model, np_params, Z, Phi,
                                           policy=policy)
        Mu = np.empty_like(Phi)
        R = np.empty(B)
        Wg = np.empty(B)
        for b in range(B):
            mu, pr = self._drift(policy_grid[b], Z[b], Phi[b])
            Mu[b] = mu
            R[b], Wg[b] = pr

        X_own = np.column_stack([a_own, l_own.astype(np.float64), Z])
        X_flip = X_own.copy()
        X_flip[:, 1] = 1.0 - X_flip[:, 1]
        V2 = _flat1(model.eval(bound, np.concatenate([X_own, X_flip]),
                               np.concatenate([Phi, Phi])))
        W_own_val = V2[:B]
        W_flip = V2[B:]

        e_a = np.zeros_like(X_own)
        e_a[:, 0] = 1.0
        P_a = model.eval(bound, Dual2(X_own, e_a, 0.0), Phi)
        W_own = _flat1(P_a.v)
        W_a = _flat1(P_a.d1)
        e_z = np.zeros_like(X_own)
        e_z[:, 2] = 1.0
        P_z = model.eval(bound, Dual2(X_own, e_z, 0.0), Phi)
        W_z, W_zz = _flat1(P_z.d1), _flat1(P_z.d2)
        P_g = model.eval(bound, X_own, Dual2(Phi, Mu, 0.0))
        lg = _flat1(P_g.d1)

        if policy is not None:
            pmodel, pparams = policy
            c_own = value_of(_flat1(pmodel.eval(pparams, X_own, Phi)))
        else:
            c_own = optimal_consumption(econ, W_own)
        lvals = econ.l_values
        s_own = Wg * lvals[l_own] + R * a_own - c_own
        lam = econ.switch_rates[l_own]
        pen = _penalty_vec(econ, a_own, econ.a_lb)

        res = ((R - econ.rho) * W_own_val + pen + s_own * W_a
               + lam * (W_flip - W_own_val)
               + econ.eta * (econ.zbar - Z) * W_z
               + 0.5 * econ.sigma ** 2 * W_zz + lg)
        shape = amean(maximum(W_a, 0.0) ** 2) \
            + amean(maximum(W_z, 0.0) ** 2)
        return res, shape

    def own_inputs(self, batch: SampleBatch):
        Z = np.array([z for _, z, _ in batch.points])
        Phi = np.stack([self._phi(d) for _, _, d in batch.points])
        a_own = np.array([pt.a for pt, _, _ in batch.points])
        l_own = np.array([pt.l for pt, _, _ in batch.points], dtype=int)
        K = np.array([self._capital(d) for _, _, d in batch.points])
        X = np.column_stack([a_own, l_own.astype(np.float64), Z])
        return (X, Phi), dict(a=a_own, l=l_own, z=Z, K=K)

    def w_eval(self, model: Model, params):
        """Pointwise ``W_eval(a, l, z, dist)`` closure over plain params."""

        def evaluate(a, l, z, dist):
            da = Dual2._coerce(a)
            dz = Dual2._coerce(z)
            dphi = dist if isinstance(dist, Dual2) else Dual2(dist, 0.0, 0.0)

            def comp3(f):
                return np.array([[value_of(getattr(da, f)), 0.0,
                                  value_of(getattr(dz, f))]])

            x = Dual2(comp3("v") + np.array([[0.0, float(l), 0.0]]),
                      comp3("d1"), comp3("d2"))

            def compp(f):
                c = np.asarray(value_of(getattr(dphi, f)), dtype=np.float64)
                c = np.broadcast_to(c, np.shape(value_of(dphi.v)))
                return self._phi(c)[None, :]

            phi = Dual2(compp("v"), compp("d1"), compp("d2"))
            out = model.eval(params, x, phi)
            return Dual2(_scalar(out.v), _scalar(out.d1),
                         _scalar(out.d2))

        return evaluate


def self_model_eval(model, params, x, phi):
    return model.eval(params, x, phi)


class DiscreteStateMethod(_GridMethodBase):
    """Distribution state: masses on the wealth grid (flattened, l1 first)."""

    name = "discrete-state"

    def __init__(self, econ: EconomyKS, grid):
        self.econ = econ
        self.grid = np.asarray(grid, dtype=np.float64)
        self.phi_dim = 2 * self.grid.size

    def _phi(self, payload):
        return np.asarray(payload, dtype=np.float64).ravel(order="F")

    def _capital(self, payload):
        return capital(GridDist(self.grid, np.asarray(payload)))

    def _drift(self, policy_b, z, phi):
        m = self.grid.size
        dist = GridDist(self.grid, phi.reshape((m, 2), order="F"))
        pr = grid_prices(self.econ, z, dist)
        mu = kfe_drift_upwind(self.econ, policy_b, z, dist)
        return mu.ravel(order="F"), pr


class ProjectionMethod(_GridMethodBase):
    """Distribution state: coefficients on the KFE eigenbasis."""

    name = "projection"

    def __init__(self, econ: EconomyKS, basis: EigenBasis):
        self.econ = econ
        self.basis = basis
        self.grid = basis.grid
        self.phi_dim = basis.b.shape[0]

    def _phi(self, payload):
        phi = getattr(payload, "phi", payload)
        return np.asarray(phi, dtype=np.float64)

    def _capital(self, payload):
        return reconstruct_capital(self.basis, self._phi(payload))

    def _drift(self, policy_b, z, phi):
        pr = projection_prices(self.econ, z, self.basis, phi)
        mu = coeff_drifts(self.econ, policy_b, z, phi, self.basis)
        return mu, pr

    def _grid_policy_np(self, model, np_params, Z, Phi, policy=None):
        # identical row layout; the embedding input is the coefficients
        return super()._grid_policy_np(model, np_params, Z, Phi,
                                       policy=policy)


# ---------------------------------------------------------------------------
# shape penalty (scalar reference)
# ---------------------------------------------------------------------------

def shape_loss_ks(W_eval, batch: SampleBatch):
    """Mean over the batch of max{dW/da,0}^2 + max{dW/dz,0}^2."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    total = 0.0
    for pt, z, dist in batch.points:
        Wa = W_eval(Dual2(pt.a, 1.0, 0.0), pt.l, Dual2(z, 0.0, 0.0), dist).d1
        Wz = W_eval(Dual2(pt.a, 0.0, 0.0), pt.l, Dual2(z, 1.0, 0.0), dist).d1
        total += max(Wa, 0.0) ** 2 + max(Wz, 0.0) ** 2
    return total / len(batch)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _write_trace(path, trace, lrs):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "E", "E_e", "E_s", "lr"])
        for rep, lr in zip(trace, lrs):
            wr.writerow([rep.epoch, rep.total, rep.residual_mse,
                         rep.shape_penalty, lr])


def _save_checkpoint(cfg, model, flat, epoch):
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    path = os.path.join(cfg.checkpoint_dir, f"epoch{epoch:05d}.ckpt")
    nets.save_checkpoint(path, {"epoch": epoch, "seed": cfg.seed}, flat)


def train(method, model: Model, cfg: TrainConfig, sampler, policy=None):
    """Minimize the weighted residual + shape loss; returns (params, trace).

    ``sampler(rng, n, epoch)`` yields a SampleBatch or (SampleBatch, extras)
    where ``extras`` are forwarded to the method loss (calibration).
    ``policy`` is an optional consumption Model whose parameters refresh
    only every ``policy_update_period`` steps (staggered updating).
    """
    rng = np.random.default_rng(cfg.seed)
    template = {k: np.asarray(v) for k, v in model.params.items()}
    flat = pack(template)
    adam = Adam(flat.size)
    pol_state = None
    if policy is not None:
        pol_state = dict(template={k: np.asarray(v)
                                   for k, v in policy.params.items()})
        pol_state["flat"] = pack(pol_state["template"])
        pol_state["adam"] = Adam(pol_state["flat"].size)

    total_steps = cfg.epochs * cfg.steps_per_epoch
    trace, epoch_lrs = [], []
    last_good = flat.copy()
    gstep = 0
    aborted = False
    for epoch in range(cfg.epochs):
        mses, shapes = [], []
        lr = cfg.lr_start
        for _ in range(cfg.steps_per_epoch):
            lr = lr_at(cfg, gstep, total_steps)
            drawn = sampler(rng, cfg.batch, epoch)
            batch, extras = drawn if isinstance(drawn, tuple) else (drawn, {})
            params = unpack(flat, template)

            pol = None
            if pol_state is not None:
                pol_params = unpack(pol_state["flat"], pol_state["template"])
                if gstep % cfg.policy_update_period == 0:
                    pol_state["flat"] = _fit_policy(
                        method, model, params, policy, pol_state, batch,
                        cfg, extras)
                    pol_params = unpack(pol_state["flat"],
                                        pol_state["template"])
                pol = (policy, pol_params)

            tape = Tape()
            bound = bind(tape, params)
            res, shape = method.loss(tape, bound, model, batch,
                                     policy=pol, **extras)
            mse = (res * res).mean()
            lossV = cfg.kappa_e * mse + cfg.kappa_s * shape
            lval = float(lossV.value)
            if not np.isfinite(lval):
                log.error("non-finite loss at epoch %d step %d; aborting "
                          "with last good parameters", epoch, gstep)
                aborted = True
                break
            grads = tape.grad(lossV, list(bound.values()))
            flat = adam.step(flat, np.concatenate([g.ravel() for g in grads]),
                             lr)
            mses.append(float(mse.value))
            shapes.append(float(value_of(shape)))
            gstep += 1
        if aborted:
            flat = last_good
            break
        trace.append(LossReport.assemble(cfg, float(np.mean(mses)),
                                         float(np.mean(shapes)), epoch))
        epoch_lrs.append(lr)
        last_good = flat.copy()
        if cfg.trace_path:
            _write_trace(cfg.trace_path, trace, epoch_lrs)
        if cfg.checkpoint_every and cfg.checkpoint_dir \
                and (epoch + 1) % cfg.checkpoint_every == 0:
            _save_checkpoint(cfg, model, flat, epoch)
    model.params = unpack(flat, template)
    if pol_state is not None:
        policy.params = unpack(pol_state["flat"], pol_state["template"])
    return model.params, trace


def _fit_policy(method, model, params, policy, pol_state, batch, cfg, extras):
    """Refresh the consumption network toward the current FOC consumption."""
    if isinstance(method, FiniteAgentMethod):
        st = method._stage(batch, extras.get("a_lb"))
        B, N = st["A"].shape
        X = st["X_all"].reshape(B * N, -1)
        W = value_of(_flat1(model.eval(params, X)))
        phi = None
    else:
        (X, phi), _ = method.own_inputs(batch)
        W = value_of(_flat1(model.eval(params, X, phi)))
    target = W ** (-1.0 / method.econ.gamma)
    pflat = pol_state["flat"]
    for _ in range(cfg.policy_fit_steps):
        tape = Tape()
        pbound = bind(tape, unpack(pflat, pol_state["template"]))
        out = _flat1(policy.eval(pbound, X, phi))
        err = out - target
        mse = (err * err).mean()
        grads = tape.grad(mse, list(pbound.values()))
        pflat = pol_state["adam"].step(
            pflat, np.concatenate([g.ravel() for g in grads]), cfg.lr_start)
    return pflat


def train_calibrated(method: FiniteAgentMethod, model: Model,
                     cfg: TrainConfig, sampler, param_range=(0.0, 1.5),
                     policy=None):
    """Train with the borrowing limit as an extra sampled network input."""
    if not getattr(method, "calibrated", False):
        raise ValueError("train_calibrated needs a calibrated method")
    lo, hi = param_range
    if not lo <= hi:
        raise ValueError("empty calibration range")

    def wrapped(rng, n, epoch):
        batch = sampler(rng, n, epoch)
        a_lb = rng.uniform(lo, hi, len(batch)) if hi > lo \
            else np.full(len(batch), lo)
        return batch, {"a_lb": a_lb}

    return train(method, model, cfg, wrapped, policy=policy)


# ---------------------------------------------------------------------------
# pre-training to finite-difference value tables
# ---------------------------------------------------------------------------

def aiyagari_value_table(econ: EconomyKS, r_values=None, m=301,
                         a_lb_values=None):
    """Householder marginal value W(a, l) at fixed prices on an r grid.

    Prices follow the firm's demand locus at z=0. Returns a callable
    ``table(a, l, r)`` (or ``table(a, l, r, a_lb)`` when ``a_lb_values``
    is given) interpolating W = c^{-gamma} of the implicit upwind solve.
    """
    from . import fd
    if r_values is None:
        r_values = np.linspace(0.004, 0.056, 9)
    grid = uniform_grid(econ.a_min, econ.a_max, m)
    L = labor_aggregate(econ)
    albs = None if a_lb_values is None \
        else np.asarray(a_lb_values, dtype=np.float64)
    n_alb = 1 if albs is None else albs.size
    W = np.empty((m, 2, len(r_values), n_alb))
    for ib in range(n_alb):
        e = econ if albs is None else replace(
            econ, a_lb=max(float(albs[ib]), 2.0 * econ.a_min))
        for ir, r in enumerate(r_values):
            K = fd.capital_demand(e, 0.0, r, L)
            w = (1.0 - e.alpha) * K ** e.alpha * L ** (-e.alpha)
            _, c, _ = fd.solve_household(e, grid, r, w)
            W[:, :, ir, ib] = c ** (-e.gamma)
    interps = []
    for j in (0, 1):
        if albs is None:
            interps.append(RegularGridInterpolator(
                (grid, r_values), W[:, j, :, 0],
                bounds_error=False, fill_value=None))
        else:
            interps.append(RegularGridInterpolator(
                (grid, r_values, albs), W[:, j],
                bounds_error=False, fill_value=None))

    def table(a, l, r, a_lb=None):
        a = np.asarray(a, dtype=np.float64)
        l = np.asarray(l, dtype=int)
        r = np.broadcast_to(np.asarray(r, dtype=np.float64), a.shape)
        if albs is None:
            pts = np.column_stack([a.ravel(), r.ravel()])
        else:
            ab = np.broadcast_to(np.asarray(a_lb, dtype=np.float64), a.shape)
            pts = np.column_stack([a.ravel(), r.ravel(), ab.ravel()])
        out = np.where(l.ravel() == 0, interps[0](pts), interps[1](pts))
        return out.reshape(a.shape)

    return table


def ks_value_table(econ: EconomyKS, z_values=None, K_values=None, m=301):
    """W(a, l) at fixed prices over a (z, K) grid (KS pre-training)."""
    from . import fd
    if z_values is None:
        z_values = np.linspace(econ.z_min, econ.z_max, 5)
    if K_values is None:
        L = labor_aggregate(econ)
        K_lo = fd.capital_demand(econ, econ.z_min, 0.055, L)
        K_hi = fd.capital_demand(econ, econ.z_max, 0.005, L)
        K_values = np.linspace(0.95 * K_lo, 1.05 * K_hi, 7)
    grid = uniform_grid(econ.a_min, econ.a_max, m)
    L = labor_aggregate(econ)
    W = np.empty((m, 2, len(z_values), len(K_values)))
    for iz, z in enumerate(z_values):
        for ik, K in enumerate(K_values):
            pr = prices_from_aggregates(econ, z, K, L)
            _, c, _ = fd.solve_household(econ, grid, pr.r, pr.w)
            W[:, :, iz, ik] = c ** (-econ.gamma)
    interps = [RegularGridInterpolator((grid, z_values, K_values), W[:, j],
                                       bounds_error=False, fill_value=None)
               for j in (0, 1)]

    def table(a, l, z, K):
        a = np.asarray(a, dtype=np.float64)
        l = np.asarray(l, dtype=int)
        z = np.broadcast_to(np.asarray(z, dtype=np.float64), a.shape)
        K = np.broadcast_to(np.asarray(K, dtype=np.float64), a.shape)
        pts = np.column_stack([a.ravel(), z.ravel(), K.ravel()])
        out = np.where(l.ravel() == 0, interps[0](pts), interps[1](pts))
        return out.reshape(a.shape)

    return table


def pretrain(method, model: Model, sampler, rng, table, steps=2000,
             lr=1e-3, n_points=2048):
    """Fit the network to the FD value table on one sampled point set."""
    drawn = sampler(rng, n_points, 0)
    batch, extras = drawn if isinstance(drawn, tuple) else (drawn, {})
    if isinstance(method, FiniteAgentMethod):
        X, info = method.own_inputs(batch, extras.get("a_lb"))
        if method.calibrated:
            y = table(info["a"], info["l"], info["r"], info["a_lb"])
        else:
            y = table(info["a"], info["l"], info["r"])
        targets = (X, y)
    else:
        (X, Phi), info = method.own_inputs(batch)
        y = table(info["a"], info["l"], info["z"], info["K"])
        targets = ((X, Phi), y)
    params, mse_trace = nets.pretrain_to_target(model.spec, model.params,
                                                targets, steps, lr=lr)
    model.params = params
    return model, mse_trace


# ---------------------------------------------------------------------------
# sampler adapters
# ---------------------------------------------------------------------------

def fa_sampler(econ: EconomyKS, n_agents=41):
    from .sampling import moment_sample_fa

    def sample(rng, n, epoch):
        return moment_sample_fa(econ, rng, n, n_agents)

    return sample


def ds_sampler(econ: EconomyKS, steady_states, d_g=0.2):
    from .sampling import mixed_ss_sample

    def sample(rng, n, epoch):
        return mixed_ss_sample(econ, rng, steady_states, d_g, n)

    return sample


def pj_sampler(econ: EconomyKS, basis: EigenBasis, steady_states, d_g=0.2):
    from .sampling import mixed_ss_sample

    def sample(rng, n, epoch):
        b = mixed_ss_sample(econ, rng, steady_states, d_g, n)
        pts = [(pt, z, project_density(basis, masses).phi)
               for pt, z, masses in b.points]
        return SampleBatch(pts, b.scheme_tags)

    return sample
