"""Finite-difference reference solver.

Implicit upwind scheme for the penalized household HJB, stationary KFE via
the generator transpose, equilibrium interest rate by bisection, and a
shooting algorithm for deterministic transition paths after MIT shocks.
Everything is partial-equilibrium-in-prices inside the loops; market
clearing closes the model at the outer level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .economy import EconomyKS, Prices, labor_aggregate, prices_from_aggregates


@dataclass
class SteadyState:
    grid: np.ndarray          # (M,)
    W: np.ndarray             # (M, 2) marginal value of wealth
    V: np.ndarray             # (M, 2) value function
    policy: np.ndarray        # (M, 2) consumption
    g: np.ndarray             # (M, 2) stationary masses, node sum 1
    r: float
    w: float
    A: sp.csr_matrix          # (2M, 2M) HJB generator; KFE matrix is A.T
    z: float

    @property
    def capital(self):
        return float(self.grid @ self.g.sum(axis=1))


def _penalty(econ, a):
    return np.where(a <= econ.a_lb,
                    -0.5 * econ.kappa * (a - econ.a_lb) ** 2, 0.0)


def capital_demand(econ: EconomyKS, z: float, r: float, L: float) -> float:
    """Invert the firm FOC for capital at interest rate r."""
    return ((r + econ.delta) / (econ.alpha * np.exp(z))) \
        ** (1.0 / (econ.alpha - 1.0)) * L


def solve_household(econ: EconomyKS, grid, r, w, *, dt=100.0, max_iter=400,
                    tol=1e-9, V0=None):
    """Implicit upwind HJB iteration at fixed prices.

    Returns (V, policy, A) where A is the sparse generator of the household
    state process under the optimal policy.
    """
    m = grid.size
    da = grid[1] - grid[0]
    gamma = econ.gamma
    a = grid[:, None]
    lvals = econ.l_values[None, :]
    income = w * lvals + r * a                      # (M, 2)
    flow_pen = _penalty(econ, a)                    # (M, 2) via broadcast
    lam = econ.switch_rates

    if V0 is None:
        # value of consuming income forever
        V = (np.maximum(income, 1e-10) ** (1.0 - gamma)) / (1.0 - gamma) \
            / econ.rho
    else:
        V = V0.copy()

    rows_sw = []
    cols_sw = []
    vals_sw = []
    for j in (0, 1):
        idx = np.arange(m) + j * m
        other = np.arange(m) + (1 - j) * m
        rows_sw.extend(idx); cols_sw.extend(other); vals_sw.extend([lam[j]] * m)
        rows_sw.extend(idx); cols_sw.extend(idx); vals_sw.extend([-lam[j]] * m)
    A_switch = sp.csr_matrix((vals_sw, (rows_sw, cols_sw)), shape=(2 * m, 2 * m))

    I = sp.identity(2 * m, format="csr")
    for _ in range(max_iter):
        dVf = np.empty_like(V)
        dVb = np.empty_like(V)
        dVf[:-1, :] = (V[1:, :] - V[:-1, :]) / da
        dVf[-1, :] = np.maximum(income[-1, :], 1e-10) ** -gamma   # s<=0 at top
        dVb[1:, :] = (V[1:, :] - V[:-1, :]) / da
        dVb[0, :] = np.maximum(income[0, :], 1e-10) ** -gamma     # s>=0 at bottom

        dVf = np.maximum(dVf, 1e-10)
        dVb = np.maximum(dVb, 1e-10)
        cf = dVf ** (-1.0 / gamma)
        cb = dVb ** (-1.0 / gamma)
        sf = income - cf
        sb = income - cb
        If = sf > 0
        Ib = (sb < 0) & ~If
        I0 = ~If & ~Ib
        c = cf * If + cb * Ib + income * I0
        c = np.maximum(c, 1e-10)
        u = c ** (1.0 - gamma) / (1.0 - gamma) + flow_pen

        # drift coefficients must use the same exclusive upwind choice as the
        # policy, otherwise V develops a sawtooth near drift sign changes
        s_up = np.where(If, sf, 0.0)
        s_dn = np.where(Ib, sb, 0.0)
        lower = (-s_dn / da).ravel(order="F")
        upper = (s_up / da).ravel(order="F")
        diag = -(s_up - s_dn).ravel(order="F") / da
        # block-diagonal advection per employment state
        lower[[0, m]] = 0.0
        A_adv = sp.diags([lower[1:], diag, upper[:-1]], [-1, 0, 1],
                         format="csr")
        # zero the cross-block leakage of the tridiagonal layout
        A_adv = A_adv.tolil()
        A_adv[m - 1, m] = 0.0
        A_adv[m, m - 1] = 0.0
        A_adv = A_adv.tocsr()
        A = A_adv + A_switch

        lhs = (econ.rho + 1.0 / dt) * I - A
        rhs = u.ravel(order="F") + V.ravel(order="F") / dt
        V_new = spla.spsolve(lhs.tocsc(), rhs).reshape((m, 2), order="F")
        gap = np.abs(V_new - V).max()
        V = V_new
        if gap < tol:
            break
    else:
        raise RuntimeError(f"HJB iteration did not converge (last gap {gap})")
    return V, c, A


def stationary_distribution(A: sp.spmatrix) -> np.ndarray:
    """Solve A^T g = 0 with node masses summing to one."""
    n = A.shape[0]
    AT = sp.csr_matrix(A.T).tolil()
    AT[0, :] = 1.0            # replace one equation by the normalization
    b = np.zeros(n)
    b[0] = 1.0
    g = spla.spsolve(AT.tocsc(), b)
    return g / g.sum()


def solve_steady_state(econ: EconomyKS, z_fixed: float = 0.0, m: int = 93,
                       r_tol=1e-12, max_bisect=100) -> SteadyState:
    """Aiyagari steady state: HJB + stationary KFE + bisection on r."""
    if m < 50:
        raise ValueError("grid too coarse (m >= 50)")
    grid = np.linspace(econ.a_min, econ.a_max, m)
    L = labor_aggregate(econ)
    lo = -econ.delta + 1e-6
    hi = econ.rho - 1e-6

    def excess(r, V0=None):
        K_d = capital_demand(econ, z_fixed, r, L)
        w = (1.0 - econ.alpha) * np.exp(z_fixed) * K_d ** econ.alpha \
            * L ** -econ.alpha
        V, c, A = solve_household(econ, grid, r, w, V0=V0)
        g = stationary_distribution(A).reshape((m, 2), order="F")
        K_s = float(grid @ g.sum(axis=1))
        return K_s - K_d, (V, c, A, g, K_d, w)

    e_lo, _ = excess(lo)
    e_hi, _ = excess(hi)
    if not (e_lo < 0 < e_hi):
        raise RuntimeError(
            f"bisection bracket failure: excess({lo})={e_lo}, "
            f"excess({hi})={e_hi}")
    V0 = None
    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        e_mid, sol = excess(mid, V0=V0)
        V0 = sol[0]
        if e_mid > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < r_tol:
            break
    r = 0.5 * (lo + hi)
    _, (V, c, A, g, K_d, w) = excess(r, V0=V0)
    W = c ** -econ.gamma
    return SteadyState(grid=grid, W=W, V=V, policy=c, g=g, r=r, w=w, A=A,
                       z=z_fixed)


def shoot_transition(econ: EconomyKS, z_path, g0: np.ndarray, T: float,
                     nt: int, *, relax=0.9, tol=1e-6, max_iter=1000,
                     terminal: SteadyState | None = None):
    """Deterministic transition by shooting on the interest-rate path.

    `z_path`: array of length nt (piecewise-constant productivity).
    `g0`: initial masses (M, 2) on the terminal steady state's grid.
    Returns dict with time grid and r, w, K paths plus the g path.
    """
    z_path = np.broadcast_to(np.asarray(z_path, dtype=np.float64), (nt,))
    if terminal is None:
        terminal = solve_steady_state(econ, float(z_path[-1]))
    grid = terminal.grid
    m = grid.size
    dt = T / nt
    L = labor_aggregate(econ)
    gamma = econ.gamma
    a = grid[:, None]
    lvals = econ.l_values[None, :]
    flow_pen = _penalty(econ, a)
    lam = econ.switch_rates

    r_path = np.full(nt, terminal.r)
    I = sp.identity(2 * m, format="csr")

    A_switch = sp.lil_matrix((2 * m, 2 * m))
    for j in (0, 1):
        for mm in range(m):
            A_switch[j * m + mm, (1 - j) * m + mm] = lam[j]
            A_switch[j * m + mm, j * m + mm] = -lam[j]
    A_switch = A_switch.tocsr()

    for it in range(max_iter):
        # prices implied by the guessed r path
        K_d = capital_demand(econ, z_path, r_path, L)
        w_path = (1.0 - econ.alpha) * np.exp(z_path) * K_d ** econ.alpha \
            * L ** -econ.alpha

        # backward HJB from the terminal steady state
        V = terminal.V.copy()
        A_list = [None] * nt
        for t in range(nt - 1, -1, -1):
            income = w_path[t] * lvals + r_path[t] * a
            dVf = np.empty_like(V)
            dVb = np.empty_like(V)
            dVf[:-1, :] = (V[1:, :] - V[:-1, :]) / (grid[1] - grid[0])
            dVf[-1, :] = np.maximum(income[-1, :], 1e-10) ** -gamma
            dVb[1:, :] = (V[1:, :] - V[:-1, :]) / (grid[1] - grid[0])
            dVb[0, :] = np.maximum(income[0, :], 1e-10) ** -gamma
            dVf = np.maximum(dVf, 1e-10)
            dVb = np.maximum(dVb, 1e-10)
            cf = dVf ** (-1.0 / gamma)
            cb = dVb ** (-1.0 / gamma)
            sf = income - cf
            sb = income - cb
            If = sf > 0
            Ib = (sb < 0) & ~If
            I0 = ~If & ~Ib
            c = np.maximum(cf * If + cb * Ib + income * I0, 1e-10)
            u = c ** (1.0 - gamma) / (1.0 - gamma) + flow_pen
            da = grid[1] - grid[0]
            lower = (-np.minimum(sb, 0.0) / da).ravel(order="F")
            upper = (np.maximum(sf, 0.0) / da).ravel(order="F")
            diag = -(np.maximum(sf, 0.0)
                     - np.minimum(sb, 0.0)).ravel(order="F") / da
            lower[[0, m]] = 0.0
            A_adv = sp.diags([lower[1:], diag, upper[:-1]], [-1, 0, 1],
                             format="lil")
            A_adv[m - 1, m] = 0.0
            A_adv[m, m - 1] = 0.0
            A = A_adv.tocsr() + A_switch
            A_list[t] = A
            lhs = (econ.rho + 1.0 / dt) * I - A
            rhs = u.ravel(order="F") + V.ravel(order="F") / dt
            V = spla.spsolve(lhs.tocsc(), rhs).reshape((m, 2), order="F")

        # forward KFE under the computed generators
        g = g0.copy()
        K_path = np.empty(nt)
        for t in range(nt):
            K_path[t] = float(grid @ g.sum(axis=1))
            lhs = (I - dt * A_list[t].T).tocsc()
            g = spla.spsolve(lhs, g.ravel(order="F")).reshape((m, 2),
                                                             order="F")

        r_new = econ.alpha * np.exp(z_path) * K_path ** (econ.alpha - 1.0) \
            * L ** (1.0 - econ.alpha) - econ.delta
        gap = np.abs(r_new - r_path).max()
        r_path = relax * r_path + (1.0 - relax) * r_new
        if gap < tol:
            break
    else:
        raise RuntimeError(f"shooting did not converge (last gap {gap})")

    K_d = capital_demand(econ, z_path, r_path, L)
    w_path = (1.0 - econ.alpha) * np.exp(z_path) * K_d ** econ.alpha \
        * L ** -econ.alpha
    return {
        "t": np.arange(nt) * dt,
        "r": r_path,
        "w": w_path,
        "K": K_path,
        "z": z_path.copy(),
        "g_final": g,
        "iterations": it + 1,
    }


def save_steady_state_csv(path, ss: SteadyState):
    data = np.column_stack([ss.grid, ss.W, ss.policy, ss.g])
    np.savetxt(path, data, delimiter=",",
               header="a,W_l1,W_l2,c_l1,c_l2,g_l1,g_l2", comments="")
