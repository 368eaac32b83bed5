"""Constrained moving horizon estimation: the windowed quadratic program,
its cost, the arrival-cost Riccati recursion, and the Kalman baseline.

At time t with effective window M the problem minimizes, over the initial
state estimate and the process-noise sequence,

    gamma^M ||x0 - prior||^2_{P^-1}
      + sum_k gamma^{M-1-k} (||xi_k||^2_{Q^-1} + ||zeta_k||^2_{R^-1})

subject to the rollout x_{k+1} = A_k x_k + xi_k, zeta_k = y_k - C_k x_k and
box constraints on xi and zeta.  The measurement noise is eliminated
through the rollout, leaving a dense QP in z = (x0, xi_0..xi_{M-1}) with
box rows for xi and affine rows for zeta.  It is solved by an
operator-splitting (ADMM) iteration with box projections plus a final
active-set polish that certifies the KKT point via its duality gap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    DimensionMismatch,
    DomainError,
    Infeasible,
    MaxIterations,
    SingularInnovation,
)
from .model import BoxSet, InfoVector, require_spd, _ro

TOL_FEAS = 1e-8

# relative duality-gap certificate demanded from the QP solver
GAP_RTOL = 1e-8


@dataclass(frozen=True)
class ArrivalCost:
    """Arrival-cost weight P (SPD) tagged with the time it applies to."""

    P: np.ndarray
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "P", _ro(require_spd(self.P, "P")))


@dataclass(frozen=True, eq=False)
class MheInstance:
    """One windowed estimation problem: data window, weights, constraints."""

    iv: InfoVector
    gamma: float
    Q: np.ndarray
    R: np.ndarray
    Qinv: np.ndarray
    Rinv: np.ndarray
    xi_set: BoxSet
    zeta_set: BoxSet

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise DomainError(f"gamma must lie in [0, 1), got {self.gamma}")
        for name in ("Q", "R", "Qinv", "Rinv"):
            object.__setattr__(self, name, _ro(require_spd(getattr(self, name), name)))
        if self.xi_set.dim != self.iv.n or self.zeta_set.dim != self.iv.m:
            raise DimensionMismatch("constraint boxes do not match the window dimensions")

    @property
    def window_len(self):
        return self.iv.window_len

    @cached_property
    def Pinv(self):
        pinv = np.linalg.inv(self.iv.prior_weight)
        return 0.5 * (pinv + pinv.T)

    @cached_property
    def window(self):
        return _CondensedWindow(self)


def make_instance(iv, gamma, noise):
    """Build an MheInstance from an InfoVector and a NoiseSpec."""
    return MheInstance(
        iv=iv,
        gamma=float(gamma),
        Q=noise.Q,
        R=noise.R,
        Qinv=np.linalg.inv(noise.Q),
        Rinv=np.linalg.inv(noise.R),
        xi_set=noise.xi_set,
        zeta_set=noise.zeta_set,
    )


@dataclass(frozen=True)
class PrimalSolution:
    """Decision variables of the windowed QP plus derived quantities.

    x_traj and zeta_hat are always the rollout images of (x0_hat, xi_hat);
    `feasible` states whether both noise sequences respect their boxes
    within TOL_FEAS.
    """

    x0_hat: np.ndarray
    xi_hat: np.ndarray
    x_traj: np.ndarray
    zeta_hat: np.ndarray
    cost: float
    feasible: bool
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def estimate(self):
        """The state estimate the window emits: the final rollout state."""
        return self.x_traj[-1]


def discount_weights(gamma, window_len):
    """Stage discounts gamma^{M-1-k} and the dual scalings gamma^{k+1-M}.

    Defined for gamma in [0, 1]; gamma = 1 gives all-ones (the undiscounted
    limit).  The dual scalings are infinite for gamma = 0, so the dual side
    requires gamma > 0.
    """
    k = np.arange(window_len)
    stage = np.power(float(gamma), window_len - 1 - k)
    with np.errstate(divide="ignore"):
        scalings = np.power(float(gamma), k + 1.0 - window_len)
    return stage, scalings


def rollout(iv, x0_hat, xi_hat):
    """Apply the window dynamics: returns (x_traj, zeta_hat)."""
    m_len = iv.window_len
    x = np.empty((m_len + 1, iv.n))
    zeta = np.empty((m_len, iv.m))
    x[0] = x0_hat
    for k in range(m_len):
        zeta[k] = iv.y_window[k] - iv.c_window[k] @ x[k]
        x[k + 1] = iv.a_window[k] @ x[k] + xi_hat[k]
    return x, zeta


def build_solution(inst, x0_hat, xi_hat, diagnostics=None):
    """Roll out decision variables into a full PrimalSolution."""
    x0_hat = np.asarray(x0_hat, dtype=float)
    xi_hat = np.asarray(xi_hat, dtype=float).reshape(inst.window_len, inst.iv.n)
    x_traj, zeta_hat = rollout(inst.iv, x0_hat, xi_hat)
    feasible = inst.xi_set.contains(xi_hat, TOL_FEAS) and inst.zeta_set.contains(zeta_hat, TOL_FEAS)
    cost = window_cost(
        inst.gamma, inst.Pinv, inst.Qinv, inst.Rinv,
        inst.iv.prior_estimate, x0_hat, xi_hat, zeta_hat,
    )
    return PrimalSolution(
        x0_hat=x0_hat,
        xi_hat=xi_hat,
        x_traj=x_traj,
        zeta_hat=zeta_hat,
        cost=cost,
        feasible=feasible,
        diagnostics=dict(diagnostics or {}),
    )


def window_cost(gamma, prior_weight_inv, Qinv, Rinv, prior_estimate, x0_hat, xi_hat, zeta_hat):
    """Evaluate the windowed cost directly from its pieces.

    Accepts gamma in [0, 1] so degenerate limits can be evaluated; instances
    themselves keep gamma < 1.
    """
    xi_hat = np.atleast_2d(xi_hat)
    zeta_hat = np.atleast_2d(zeta_hat)
    m_len = xi_hat.shape[0]
    stage, _ = discount_weights(gamma, m_len)
    d0 = np.asarray(x0_hat, dtype=float) - prior_estimate
    cost = float(gamma**m_len) * float(d0 @ prior_weight_inv @ d0)
    cost += float(stage @ np.einsum("ki,ij,kj->k", xi_hat, Qinv, xi_hat))
    cost += float(stage @ np.einsum("ki,ij,kj->k", zeta_hat, Rinv, zeta_hat))
    return float(cost)


def mhe_cost(inst, sol):
    """Windowed estimation cost of a solution; always nonnegative."""
    if sol.xi_hat.shape != (inst.window_len, inst.iv.n):
        raise DimensionMismatch(
            f"xi_hat shape {sol.xi_hat.shape} does not match window ({inst.window_len}, {inst.iv.n})"
        )
    if sol.zeta_hat.shape != (inst.window_len, inst.iv.m):
        raise DimensionMismatch("zeta_hat shape does not match the window")
    pinv = inst.Pinv
    return window_cost(
        inst.gamma, pinv, inst.Qinv, inst.Rinv, inst.iv.prior_estimate, sol.x0_hat, sol.xi_hat, sol.zeta_hat
    )


class _CondensedWindow:
    """Dense condensed form of one instance, shared by both solvers.

    S[k] maps the stacked decision vector z = (x0, xi_0..xi_{M-1}) to the
    rollout state x_k; H, q, r give cost(z) = 1/2 z'Hz + q'z + r; G, l, u
    collect the finite box rows (identity rows for xi, C_k S_k rows for
    zeta).
    """

    def __init__(self, inst):
        iv = inst.iv
        m_len, n, m = iv.window_len, iv.n, iv.m
        dim = n * (m_len + 1)
        stage, scalings = discount_weights(inst.gamma, m_len)

        S = np.zeros((m_len + 1, n, dim))
        S[0, :, :n] = np.eye(n)
        for k in range(m_len):
            S[k + 1] = iv.a_window[k] @ S[k]
            S[k + 1][:, n * (k + 1) : n * (k + 2)] += np.eye(n)

        Pinv = inst.Pinv
        gM = float(inst.gamma) ** m_len

        H = 2.0 * gM * S[0].T @ Pinv @ S[0]
        q = -2.0 * gM * S[0].T @ Pinv @ iv.prior_estimate
        r = gM * float(iv.prior_estimate @ Pinv @ iv.prior_estimate)
        for k in range(m_len):
            sl = slice(n * (k + 1), n * (k + 2))
            H[sl, sl] += 2.0 * stage[k] * inst.Qinv
            CS = iv.c_window[k] @ S[k]
            H += 2.0 * stage[k] * CS.T @ inst.Rinv @ CS
            q -= 2.0 * stage[k] * CS.T @ inst.Rinv @ iv.y_window[k]
            r += stage[k] * float(iv.y_window[k] @ inst.Rinv @ iv.y_window[k])
        H = 0.5 * (H + H.T)

        rows, lo, hi = [], [], []
        xi_keep = ~(np.isneginf(inst.xi_set.lower) & np.isposinf(inst.xi_set.upper))
        zeta_keep = ~(np.isneginf(inst.zeta_set.lower) & np.isposinf(inst.zeta_set.upper))
        for k in range(m_len):
            if xi_keep.any():
                sel = np.zeros((int(xi_keep.sum()), dim))
                for j, coord in enumerate(np.flatnonzero(xi_keep)):
                    sel[j, n * (k + 1) + coord] = 1.0
                rows.append(sel)
                lo.append(inst.xi_set.lower[xi_keep])
                hi.append(inst.xi_set.upper[xi_keep])
            if zeta_keep.any():
                CS = (iv.c_window[k] @ S[k])[zeta_keep]
                rows.append(CS)
                lo.append(iv.y_window[k][zeta_keep] - inst.zeta_set.upper[zeta_keep])
                hi.append(iv.y_window[k][zeta_keep] - inst.zeta_set.lower[zeta_keep])

        self.m_len, self.n, self.m, self.dim = m_len, n, m, dim
        self.S = S
        self.Pinv = Pinv
        self.stage = stage
        self.scalings = scalings
        self.H = H
        self.q = q
        self.r = r
        if rows:
            self.G = np.vstack(rows)
            self.l = np.concatenate(lo)
            self.u = np.concatenate(hi)
        else:
            self.G = np.zeros((0, dim))
            self.l = np.zeros(0)
            self.u = np.zeros(0)

    def cost_of(self, z):
        return 0.5 * float(z @ self.H @ z) + float(self.q @ z) + self.r

    def split(self, z):
        """Split a stacked decision vector into (x0_hat, xi_hat)."""
        n = self.n
        return z[:n], z[n:].reshape(self.m_len, n)


def _dual_value(H, q, G, l, u, y, hz=None):
    """Lagrangian dual value at multiplier y (H must be PD)."""
    lin = q + (G.T @ y if y.size else 0.0)
    try:
        zbar = np.linalg.solve(H, -lin)
    except np.linalg.LinAlgError:
        zbar, *_ = np.linalg.lstsq(H, -lin, rcond=None)
    val = 0.5 * float(zbar @ H @ zbar) + float(lin @ zbar)
    if y.size:
        bound = np.where(y > 0, u, l)
        active = y != 0.0
        if np.any(np.isinf(bound[active])):
            return -np.inf
        val -= float(y[active] @ bound[active])
    return val


def _polish(H, q, G, l, u, y, tol_sign=1e-11):
    """Active-set refinement from an operator-splitting iterate.

    Starts from the sign pattern of the multipliers and repeatedly fixes
    wrongly-signed multipliers and violated rows.  Returns (z, y, ok).
    """
    nrows = G.shape[0]
    low = y < -tol_sign
    up = y > tol_sign
    eq = l == u
    low = low & ~eq
    up = up & ~eq
    for _ in range(40 + 2 * nrows):
        active = low | up | eq
        na = int(active.sum())
        dim = H.shape[0]
        K = np.zeros((dim + na, dim + na))
        K[:dim, :dim] = H
        Ga = G[active]
        K[dim:, :dim] = Ga
        K[:dim, dim:] = Ga.T
        rhs = np.concatenate([-q, np.where(up, u, l)[active]])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        z = sol[:dim]
        nu = sol[dim:]
        y_new = np.zeros(nrows)
        y_new[active] = nu
        gz = G @ z
        drop_low = low & (y_new > tol_sign)
        drop_up = up & (y_new < -tol_sign)
        add_low = ~active & (gz < l - 1e-12)
        add_up = ~active & (gz > u + 1e-12)
        if not (drop_low.any() or drop_up.any() or add_low.any() or add_up.any()):
            return z, y_new, True
        low = (low & ~drop_low) | add_low
        up = (up & ~drop_up) | add_up
    return None, None, False


def solve_box_qp(H, q, G, l, u, *, sigma=1e-6, alpha=1.6, max_iter=100_000, trace=None):
    """Minimize 1/2 z'Hz + q'z subject to l <= Gz <= u.

    ADMM with over-relaxation and adaptive step, attempting an active-set
    polish at geometric milestones; returns (z, y, info) where info carries
    the duality gap, residuals and iteration count.  info["converged"] is
    False when no certified point was found within max_iter.
    """
    dim = H.shape[0]
    nrows = G.shape[0]
    if nrows == 0:
        z = np.linalg.solve(H, -q)
        return z, np.zeros(0), {"iterations": 0, "gap": 0.0, "violation": 0.0, "converged": True, "polished": False}

    rho = 1.0
    z = np.zeros(dim)
    s = np.clip(G @ z, l, u)
    y = np.zeros(nrows)
    GtG = G.T @ G
    chol = np.linalg.cholesky(H + sigma * np.eye(dim) + rho * GtG)
    next_polish = 40
    best = None

    def certify(z_c, y_c):
        f = 0.5 * float(z_c @ H @ z_c) + float(q @ z_c)
        gz = G @ z_c
        viol = float(np.maximum(np.maximum(l - gz, gz - u), 0.0).max(initial=0.0))
        gap = f - _dual_value(H, q, G, l, u, y_c)
        return f, viol, gap

    for it in range(1, max_iter + 1):
        rhs = sigma * z - q + G.T @ (rho * s - y)
        zt = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        st = G @ zt
        z = alpha * zt + (1.0 - alpha) * z
        s_rel = alpha * st + (1.0 - alpha) * s
        s = np.clip(s_rel + y / rho, l, u)
        y = y + rho * (s_rel - s)

        if it >= next_polish or it == max_iter:
            next_polish = int(next_polish * 2)
            zp, yp, ok = _polish(H, q, G, l, u, y)
            if ok:
                f, viol, gap = certify(zp, yp)
                if trace is not None:
                    trace.append((it, viol, f))
                if viol <= 1e-9 and gap <= GAP_RTOL * (1.0 + abs(f)):
                    return zp, yp, {
                        "iterations": it,
                        "gap": float(max(gap, 0.0)),
                        "violation": viol,
                        "converged": True,
                        "polished": True,
                    }
                if best is None or gap < best[3]:
                    best = (zp, yp, viol, gap)
            f, viol, gap = certify(z, y)
            if trace is not None:
                trace.append((it, viol, f))
            if viol <= 1e-9 and gap <= GAP_RTOL * (1.0 + abs(f)):
                return z, y, {
                    "iterations": it,
                    "gap": float(max(gap, 0.0)),
                    "violation": viol,
                    "converged": True,
                    "polished": False,
                }
            if best is None or gap < best[3]:
                best = (z.copy(), y.copy(), viol, gap)
            # rebalance the splitting step from the residual ratio
            r_prim = float(np.abs(G @ z - s).max(initial=0.0))
            r_dual = float(np.abs(H @ z + q + G.T @ y).max(initial=0.0))
            if r_prim > 10.0 * r_dual or r_dual > 10.0 * r_prim:
                rho_new = float(np.clip(rho * np.sqrt(max(r_prim, 1e-16) / max(r_dual, 1e-16)), 1e-4, 1e4))
                if rho_new / rho > 1.5 or rho / rho_new > 1.5:
                    rho = rho_new
                    chol = np.linalg.cholesky(H + sigma * np.eye(dim) + rho * GtG)

    zb, yb, viol, gap = best
    return zb, yb, {
        "iterations": max_iter,
        "gap": float(gap),
        "violation": float(viol),
        "converged": False,
        "polished": False,
    }


def solve_primal(inst, *, max_iter=100_000, trace=None):
    """Solve the windowed QP to a certified KKT point.

    Raises Infeasible when a phase-1 check shows the constraint set is
    empty, MaxIterations (carrying the best iterate) when the splitting
    iteration stalls.
    """
    w = inst.window
    z, y, info = solve_box_qp(w.H, w.q, w.G, w.l, w.u, max_iter=max_iter, trace=trace)
    x0_hat, xi_hat = w.split(z)
    diagnostics = {
        "iterations": info["iterations"],
        "gap": info["gap"],
        "violation": info["violation"],
        "polished": info.get("polished", False),
        "multipliers": y,
    }
    sol = build_solution(inst, x0_hat, xi_hat, diagnostics)
    if not info["converged"]:
        feasible, _ = phase1_feasible(inst)
        if not feasible:
            raise Infeasible("phase-1 check found no feasible point for this window")
        raise MaxIterations(
            f"splitting solver stalled after {info['iterations']} iterations",
            best=sol,
            diagnostics=diagnostics,
        )
    return sol


def phase1_feasible(inst, max_iter=5000, tol=1e-9):
    """Search for a feasible (x0, xi) pair by driving box violations to zero.

    Minimizes the summed squared distance of the constraint rows to their
    box, a smooth convex function whose minimum is zero exactly when the
    window is feasible.  Returns (True, (x0_hat, xi_hat)) or (False, None).
    """
    w = inst.window
    if w.G.shape[0] == 0:
        x0_hat, xi_hat = w.split(np.zeros(w.dim))
        return True, (x0_hat, xi_hat)
    z = np.zeros(w.dim)
    step = 1.0 / max(float(np.linalg.norm(w.G, 2)) ** 2, 1e-12)
    prev_z, prev_g = None, None
    for _ in range(max_iter):
        gz = w.G @ z
        resid = gz - np.clip(gz, w.l, w.u)
        if np.abs(resid).max(initial=0.0) <= tol:
            x0_hat, xi_hat = w.split(z)
            return True, (x0_hat, xi_hat)
        grad = w.G.T @ resid
        if prev_z is not None:
            dz = z - prev_z
            dg = grad - prev_g
            denom = float(dg @ dg)
            if denom > 1e-30:
                step = float(np.clip(abs(dz @ dg) / denom, 1e-6, 1e6))
        prev_z, prev_g = z.copy(), grad.copy()
        z = z - step * grad
    gz = w.G @ z
    if np.abs(gz - np.clip(gz, w.l, w.u)).max(initial=0.0) <= TOL_FEAS:
        x0_hat, xi_hat = w.split(z)
        return True, (x0_hat, xi_hat)
    return False, None


def _as_weight(P):
    return P.P if isinstance(P, ArrivalCost) else np.asarray(P, dtype=float)


def riccati_update(P, A, C, Q, R):
    """One predictive Riccati step for the arrival-cost weight.

    P+ = Q + A P A' - A P C' (R + C P C')^-1 C P A', symmetrized.
    """
    Pm = require_spd(_as_weight(P), "P")
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    innov = np.asarray(R, dtype=float) + C @ Pm @ C.T
    if np.linalg.cond(innov) > 1e14:
        raise SingularInnovation("innovation covariance R + C P C' is numerically singular")
    APC = A @ Pm @ C.T
    X = np.asarray(Q, dtype=float) + A @ Pm @ A.T - APC @ np.linalg.solve(innov, APC.T)
    X = 0.5 * (X + X.T)
    if isinstance(P, ArrivalCost):
        return ArrivalCost(require_spd(X, "updated P"), t=P.t + 1)
    return require_spd(X, "updated P")


def kalman_step(x_hat, P, y, A, C, Q, R, gamma=1.0):
    """Prediction-form Kalman step returning (x_next, P_next).

    With gamma < 1 the prior weight is inflated to P/gamma, which makes the
    step coincide with the unconstrained one-step windowed problem; the
    default gamma = 1 is the textbook filter.
    """
    Pm = _as_weight(P)
    x_hat = np.asarray(x_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    P_eff = Pm / float(gamma)
    innov = np.asarray(R, dtype=float) + C @ P_eff @ C.T
    if np.linalg.cond(innov) > 1e14:
        raise SingularInnovation("innovation covariance R + C P C' is numerically singular")
    gain = P_eff @ C.T @ np.linalg.inv(innov)
    x_next = A @ (x_hat + gain @ (y - C @ x_hat))
    P_next = riccati_update(P, A, C, Q, R)
    return x_next, P_next


def stationary_arrival_weight(model, Q, R, P0=None, max_iter=10_000, tol=1e-12):
    """Iterate the Riccati recursion of an LTI model to its fixed point."""
    if not model.lti_flag:
        raise DomainError("stationary weight is defined for LTI models only")
    P = np.eye(model.n) if P0 is None else np.asarray(P0, dtype=float)
    for _ in range(max_iter):
        P_next = riccati_update(P, model.a(0), model.c(0), Q, R)
        if np.linalg.norm(P_next - P, "fro") <= tol:
            return P_next
        P = P_next
    raise MaxIterations("Riccati iteration did not converge", best=P)
