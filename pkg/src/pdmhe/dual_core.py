"""Explicit dual of the windowed estimation QP.

With multipliers lambda (dynamics) and mu (measurements), stationarity of
the Lagrangian pins lambda to a backward recursion driven by mu, leaving an
unconstrained concave maximization in mu alone.  The inner minimizations
have closed forms: the initial-state minimizer is affine in the
multipliers, and the noise minimizers are half-argument box projections of
scaled multipliers.  Substituting them yields the dual function G(mu),
which lower-bounds every feasible primal cost (weak duality) and touches
the optimum under strict feasibility.

The dual gradient is the measurement-equation residual of the primal
candidate recovered from the current multipliers, which is what gradient
ascent drives to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DomainError, MaxIterations
from .model import BoxSet, _ro
from . import mhe_core


@dataclass(frozen=True)
class DualSolution:
    """Free multipliers mu, derived multipliers lambda, and the dual value."""

    mu: np.ndarray
    lam: np.ndarray
    value: float
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mu", _ro(np.atleast_2d(self.mu)))
        object.__setattr__(self, "lam", _ro(np.atleast_2d(self.lam)))


@dataclass(frozen=True)
class ScaledSets:
    """Images of the noise boxes under Q^{-1/2} and R^{-1/2}.

    Only diagonal covariances keep an axis-aligned box axis-aligned, so a
    non-diagonal covariance is rejected unless its box is the whole space
    (whose image is again the whole space).
    """

    xi_tilde: BoxSet
    zeta_tilde: BoxSet

    @classmethod
    def from_noise(cls, Q, R, xi_set, zeta_set):
        return cls(_scale_box(Q, xi_set, "Q"), _scale_box(R, zeta_set, "R"))


def _scale_box(cov, box, name):
    cov = np.asarray(cov, dtype=float)
    if box.is_free:
        return box
    offdiag = cov - np.diag(np.diag(cov))
    if np.abs(offdiag).max(initial=0.0) > 1e-12 * max(1.0, float(np.abs(cov).max())):
        raise DomainError(
            f"bounded boxes require a diagonal {name}: the scaled set of a box "
            "under a rotating square root is not axis-aligned"
        )
    root = np.sqrt(np.diag(cov))
    return BoxSet(box.lower / root, box.upper / root)


def project_half(z, box):
    """argmin over the box of ||x - z/2||^2, i.e. clamp(z/2) componentwise."""
    return box.project(np.asarray(z, dtype=float) / 2.0)


def adjoint_lambda(mu, a_window, c_window):
    """Backward multiplier recursion: lambda_{M-1} = 0 and
    lambda_{k-1} = A_k' lambda_k + C_k' mu_k for k = M-1 .. 1."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    a_window = np.asarray(a_window, dtype=float)
    c_window = np.asarray(c_window, dtype=float)
    m_len = mu.shape[0]
    if a_window.shape[0] != m_len or c_window.shape[0] != m_len:
        raise DimensionMismatch("mu and window matrices must have matching length")
    lam = np.zeros((m_len, a_window.shape[-1]))
    for k in range(m_len - 1, 0, -1):
        lam[k - 1] = a_window[k].T @ lam[k] + c_window[k].T @ mu[k]
    return lam


class _DualGeometry:
    """Window-shape constants shared by every instance with the same
    matrices, discount, and boxes (the runtime re-solves such windows every
    step, so these are cached by value)."""

    def __init__(self, gamma, a_window, c_window, Q, R, xi_set, zeta_set):
        m_len = a_window.shape[0]
        n = a_window.shape[-1]
        m = c_window.shape[-2]
        self.m_len, self.n, self.m = m_len, n, m
        self.stage, self.scalings = mhe_core.discount_weights(gamma, m_len)
        gM = float(gamma) ** m_len
        self.quarter = 1.0 / (4.0 * gM)
        self.half = 1.0 / (2.0 * gM)
        self.sqrtQ = _sym_sqrt(Q)
        self.sqrtR = _sym_sqrt(R)
        self.sets = ScaledSets.from_noise(Q, R, xi_set, zeta_set)
        # lambda is linear in mu; stack the recursion into a single matrix
        basis = np.zeros((m_len, m, m_len * m))
        for k in range(m_len):
            for j in range(m):
                basis[k, j, k * m + j] = 1.0
        lam = np.zeros((m_len, n, m_len * m))
        for k in range(m_len - 1, 0, -1):
            lam[k - 1] = a_window[k].T @ lam[k] + c_window[k].T @ basis[k]
        self.lam_map = lam.reshape(m_len * n, m_len * m)
        self.A0 = a_window[0]
        self.C0 = c_window[0]


_GEOMETRY_CACHE = {}


def _geometry(inst):
    iv = inst.iv
    key = (
        float(inst.gamma),
        iv.a_window.tobytes(),
        iv.c_window.tobytes(),
        inst.Q.tobytes(),
        inst.R.tobytes(),
        inst.xi_set.lower.tobytes(),
        inst.xi_set.upper.tobytes(),
        inst.zeta_set.lower.tobytes(),
        inst.zeta_set.upper.tobytes(),
    )
    geom = _GEOMETRY_CACHE.get(key)
    if geom is None:
        geom = _DualGeometry(inst.gamma, iv.a_window, iv.c_window, inst.Q, inst.R, inst.xi_set, inst.zeta_set)
        if len(_GEOMETRY_CACHE) > 64:
            _GEOMETRY_CACHE.clear()
        _GEOMETRY_CACHE[key] = geom
    return geom


class _DualWorkspace:
    """Per-instance data on top of the shared window geometry."""

    def __init__(self, inst):
        if inst.gamma <= 0.0:
            raise DomainError("the dual formulation requires gamma > 0")
        geom = _geometry(inst)
        self.m_len, self.n, self.m = geom.m_len, geom.n, geom.m
        self.stage, self.scalings = geom.stage, geom.scalings
        self.quarter, self.half = geom.quarter, geom.half
        self.sqrtQ, self.sqrtR = geom.sqrtQ, geom.sqrtR
        self.sets = geom.sets
        self.lam_map = geom.lam_map
        self.A0, self.C0 = geom.A0, geom.C0
        iv = inst.iv
        self.P = iv.prior_weight
        self.prior = iv.prior_estimate
        self.y = iv.y_window
        self.c_window = iv.c_window
        self._inst = inst
        self._S = None

    @property
    def S(self):
        if self._S is None:
            self._S = self._inst.window.S
        return self._S

    def lambdas(self, mu_flat):
        return (self.lam_map @ mu_flat).reshape(self.m_len, self.n)

    def pieces(self, mu_flat):
        """Shared intermediates: lambda, arrival vector, projections."""
        mu2 = mu_flat.reshape(self.m_len, self.m)
        lam = self.lambdas(mu_flat)
        v = self.A0.T @ lam[0] + self.C0.T @ mu2[0]
        c = self.scalings[:, None] * (lam @ self.sqrtQ)
        d = self.scalings[:, None] * (mu2 @ self.sqrtR)
        p_xi = np.clip(c / 2.0, self.sets.xi_tilde.lower, self.sets.xi_tilde.upper)
        p_ze = np.clip(d / 2.0, self.sets.zeta_tilde.lower, self.sets.zeta_tilde.upper)
        return mu2, lam, v, c, d, p_xi, p_ze


def _sym_sqrt(mat):
    mat = np.asarray(mat, dtype=float)
    offdiag = mat - np.diag(np.diag(mat))
    if np.abs(offdiag).max(initial=0.0) <= 1e-12 * max(1.0, float(np.abs(mat).max())):
        return np.diag(np.sqrt(np.diag(mat)))
    w, V = np.linalg.eigh(mat)
    return (V * np.sqrt(w)) @ V.T


def _ws(inst):
    ws = inst.__dict__.get("_dual_ws")
    if ws is None:
        ws = _DualWorkspace(inst)
        inst.__dict__["_dual_ws"] = ws
    return ws


def dual_function(mu, inst):
    """Dual value G at multipliers mu (lambda derived by the recursion).

    Weak duality holds by construction: G is the infimum of the Lagrangian
    with the closed-form minimizers substituted, so it never exceeds the
    cost of any feasible primal point.
    """
    ws = _ws(inst)
    mu_flat = np.asarray(mu, dtype=float).ravel()
    if mu_flat.size != ws.m_len * ws.m:
        raise DimensionMismatch(f"mu must have {ws.m_len * ws.m} entries, got {mu_flat.size}")
    mu2, _, v, c, d, p_xi, p_ze = ws.pieces(mu_flat)
    h_xi = (p_xi * p_xi).sum(axis=1) - (c * p_xi).sum(axis=1)
    h_ze = (p_ze * p_ze).sum(axis=1) - (d * p_ze).sum(axis=1)
    value = (
        -ws.quarter * float(v @ ws.P @ v)
        - float(v @ ws.prior)
        + float((mu2 * ws.y).sum())
        + float((ws.stage * (h_xi + h_ze)).sum())
    )
    return value


def _decisions(ws, v, p_xi):
    """Closed-form primal candidates for the current multipliers."""
    x0_hat = ws.half * (ws.P @ v) + ws.prior
    xi_hat = p_xi @ ws.sqrtQ
    return x0_hat, xi_hat


def dual_gradient(mu, inst):
    """Gradient of G: the measurement residual of the recovered primal."""
    ws = _ws(inst)
    mu_flat = np.asarray(mu, dtype=float).ravel()
    _, _, v, _, _, p_xi, p_ze = ws.pieces(mu_flat)
    x0_hat, xi_hat = _decisions(ws, v, p_xi)
    z = np.concatenate([x0_hat, xi_hat.ravel()])
    states = np.einsum("knd,d->kn", ws.S[:-1], z)
    zeta_proj = p_ze @ ws.sqrtR
    resid = ws.y - np.einsum("kmn,kn->km", ws.c_window, states) - zeta_proj
    return resid.ravel()


def recover_primal(dual, inst):
    """Map dual multipliers to the primal candidate they encode.

    The initial state is affine in the arrival vector, the process noise
    comes from the scaled projections, and the rest of the solution is the
    rollout of those decisions.  At a dual optimum of a strictly feasible
    instance this is the primal optimum.
    """
    ws = _ws(inst)
    mu_flat = np.asarray(dual.mu, dtype=float).ravel()
    _, _, v, _, _, p_xi, _ = ws.pieces(mu_flat)
    x0_hat, xi_hat = _decisions(ws, v, p_xi)
    return mhe_core.build_solution(inst, x0_hat, xi_hat, {"source": "dual-recovery"})


def solve_dual(inst, mu0=None, tol=1e-7, max_iter=20_000, trace=None):
    """Maximize G by gradient ascent with Armijo backtracking.

    The backtracking halves the step with slope factor 1e-4; the trial step
    starts at 1 and is re-estimated each iteration by the Barzilai-Borwein
    spectral formula (with a short non-monotone memory), which cuts the
    iteration count on ill-conditioned windows by orders of magnitude.
    Termination is a gradient norm below tol * (1 + |G|).  Raises
    MaxIterations carrying the best iterate when the cap is hit.
    """
    ws = _ws(inst)
    mu = np.zeros(ws.m_len * ws.m) if mu0 is None else np.asarray(mu0, dtype=float).ravel().copy()
    value = dual_function(mu, inst)
    grad = dual_gradient(mu, inst)
    alpha_trial = 1.0
    recent = [value]
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(grad))
        if trace is not None:
            trace.append((it, value, gnorm))
        if gnorm <= tol * (1.0 + abs(value)):
            return _pack_dual(ws, mu, value, it, gnorm)
        slope = 1e-4 * gnorm * gnorm
        reference = min(recent)
        alpha = alpha_trial
        accepted = False
        for _ in range(80):
            cand = mu + alpha * grad
            cand_val = dual_function(cand, inst)
            if cand_val >= reference + alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # flat to float precision: best point so far is the answer
            return _pack_dual(ws, mu, value, it, gnorm)
        cand_grad = dual_gradient(cand, inst)
        s = cand - mu
        yv = grad - cand_grad
        sy = float(s @ yv)
        alpha_trial = float(np.clip((s @ s) / sy, 1e-8, 1e8)) if sy > 1e-30 else 1.0
        mu, value, grad = cand, cand_val, cand_grad
        recent.append(value)
        if len(recent) > 10:
            recent.pop(0)
    best = _pack_dual(ws, mu, value, max_iter, float(np.linalg.norm(grad)))
    raise MaxIterations(
        f"dual ascent did not reach tolerance within {max_iter} iterations",
        best=best,
        diagnostics=best.diagnostics,
    )


def _pack_dual(ws, mu_flat, value, iterations, grad_norm):
    mu2 = mu_flat.reshape(ws.m_len, ws.m)
    lam = ws.lambdas(mu_flat)
    return DualSolution(
        mu=mu2,
        lam=lam,
        value=float(value),
        diagnostics={"iterations": iterations, "grad_norm": grad_norm},
    )
