"""Stability certification of the windowed estimator.

The machinery has three parts: a one-step linear matrix inequality that
certifies an incremental input/output-to-state Lyapunov function built
from the arrival weights, the contraction quantities lambda_max and
rho = (4 lambda_max)^{1/M} gamma derived from generalized eigenvalues of
the realized weight sequence, and a closed-form per-step error bound (in
the arrival-weighted norm) that any Delta-suboptimal estimator must obey.
`audit_trajectory` checks a run's realized errors against that bound.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DomainError
from .model import require_spd

LMI_TOL = 1e-10


def weighted_norm(v, W):
    """sqrt(v' W v), the weighted norm with matrix W."""
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(max(v @ W @ v, 0.0)))


def generalized_eig_max(P2, P1):
    """Largest generalized eigenvalue of the pencil (P2, P1), both SPD."""
    P2 = require_spd(P2, "P2")
    P1 = require_spd(P1, "P1")
    L = np.linalg.cholesky(P1)
    Li = np.linalg.inv(L)
    return float(np.linalg.eigvalsh(Li @ P2 @ Li.T).max())


def lambda_max_over_sequence(P_seq, window_cap):
    """Worst generalized eigenvalue across the realized weight pairs.

    Pairs are (P_i^{-1}, P_{i-M}^{-1}) once the window has filled and
    (P_i^{-1}, P_0^{-1}) during start-up.
    """
    inv = [np.linalg.inv(np.asarray(P, dtype=float)) for P in P_seq]
    worst = -np.inf
    for i in range(len(inv)):
        ref = inv[i - window_cap] if i >= window_cap else inv[0]
        worst = max(worst, generalized_eig_max(inv[i], ref))
    return float(worst)


def _lmi_block(A, C, Pinv, Qinv, Rinv, gamma):
    n = A.shape[0]
    m = C.shape[0]
    B = np.hstack([np.eye(n), np.zeros((n, m))])
    D = np.hstack([np.zeros((m, n)), np.eye(m)])
    Qbar = np.zeros((n + m, n + m))
    Qbar[:n, :n] = Qinv
    M11 = A.T @ Pinv @ A - gamma * Pinv - 2.0 * C.T @ Rinv @ C
    M12 = A.T @ Pinv @ B - 2.0 * C.T @ Rinv @ D
    M22 = B.T @ Pinv @ B - Qbar - 2.0 * D.T @ Rinv @ D
    blk = np.block([[M11, M12], [M12.T, M22]])
    return 0.5 * (blk + blk.T)


def lmi_check(model, Q, R, P_seq, gamma):
    """Assemble the stability block for every weight in the sequence.

    Returns (ok, max_eig, worst_block): ok is True when every block's
    largest eigenvalue is within the numerical slack of zero.
    """
    if not model.lti_flag:
        raise DimensionMismatch("the one-step block check expects an LTI model")
    Qinv = np.linalg.inv(np.asarray(Q, dtype=float))
    Rinv = np.linalg.inv(np.asarray(R, dtype=float))
    A, C = model.a(0), model.c(0)
    worst_eig = -np.inf
    worst_block = None
    for P in P_seq:
        Pinv = np.linalg.inv(np.asarray(P, dtype=float))
        blk = _lmi_block(A, C, 0.5 * (Pinv + Pinv.T), Qinv, Rinv, gamma)
        top = float(np.linalg.eigvalsh(blk).max())
        if top > worst_eig:
            worst_eig = top
            worst_block = blk
    return worst_eig <= LMI_TOL, worst_eig, worst_block


def rho_and_min_horizon(lambda_max, gamma, window_cap):
    """Contraction rate and the smallest horizon that certifies it.

    rho = (4 lambda_max)^{1/M} * gamma; the horizon condition is the strict
    inequality M > -ln(4 lambda_max)/ln(gamma), hence floor + 1.
    """
    if not (0.0 < gamma < 1.0):
        raise DomainError(f"gamma must lie in (0, 1), got {gamma}")
    if lambda_max < 0.25:
        raise DomainError(f"lambda_max must be >= 1/4, got {lambda_max}")
    rho = (4.0 * lambda_max) ** (1.0 / window_cap) * gamma
    threshold = -np.log(4.0 * lambda_max) / np.log(gamma)
    min_horizon = int(np.floor(threshold)) + 1
    satisfied = window_cap >= min_horizon
    return float(rho), min_horizon, bool(satisfied)


@dataclass(frozen=True)
class StabilityCert:
    """Contraction quantities and block-inequality verdict for one setup."""

    lambda_max: float
    rho: float
    min_horizon: int
    satisfied: bool
    lmi_ok: bool
    lmi_max_eig: float
    block_matrix: np.ndarray = field(compare=False)

    @property
    def hypotheses_hold(self):
        return self.lmi_ok and self.satisfied


def build_stability_cert(model, Q, R, P_seq, gamma, window_cap):
    """Evaluate the LMI and contraction quantities over a realized weight
    sequence."""
    lam = lambda_max_over_sequence(P_seq, window_cap)
    rho, min_h, satisfied = rho_and_min_horizon(lam, gamma, window_cap)
    ok, top, blk = lmi_check(model, Q, R, P_seq, gamma)
    return StabilityCert(
        lambda_max=lam,
        rho=rho,
        min_horizon=min_h,
        satisfied=satisfied,
        lmi_ok=ok,
        lmi_max_eig=top,
        block_matrix=blk,
    )


def error_bound(t, initial_error, xi_history, rho, window_cap, delta, P0, Q):
    """Per-step upper bound on the arrival-weighted estimation error.

    2 sqrt(rho)^t ||e0||_{P0^-1} + sqrt(2 Delta / (1 - rho^M))
    + 2 sqrt(1/(1 - sqrt(rho))) * max_i rho^{i/4} ||xi_{t-i-1}||_{Q^-1}.
    """
    if rho >= 1.0:
        raise DomainError(f"the bound requires rho < 1, got {rho}")
    P0inv = np.linalg.inv(np.asarray(P0, dtype=float))
    Qinv = np.linalg.inv(np.asarray(Q, dtype=float))
    term0 = 2.0 * np.sqrt(rho) ** t * weighted_norm(initial_error, P0inv)
    term_delta = np.sqrt(2.0 * delta / (1.0 - rho**window_cap))
    noise_term = 0.0
    for i in range(t):
        w = rho ** (i / 4.0) * weighted_norm(xi_history[t - i - 1], Qinv)
        noise_term = max(noise_term, w)
    term_noise = 2.0 * np.sqrt(1.0 / (1.0 - np.sqrt(rho))) * noise_term
    return float(term0 + term_delta + term_noise)


@dataclass(frozen=True)
class AuditRow:
    t: int
    weighted_error: float
    bound: float
    margin: float
    provenance: str


@dataclass(frozen=True)
class AuditReport:
    passed: bool
    rows: tuple
    worst_margin: float

    @property
    def violations(self):
        return tuple(r for r in self.rows if r.margin < 0.0)


def save_audit_report(report, path):
    """Write the per-step audit rows as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "weighted_error", "bound", "margin", "provenance"])
        for row in report.rows:
            writer.writerow([row.t, row.weighted_error, row.bound, row.margin, row.provenance])


def audit_trajectory(traj, estimates, cert, delta, weight_seq, P0, Q, window_cap, provenance=None):
    """Compare each step's weighted error against the stability bound.

    estimates[t] is the emitted estimate of x_t (index 0 being the initial
    prior); weight_seq[tau] is the arrival weight the estimator carried at
    time tau, which also weights the error at the step that consumed it.
    The audit fails when any step's error exceeds its bound.
    """
    if not cert.satisfied:
        raise DomainError("audit requires the horizon condition (rho < 1) to hold")
    estimates = np.asarray(estimates, dtype=float)
    T = traj.states.shape[0] - 1
    if estimates.shape[0] < T + 1:
        raise DimensionMismatch("need one estimate per state (including the initial prior)")
    initial_error = estimates[0] - traj.states[0]
    rows = []
    worst = np.inf
    for t in range(1, T + 1):
        prior_time = max(t - window_cap, 0)
        Winv = np.linalg.inv(np.asarray(weight_seq[prior_time], dtype=float))
        err = weighted_norm(estimates[t] - traj.states[t], Winv)
        bound = error_bound(t, initial_error, traj.process_noise, cert.rho, window_cap, delta, P0, Q)
        margin = bound - err
        worst = min(worst, margin)
        rows.append(
            AuditRow(
                t=t,
                weighted_error=err,
                bound=bound,
                margin=margin,
                provenance="" if provenance is None else str(provenance[t - 1]),
            )
        )
    return AuditReport(passed=bool(worst >= 0.0), rows=tuple(rows), worst_margin=float(worst))
