"""Linear system model, constraint boxes, truncated-Gaussian noise, and
window construction for moving horizon estimation.

The estimation problem is posed on the stochastic linear system

    x_{t+1} = A_t x_t + xi_t,        xi_t in Xi_xi
    y_t     = C_t x_t + zeta_t,      zeta_t in Xi_zeta

where both noise sequences follow zero-mean Gaussians restricted to convex
axis-aligned boxes (orthants are boxes with infinite bounds).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import AcceptanceTooLow, DimensionMismatch, NotSPD, WindowUnderflow

SPD_EIG_TOL = 1e-12

# consecutive rejections before the sampler gives up on a box
MAX_REJECTIONS = 10_000


def _ro(a, dtype=float):
    """Return a read-only float array copy (types here are immutable)."""
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


# identity memo of recently validated arrays (runtime loops revalidate the
# same covariance objects every step)
_SPD_SEEN = {}


def require_spd(mat, name="matrix", tol=SPD_EIG_TOL, sym_tol=1e-12):
    """Validate symmetry and positive definiteness; return the array.

    Definiteness is checked as min-eigenvalue > tol via a Cholesky
    factorization of mat - tol*I.
    """
    mat = np.asarray(mat, dtype=float)
    if _SPD_SEEN.get(id(mat)) is mat:
        return mat
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise NotSPD(f"{name} has non-finite entries")
    scale = max(1.0, float(np.abs(mat).max()))
    if np.abs(mat - mat.T).max() > sym_tol * scale:
        raise NotSPD(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(mat - tol * np.eye(mat.shape[0]))
    except np.linalg.LinAlgError:
        raise NotSPD(f"{name} is not positive definite") from None
    if len(_SPD_SEEN) > 256:
        _SPD_SEEN.clear()
    _SPD_SEEN[id(mat)] = mat
    return mat


@dataclass(frozen=True)
class SystemModel:
    """Dynamics and measurement maps, constant (LTI) or per-step (LTV).

    For an LTI model pass single (n, n) and (m, n) matrices.  For an LTV
    model pass stacked arrays of shape (T, n, n) and (T, m, n) indexed by
    absolute time.
    """

    dynamics: np.ndarray
    measurement: np.ndarray
    lti_flag: bool = field(init=False)
    n: int = field(init=False)
    m: int = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.dynamics, dtype=float)
        c = np.asarray(self.measurement, dtype=float)
        lti = a.ndim == 2
        if lti != (c.ndim == 2):
            raise DimensionMismatch("dynamics and measurement must both be constant or both sequences")
        n = a.shape[-1]
        m = c.shape[-2]
        if a.shape[-2:] != (n, n) or c.shape[-1] != n:
            raise DimensionMismatch(f"incompatible shapes A{a.shape}, C{c.shape}")
        if not lti and a.shape[0] != c.shape[0]:
            raise DimensionMismatch("LTV dynamics and measurement sequences differ in length")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(c))):
            raise DimensionMismatch("system matrices must be finite")
        object.__setattr__(self, "dynamics", _ro(a))
        object.__setattr__(self, "measurement", _ro(c))
        object.__setattr__(self, "lti_flag", lti)
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "m", int(m))

    def a(self, t):
        """Dynamics matrix A_t."""
        return self.dynamics if self.lti_flag else self.dynamics[t]

    def c(self, t):
        """Measurement matrix C_t."""
        return self.measurement if self.lti_flag else self.measurement[t]


@dataclass(frozen=True)
class BoxSet:
    """Axis-aligned box {z : lower <= z <= upper}; bounds may be infinite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionMismatch(f"box bounds must be equal-length vectors, got {lo.shape}, {hi.shape}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError("box is empty: lower > upper on some coordinate")
        object.__setattr__(self, "lower", _ro(lo))
        object.__setattr__(self, "upper", _ro(hi))

    @property
    def dim(self):
        return self.lower.shape[0]

    @property
    def is_free(self):
        """True when no bound is finite (the box is the whole space)."""
        return bool(np.all(np.isneginf(self.lower)) and np.all(np.isposinf(self.upper)))

    @property
    def is_point(self):
        return bool(np.all(self.lower == self.upper))

    def project(self, z):
        """Euclidean projection (componentwise clamp)."""
        return np.clip(z, self.lower, self.upper)

    def contains(self, z, tol=0.0):
        z = np.asarray(z, dtype=float)
        return bool(np.all(z >= self.lower - tol) and np.all(z <= self.upper + tol))

    def violation(self, z):
        """Largest per-coordinate distance outside the box (0 if inside)."""
        z = np.asarray(z, dtype=float)
        return float(np.maximum(np.maximum(self.lower - z, z - self.upper), 0.0).max(initial=0.0))

    @classmethod
    def free(cls, dim):
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @classmethod
    def nonnegative(cls, dim):
        return cls(np.zeros(dim), np.full(dim, np.inf))

    @classmethod
    def nonpositive(cls, dim):
        return cls(np.full(dim, -np.inf), np.zeros(dim))

    @classmethod
    def point(cls, value):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(value, value)


@dataclass(frozen=True)
class NoiseSpec:
    """Covariances and support boxes of the truncated-Gaussian noise."""

    Q: np.ndarray
    R: np.ndarray
    xi_set: BoxSet
    zeta_set: BoxSet

    def __post_init__(self):
        q = require_spd(self.Q, "Q")
        r = require_spd(self.R, "R")
        if self.xi_set.dim != q.shape[0]:
            raise DimensionMismatch("xi_set dimension does not match Q")
        if self.zeta_set.dim != r.shape[0]:
            raise DimensionMismatch("zeta_set dimension does not match R")
        object.__setattr__(self, "Q", _ro(q))
        object.__setattr__(self, "R", _ro(r))


@dataclass(frozen=True)
class Trajectory:
    """A simulated rollout; states has one more row than the other fields."""

    states: np.ndarray
    measurements: np.ndarray
    process_noise: np.ndarray
    measurement_noise: np.ndarray
    seed: int

    def __post_init__(self):
        for name in ("states", "measurements", "process_noise", "measurement_noise"):
            object.__setattr__(self, name, _ro(getattr(self, name)))
        if self.states.shape[0] != self.measurements.shape[0] + 1:
            raise DimensionMismatch("states must have exactly one more row than measurements")

    @property
    def horizon(self):
        return self.measurements.shape[0]


@dataclass(frozen=True)
class InfoVector:
    """Everything that defines one windowed estimation problem at time t.

    The window covers absolute times t-M .. t-1; ``window_cap`` is the
    configured maximum length M_t (the effective M = min(t, M_t) grows
    from 1 at start-up until it saturates).
    """

    y_window: np.ndarray
    a_window: np.ndarray
    c_window: np.ndarray
    prior_weight: np.ndarray
    prior_estimate: np.ndarray
    t: int
    window_len: int
    window_cap: int

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y_window, dtype=float))
        a = np.asarray(self.a_window, dtype=float)
        c = np.asarray(self.c_window, dtype=float)
        m_len = int(self.window_len)
        if not (1 <= m_len <= int(self.window_cap)):
            raise ValueError(f"window_len {m_len} outside [1, {self.window_cap}]")
        if y.shape[0] != m_len or a.shape[0] != m_len or c.shape[0] != m_len:
            raise DimensionMismatch("window arrays must all have window_len rows")
        p = require_spd(self.prior_weight, "prior_weight")
        xbar = np.asarray(self.prior_estimate, dtype=float)
        if xbar.shape != (a.shape[-1],):
            raise DimensionMismatch("prior_estimate dimension does not match dynamics")
        object.__setattr__(self, "y_window", _ro(y))
        object.__setattr__(self, "a_window", _ro(a))
        object.__setattr__(self, "c_window", _ro(c))
        object.__setattr__(self, "prior_weight", _ro(p))
        object.__setattr__(self, "prior_estimate", _ro(xbar))

    @property
    def n(self):
        return self.a_window.shape[-1]

    @property
    def m(self):
        return self.c_window.shape[-2]

    @cached_property
    def lti_like(self):
        """True when all window matrices are constant (encoding stays small)."""
        return bool(
            np.all(self.a_window == self.a_window[0]) and np.all(self.c_window == self.c_window[0])
        )


def sample_truncated_gaussian(cov, box, rng, max_rejections=MAX_REJECTIONS):
    """Draw one sample of N(0, cov) conditioned on an axis-aligned box.

    Plain rejection sampling: propose from the untruncated Gaussian until a
    proposal lands in the box.  Exact (no normalization constant needed) and
    deterministic given the generator state.  A box collapsed to a single
    point is returned directly, which gives noise-free rollouts a useful
    degenerate case.

    Raises
    ------
    AcceptanceTooLow
        after ``max_rejections`` consecutive rejections, signalling a box
        with near-zero probability mass.
    """
    cov = require_spd(cov, "cov")
    if box.dim != cov.shape[0]:
        raise DimensionMismatch("box dimension does not match covariance")
    if box.is_point:
        return box.lower.copy()
    chol = np.linalg.cholesky(cov)
    for _ in range(max_rejections):
        z = chol @ rng.standard_normal(cov.shape[0])
        if box.contains(z):
            return z
    raise AcceptanceTooLow(
        f"no accepted draw after {max_rejections} proposals; box mass is too small"
    )


def simulate_trajectory(model, noise, x0, T, seed):
    """Roll the system forward T steps under truncated-Gaussian noise.

    Reproducible: the same seed yields a bit-identical Trajectory.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n,) or not np.all(np.isfinite(x0)):
        raise DimensionMismatch("x0 must be a finite n-vector")
    rng = np.random.default_rng(seed)
    states = np.empty((T + 1, model.n))
    measurements = np.empty((T, model.m))
    xi = np.empty((T, model.n))
    zeta = np.empty((T, model.m))
    states[0] = x0
    for t in range(T):
        xi[t] = sample_truncated_gaussian(noise.Q, noise.xi_set, rng)
        zeta[t] = sample_truncated_gaussian(noise.R, noise.zeta_set, rng)
        measurements[t] = model.c(t) @ states[t] + zeta[t]
        states[t + 1] = model.a(t) @ states[t] + xi[t]
    return Trajectory(states, measurements, xi, zeta, seed=int(seed))


def build_info_vector(measurements, model, prior_estimate, prior_weight, t, window_cap):
    """Assemble the information vector for the window ending at time t.

    The effective window length is M = min(t, window_cap): the window grows
    from the initial time during start-up and saturates afterwards.  The
    prior pair must refer to time t - M.
    """
    if t < 1:
        raise WindowUnderflow("no window can be formed at t = 0")
    measurements = np.atleast_2d(np.asarray(measurements, dtype=float))
    if measurements.shape[0] < t:
        raise DimensionMismatch(f"need measurements up to time {t - 1}, got {measurements.shape[0]} rows")
    m_eff = min(int(t), int(window_cap))
    start = t - m_eff
    idx = range(start, t)
    a_window = np.stack([model.a(i) for i in idx])
    c_window = np.stack([model.c(i) for i in idx])
    return InfoVector(
        y_window=measurements[start:t],
        a_window=a_window,
        c_window=c_window,
        prior_weight=prior_weight,
        prior_estimate=prior_estimate,
        t=int(t),
        window_len=m_eff,
        window_cap=int(window_cap),
    )


def encode_features(iv):
    """Flatten an InfoVector into the fixed-size input of the estimators.

    Layout: measurements left-padded to window_cap rows by repeating the
    earliest measurement, flattened time-major, followed by the prior
    estimate.  Constant-window (LTI) problems stop there, giving dimension
    window_cap * m + n.  Time-varying windows append the padded dynamics
    and measurement maps and the prior weight, all flattened.
    """
    pad = iv.window_cap - iv.window_len
    y = np.vstack([np.repeat(iv.y_window[:1], pad, axis=0), iv.y_window])
    parts = [y.ravel(), iv.prior_estimate]
    if not iv.lti_like:
        a = np.vstack([np.repeat(iv.a_window[:1], pad, axis=0), iv.a_window])
        c = np.vstack([np.repeat(iv.c_window[:1], pad, axis=0), iv.c_window])
        parts += [a.ravel(), c.ravel(), iv.prior_weight.ravel()]
    return np.concatenate(parts)
