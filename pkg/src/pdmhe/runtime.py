"""Online estimation loops, error metrics, and the Monte-Carlo benchmark
harness comparing the certified runtime against the Kalman filter and the
exact windowed solver."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .certify import PdMheRuntime
from .model import BoxSet, NoiseSpec, SystemModel, simulate_trajectory
from . import mhe_core


def example_system():
    """The reference setup: a discrete double integrator with position
    measurements, nonnegative process noise, and nonpositive measurement
    noise."""
    model = SystemModel(np.array([[1.0, 0.1], [0.0, 1.0]]), np.array([[1.0, 0.0]]))
    noise = NoiseSpec(
        Q=0.01 * np.eye(2),
        R=np.array([[1.0]]),
        xi_set=BoxSet.nonnegative(2),
        zeta_set=BoxSet.nonpositive(1),
    )
    return model, noise


def stable_variant():
    """A strictly stable sibling of the reference setup.

    The one-step stability block is infeasible for any weight when the
    dynamics determinant reaches 1, so audits that need the hypotheses to
    hold use this contractive system instead.
    """
    model = SystemModel(np.array([[0.8, 0.1], [0.0, 0.8]]), np.array([[1.0, 0.0]]))
    noise = NoiseSpec(
        Q=0.01 * np.eye(2),
        R=np.array([[1.0]]),
        xi_set=BoxSet.nonnegative(2),
        zeta_set=BoxSet.nonpositive(1),
    )
    return model, noise


def run_kalman(model, noise, measurements, prior0, P0):
    """Prediction-form Kalman baseline; returns (estimates, step_seconds).

    estimates[t] is the one-step-ahead estimate of x_t with estimates[0]
    the initial prior.  The filter ignores the noise boxes, which is
    exactly why it drifts under truncated noise.
    """
    x_hat = np.asarray(prior0, dtype=float)
    P = np.asarray(P0, dtype=float)
    estimates = [x_hat]
    times = []
    for t, y in enumerate(np.atleast_2d(measurements)):
        tic = time.perf_counter()
        x_hat, P = mhe_core.kalman_step(x_hat, P, y, model.a(t), model.c(t), noise.Q, noise.R)
        times.append(time.perf_counter() - tic)
        estimates.append(x_hat)
    return np.vstack(estimates), times


def run_certified(
    model,
    noise,
    measurements,
    gamma,
    window_cap,
    prior0,
    P0,
    primal_net=None,
    dual_net=None,
    delta=0.0,
    keep_instances=False,
    riccati_policy="recursive",
    zeta_feas_tol=None,
):
    """Drive a PdMheRuntime over one measurement sequence.

    Without nets every step is a backup solve, i.e. the exact online
    estimator.  Returns (estimates, results, step_seconds, state).
    """
    state = PdMheRuntime(
        model,
        noise,
        gamma,
        window_cap,
        prior0,
        P0,
        primal_net=primal_net,
        dual_net=dual_net,
        delta=delta,
        keep_instances=keep_instances,
        riccati_policy=riccati_policy,
        zeta_feas_tol=zeta_feas_tol,
    )
    times = []
    for y in np.atleast_2d(measurements):
        tic = time.perf_counter()
        state.step(y)
        times.append(time.perf_counter() - tic)
    return np.vstack(state.estimates), list(state.results), times, state


def rmse_per_step(true_states, estimates):
    """Per-step RMSE across runs: sqrt(mean_r ||xhat_t - x_t||^2)."""
    errs = np.stack(
        [np.linalg.norm(np.asarray(e) - np.asarray(s), axis=1) for s, e in zip(true_states, estimates)]
    )
    return np.sqrt((errs**2).mean(axis=0))


def armse(rmse, tail_frac=0.5):
    """Steady-state average of the per-step RMSE (the trailing fraction)."""
    rmse = np.asarray(rmse, dtype=float)
    start = int(np.floor(rmse.shape[0] * (1.0 - tail_frac)))
    return float(rmse[start:].mean())


def rmse_bands(true_states, estimates, z=1.96):
    """Per-step mean Euclidean error and a 95% confidence band of the mean."""
    errs = np.stack(
        [np.linalg.norm(np.asarray(e) - np.asarray(s), axis=1) for s, e in zip(true_states, estimates)]
    )
    mean = errs.mean(axis=0)
    sem = errs.std(axis=0, ddof=0) / np.sqrt(errs.shape[0])
    return mean, mean - z * sem, mean + z * sem


@dataclass(frozen=True)
class BenchSetup:
    """Picklable description of one Monte-Carlo benchmark."""

    model: SystemModel
    noise: NoiseSpec
    gamma: float
    window_cap: int
    prior0: np.ndarray
    P0: np.ndarray
    x0: np.ndarray
    T: int
    delta: float = 0.0
    primal_net: object = None
    dual_net: object = None
    riccati_policy: str = "recursive"
    estimators: tuple = ("pd-mhe", "mhe", "kf")


@dataclass
class RunRecord:
    seed: int
    states: np.ndarray
    estimates: dict = field(default_factory=dict)
    times: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    gaps: dict = field(default_factory=dict)


def _bench_one(args):
    setup, seed = args
    traj = simulate_trajectory(setup.model, setup.noise, setup.x0, setup.T, seed=seed)
    rec = RunRecord(seed=seed, states=traj.states)
    common = dict(
        model=setup.model,
        noise=setup.noise,
        measurements=traj.measurements,
        gamma=setup.gamma,
        window_cap=setup.window_cap,
        prior0=setup.prior0,
        P0=setup.P0,
        riccati_policy=setup.riccati_policy,
    )
    if "kf" in setup.estimators:
        est, times = run_kalman(setup.model, setup.noise, traj.measurements, setup.prior0, setup.P0)
        rec.estimates["kf"], rec.times["kf"] = est, times
    if "mhe" in setup.estimators:
        est, results, times, _ = run_certified(**common)
        rec.estimates["mhe"], rec.times["mhe"] = est, times
    if "pd-mhe" in setup.estimators:
        est, results, times, _ = run_certified(
            **common, primal_net=setup.primal_net, dual_net=setup.dual_net, delta=setup.delta
        )
        rec.estimates["pd-mhe"], rec.times["pd-mhe"] = est, times
        rec.provenance["pd-mhe"] = [r.provenance for r in results]
        rec.gaps["pd-mhe"] = [r.gap for r in results]
    return rec


def run_benchmark(setup, seeds, threads=1):
    """Run the Monte-Carlo comparison; records come back seed-sorted."""
    jobs = [(setup, int(s)) for s in seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_bench_one, jobs))
    else:
        records = [_bench_one(j) for j in jobs]
    records.sort(key=lambda r: r.seed)
    return records


def summarize_benchmark(records, estimators=("pd-mhe", "mhe", "kf"), tail_frac=0.5):
    """Reduce run records to ARMSE, median step milliseconds, and the
    fraction of steps that fell back to the exact solver."""
    summary = {}
    for name in estimators:
        if not all(name in r.estimates for r in records):
            continue
        states = [r.states for r in records]
        ests = [r.estimates[name] for r in records]
        rmse = rmse_per_step(states, ests)
        all_times = np.concatenate([np.asarray(r.times[name]) for r in records])
        backup_frac = float("nan")
        if name == "pd-mhe" and records and records[0].provenance.get(name):
            flags = np.concatenate(
                [np.asarray([p == "backup" for p in r.provenance[name]]) for r in records]
            )
            backup_frac = float(flags.mean())
        summary[name] = {
            "armse": armse(rmse, tail_frac),
            "rmse": rmse,
            "median_step_ms": float(np.median(all_times) * 1e3),
            "backup_fraction": backup_frac,
        }
    return summary
