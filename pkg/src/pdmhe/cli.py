"""Command-line pipeline: simulation, dataset generation, training,
randomized verification, certified runtime, benchmarking, and plot data.

Subcommands: simulate | gen-dataset | train | verify | run | bench |
plot-data.  Every command is driven by a JSON run-config referencing a
JSON model file; outputs are RFC-4180 CSV (plus JSON reports) carrying a
header comment with the config hash and seed.

Exit codes: 0 success, 2 configuration error, 3 verification failure,
4 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approximator import SamplerConfig, TrainConfig, gen_dataset, load_params, save_dataset, save_params, train
from .certify import (
    CertBudget,
    instance_stream,
    mlp_dual_estimator,
    mlp_primal_estimator,
    save_report,
    verify_dual,
    verify_primal,
)
from .errors import PdmheError
from .model import BoxSet, NoiseSpec, SystemModel, simulate_trajectory
from .runtime import (
    BenchSetup,
    rmse_bands,
    run_benchmark,
    run_certified,
    summarize_benchmark,
)
from . import dual_core, mhe_core


class ConfigError(Exception):
    pass


def _bounds(raw, dim, default):
    if raw is None:
        return np.full(dim, default)
    return np.array([default if v is None else float(v) for v in raw])


def load_model_file(path):
    """Parse the model JSON: matrices, noise boxes, horizon, and priors.

    Unbounded box entries are encoded as null (either the whole field or
    individual entries).
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model file {path}: {exc}") from None
    try:
        model = SystemModel(np.array(doc["A"], dtype=float), np.array(doc["C"], dtype=float))
        n, m = model.n, model.m
        noise = NoiseSpec(
            Q=np.array(doc["Q"], dtype=float),
            R=np.array(doc["R"], dtype=float),
            xi_set=BoxSet(_bounds(doc.get("xi_lower"), n, -np.inf), _bounds(doc.get("xi_upper"), n, np.inf)),
            zeta_set=BoxSet(_bounds(doc.get("zeta_lower"), m, -np.inf), _bounds(doc.get("zeta_upper"), m, np.inf)),
        )
        window_cap = int(doc["M_t"])
        gamma = float(doc["gamma"])
        P0 = np.array(doc.get("P0") if doc.get("P0") is not None else np.eye(n).tolist(), dtype=float)
        x0_hat = np.array(doc.get("x0_hat") if doc.get("x0_hat") is not None else np.zeros(n).tolist(), dtype=float)
    except (KeyError, TypeError, ValueError, PdmheError) as exc:
        raise ConfigError(f"invalid model file {path}: {exc}") from None
    if not (0.0 <= gamma < 1.0) or window_cap < 1:
        raise ConfigError(f"model file {path}: gamma must be in [0,1) and M_t >= 1")
    return model, noise, window_cap, gamma, P0, x0_hat


@dataclass
class RunConfig:
    """Everything one experiment needs, resolved to absolute paths."""

    model_path: Path
    out_dir: Path
    seed: int = 0
    mc_runs: int = 200
    T: int = 100
    eps: float = 0.05
    beta: float = 1e-6
    eps_split: float = 0.5
    beta_split: float = 0.5
    delta_p: float = 2.5
    delta_d: float = 2.5
    delta_gap: float = 0.0
    train_size: int = 2500
    sample_t_max: int = 0
    epochs: int = 400
    batch_size: int = 64
    learning_rate: float = 2e-3
    momentum: float = 0.9
    hidden: tuple = (64, 64, 64)
    val_frac: float = 0.1
    train_seed: int = 1000
    verify_seed: int = 2000
    riccati_policy: str = "recursive"
    x0_true: object = None
    threads: int = 1
    debug: bool = False
    config_hash: str = ""
    # loaded model pieces
    model: SystemModel = field(default=None, repr=False)
    noise: NoiseSpec = field(default=None, repr=False)
    window_cap: int = 10
    gamma: float = 0.65
    P0: np.ndarray = field(default=None, repr=False)
    x0_hat: np.ndarray = field(default=None, repr=False)

    @property
    def budget(self):
        return CertBudget(
            eps_p=self.eps * self.eps_split,
            eps_d=self.eps * (1.0 - self.eps_split),
            beta_p=self.beta * self.beta_split,
            beta_d=self.beta * (1.0 - self.beta_split),
            delta_p=self.delta_p,
            delta_d=self.delta_d,
            delta_gap=self.delta_gap,
        )

    @property
    def sampler(self):
        return SamplerConfig(
            gamma=self.gamma,
            window_cap=self.window_cap,
            P0=self.P0,
            prior0=self.x0_hat,
            t_max=self.sample_t_max,
        )

    @property
    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            seed=self.train_seed,
            val_frac=self.val_frac,
        )

    def weights_path(self, kind):
        return self.out_dir / f"weights_{kind}.json"

    @property
    def x0(self):
        return self.x0_hat if self.x0_true is None else np.asarray(self.x0_true, dtype=float)


_CONFIG_KEYS = {
    "model", "out_dir", "seed", "mc_runs", "T", "eps", "beta", "eps_split", "beta_split",
    "delta_p", "delta_d", "delta_gap", "train_size", "sample_t_max", "epochs", "batch_size",
    "learning_rate", "momentum", "hidden", "val_frac", "train_seed", "verify_seed",
    "riccati_policy", "x0_true",
}


def load_run_config(path, out_override=None, seed_override=None, threads=1, debug=False):
    cfg_path = Path(path)
    try:
        doc = json.loads(cfg_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "model" not in doc:
        raise ConfigError("config must name a model file")
    model_path = (cfg_path.parent / doc["model"]).resolve()
    out_dir = Path(out_override) if out_override else (cfg_path.parent / doc.get("out_dir", "out")).resolve()
    model, noise, window_cap, gamma, P0, x0_hat = load_model_file(model_path)
    blob = json.dumps({"config": doc, "model": json.loads(model_path.read_text())}, sort_keys=True)
    cfg = RunConfig(
        model_path=model_path,
        out_dir=out_dir,
        seed=int(seed_override if seed_override is not None else doc.get("seed", 0)),
        mc_runs=int(doc.get("mc_runs", 200)),
        T=int(doc.get("T", 100)),
        eps=float(doc.get("eps", 0.05)),
        beta=float(doc.get("beta", 1e-6)),
        eps_split=float(doc.get("eps_split", 0.5)),
        beta_split=float(doc.get("beta_split", 0.5)),
        delta_p=float(doc.get("delta_p", 2.5)),
        delta_d=float(doc.get("delta_d", 2.5)),
        delta_gap=float(doc.get("delta_gap", 0.0)),
        train_size=int(doc.get("train_size", 2500)),
        sample_t_max=int(doc.get("sample_t_max", 0)),
        epochs=int(doc.get("epochs", 400)),
        batch_size=int(doc.get("batch_size", 64)),
        learning_rate=float(doc.get("learning_rate", 2e-3)),
        momentum=float(doc.get("momentum", 0.9)),
        hidden=tuple(doc.get("hidden", (64, 64, 64))),
        val_frac=float(doc.get("val_frac", 0.1)),
        train_seed=int(doc.get("train_seed", 1000)),
        verify_seed=int(doc.get("verify_seed", 2000)),
        riccati_policy=str(doc.get("riccati_policy", "recursive")),
        x0_true=doc.get("x0_true"),
        threads=int(threads),
        debug=bool(debug),
        config_hash=hashlib.sha256(blob.encode()).hexdigest()[:16],
        model=model,
        noise=noise,
        window_cap=window_cap,
        gamma=gamma,
        P0=P0,
        x0_hat=x0_hat,
    )
    if cfg.riccati_policy not in ("recursive", "frozen"):
        raise ConfigError("riccati_policy must be 'recursive' or 'frozen'")
    if cfg.mc_runs < 1 or cfg.T < 1:
        raise ConfigError("mc_runs and T must be positive")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg


def _csv_writer(fh, cfg):
    fh.write(f"# config_hash={cfg.config_hash} seed={cfg.seed}\n")
    return csv.writer(fh)


def write_reference_config(directory, **overrides):
    """Drop a ready-to-run model + config pair for the reference system."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model_doc = {
        "A": [[1.0, 0.1], [0.0, 1.0]],
        "C": [[1.0, 0.0]],
        "Q": [[0.01, 0.0], [0.0, 0.01]],
        "R": [[1.0]],
        "xi_lower": [0.0, 0.0],
        "xi_upper": None,
        "zeta_lower": None,
        "zeta_upper": [0.0],
        "M_t": 10,
        "gamma": 0.65,
        "P0": [[1.0, 0.0], [0.0, 1.0]],
        "x0_hat": [0.0, 0.0],
    }
    config_doc = {"model": "model.json", "out_dir": "out"}
    config_doc.update(overrides)
    (directory / "model.json").write_text(json.dumps(model_doc, indent=2))
    (directory / "config.json").write_text(json.dumps(config_doc, indent=2))
    return directory / "config.json"


def cmd_simulate(cfg):
    for r in range(cfg.mc_runs):
        seed = cfg.seed + r
        traj = simulate_trajectory(cfg.model, cfg.noise, cfg.x0, cfg.T, seed=seed)
        with open(cfg.out_dir / f"trajectory_{seed}.csv", "w", newline="") as fh:
            writer = _csv_writer(fh, cfg)
            writer.writerow(["kind", "t"] + [f"v{i}" for i in range(max(cfg.model.n, cfg.model.m))])
            for t, x in enumerate(traj.states):
                writer.writerow(["state", t] + list(x))
            for t, y in enumerate(traj.measurements):
                writer.writerow(["measurement", t] + list(y))
            for t, w in enumerate(traj.process_noise):
                writer.writerow(["process_noise", t] + list(w))
            for t, v in enumerate(traj.measurement_noise):
                writer.writerow(["measurement_noise", t] + list(v))
    print(f"wrote {cfg.mc_runs} trajectory file(s) to {cfg.out_dir}")
    return 0


def cmd_gen_dataset(cfg, kind):
    kinds = ("primal", "dual") if kind == "both" else (kind,)
    for k in kinds:
        seed = cfg.train_seed if k == "primal" else cfg.train_seed + 1
        ds = gen_dataset(cfg.model, cfg.noise, cfg.train_size, seed=seed, kind=k, sampler=cfg.sampler)
        path = cfg.out_dir / f"dataset_{k}.csv"
        save_dataset(ds, path)
        print(f"wrote {len(ds)} {k} rows to {path}")
    return 0


def cmd_train(cfg, kind):
    kinds = ("primal", "dual") if kind == "both" else (kind,)
    for k in kinds:
        seed = cfg.train_seed if k == "primal" else cfg.train_seed + 1
        ds = gen_dataset(cfg.model, cfg.noise, cfg.train_size, seed=seed, kind=k, sampler=cfg.sampler)
        params, history = train(ds, cfg.train_config, hidden=cfg.hidden)
        save_params(params, cfg.weights_path(k))
        with open(cfg.out_dir / f"train_curve_{k}.csv", "w", newline="") as fh:
            writer = _csv_writer(fh, cfg)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for e, (tr, va) in enumerate(zip(history["train_loss"], history["val_loss"])):
                writer.writerow([e, tr, va])
        print(f"trained {k} net: final val loss {history['val_loss'][-1]:.6f} -> {cfg.weights_path(k)}")
    return 0


def _load_nets(cfg):
    try:
        return load_params(cfg.weights_path("primal")), load_params(cfg.weights_path("dual"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load trained weights from {cfg.out_dir}: {exc}") from None


def cmd_verify(cfg):
    net_p, net_d = _load_nets(cfg)
    budget = cfg.budget
    rep_p = verify_primal(
        mlp_primal_estimator(net_p),
        budget,
        instance_stream(cfg.model, cfg.noise, cfg.sampler, seed=cfg.verify_seed),
        seed_info={"seed": cfg.verify_seed, "train_seed": cfg.train_seed, "disjoint": cfg.verify_seed != cfg.train_seed},
    )
    rep_d = verify_dual(
        mlp_dual_estimator(net_d),
        budget,
        instance_stream(cfg.model, cfg.noise, cfg.sampler, seed=cfg.verify_seed + 1),
        seed_info={"seed": cfg.verify_seed + 1, "train_seed": cfg.train_seed + 1, "disjoint": True},
    )
    save_report(rep_p, cfg.out_dir / "verify_primal.json", cfg.out_dir / "verify_primal.csv")
    save_report(rep_d, cfg.out_dir / "verify_dual.json", cfg.out_dir / "verify_dual.csv")
    print(
        f"primal: pass={rep_p.passed} N={rep_p.n_samples} worst_excess={rep_p.worst_excess:.6f}\n"
        f"dual:   pass={rep_d.passed} N={rep_d.n_samples} worst_shortfall={rep_d.worst_shortfall:.6f}"
    )
    return 0 if rep_p.passed and rep_d.passed else 3


def cmd_run(cfg):
    net_p, net_d = _load_nets(cfg)
    traj = simulate_trajectory(cfg.model, cfg.noise, cfg.x0, cfg.T, seed=cfg.seed)
    estimates, results, _, state = run_certified(
        cfg.model, cfg.noise, traj.measurements, cfg.gamma, cfg.window_cap, cfg.x0_hat, cfg.P0,
        primal_net=net_p, dual_net=net_d, delta=cfg.budget.delta,
        keep_instances=cfg.debug, riccati_policy=cfg.riccati_policy,
    )
    path = cfg.out_dir / f"run_{cfg.seed}.csv"
    with open(path, "w", newline="") as fh:
        writer = _csv_writer(fh, cfg)
        writer.writerow(["t", "provenance", "gap", "cost"] + [f"xhat{i}" for i in range(cfg.model.n)])
        for r in results:
            writer.writerow([r.t, r.provenance, r.gap, r.cost] + list(r.estimate))
    if cfg.debug and state.instances:
        _write_debug_traces(cfg, state.instances[-1])
    backup_frac = np.mean([r.provenance == "backup" for r in results if r.t >= cfg.window_cap])
    print(f"wrote {path} (backup fraction {backup_frac:.4f})")
    return 0


def _write_debug_traces(cfg, inst):
    trace_p, trace_d = [], []
    mhe_core.solve_primal(inst, trace=trace_p)
    dual_core.solve_dual(inst, trace=trace_d)
    with open(cfg.out_dir / "debug_primal.csv", "w", newline="") as fh:
        writer = _csv_writer(fh, cfg)
        writer.writerow(["iteration", "primal_residual", "cost"])
        writer.writerows(trace_p)
    with open(cfg.out_dir / "debug_dual.csv", "w", newline="") as fh:
        writer = _csv_writer(fh, cfg)
        writer.writerow(["iteration", "dual_value", "grad_norm"])
        writer.writerows(trace_d)


def _bench_setup(cfg, estimators=("pd-mhe", "mhe", "kf")):
    net_p = net_d = None
    if "pd-mhe" in estimators:
        net_p, net_d = _load_nets(cfg)
    return BenchSetup(
        model=cfg.model,
        noise=cfg.noise,
        gamma=cfg.gamma,
        window_cap=cfg.window_cap,
        prior0=cfg.x0_hat,
        P0=cfg.P0,
        x0=cfg.x0,
        T=cfg.T,
        delta=cfg.budget.delta,
        primal_net=net_p,
        dual_net=net_d,
        riccati_policy=cfg.riccati_policy,
        estimators=tuple(estimators),
    )


def cmd_bench(cfg):
    setup = _bench_setup(cfg)
    seeds = range(cfg.seed, cfg.seed + cfg.mc_runs)
    records = run_benchmark(setup, seeds, threads=cfg.threads)
    summary = summarize_benchmark(records)
    path = cfg.out_dir / "bench.csv"
    with open(path, "w", newline="") as fh:
        writer = _csv_writer(fh, cfg)
        writer.writerow(["estimator", "armse", "median_step_ms", "backup_fraction"])
        for name, row in summary.items():
            writer.writerow([name, row["armse"], row["median_step_ms"], row["backup_fraction"]])
    for name, row in summary.items():
        print(f"{name:8s} armse={row['armse']:.4f} median_step={row['median_step_ms']:.3f}ms "
              f"backup={row['backup_fraction']}")
    return 0


def cmd_plot_data(cfg):
    setup = _bench_setup(cfg)
    seeds = range(cfg.seed, cfg.seed + cfg.mc_runs)
    records = run_benchmark(setup, seeds, threads=cfg.threads)
    path = cfg.out_dir / "plot_data.csv"
    with open(path, "w", newline="") as fh:
        writer = _csv_writer(fh, cfg)
        writer.writerow(["t", "estimator", "mean", "lo95", "hi95"])
        for name in setup.estimators:
            states = [r.states for r in records]
            ests = [r.estimates[name] for r in records]
            mean, lo, hi = rmse_bands(states, ests)
            for t in range(mean.shape[0]):
                writer.writerow([t, name, mean[t], lo[t], hi[t]])
    print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="pdmhe", description=__doc__)
    parser.add_argument("--config", required=True, help="path to the run-config JSON")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="base seed (overrides config)")
    parser.add_argument("--threads", type=int, default=1, help="parallel Monte-Carlo workers")
    parser.add_argument("--debug", action="store_true", help="emit per-iteration solver diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate")
    p = sub.add_parser("gen-dataset")
    p.add_argument("--kind", choices=["primal", "dual", "both"], default="both")
    p = sub.add_parser("train")
    p.add_argument("--kind", choices=["primal", "dual", "both"], default="both")
    sub.add_parser("verify")
    sub.add_parser("run")
    sub.add_parser("bench")
    sub.add_parser("plot-data")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.out, args.seed, threads=args.threads, debug=args.debug)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "gen-dataset":
            return cmd_gen_dataset(cfg, args.kind)
        if args.command == "train":
            return cmd_train(cfg, args.kind)
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "plot-data":
            return cmd_plot_data(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PdmheError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 4
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
