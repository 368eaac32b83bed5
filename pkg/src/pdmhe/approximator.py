"""Feedforward surrogates for the windowed estimators.

One small rectifier network predicts the primal decisions (initial state
and process-noise sequence); a second predicts the dual multipliers mu.
Both are trained by plain stochastic gradient descent with momentum on an
L2 regression loss against certified solver outputs.  Everything is
deterministic under a fixed seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, Diverged, MaxIterations
from .model import InfoVector, build_info_vector, encode_features, simulate_trajectory
from . import dual_core, mhe_core


@dataclass(frozen=True)
class MlpParams:
    """Layer sizes plus per-layer weight matrices (out x in) and biases."""

    layer_dims: tuple
    weights: tuple
    biases: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        ws = tuple(np.asarray(w, dtype=float) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=float) for b in self.biases)
        if len(ws) != len(dims) - 1 or len(bs) != len(dims) - 1:
            raise DimensionMismatch("need one weight/bias pair per layer transition")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise DimensionMismatch(f"layer {i}: weight {w.shape} or bias {b.shape} off")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise Diverged(f"layer {i} has non-finite parameters")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    val_frac: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (0 < self.learning_rate and 0 <= self.momentum < 1):
            raise ValueError("learning_rate must be > 0 and momentum in [0, 1)")
        if not (0 <= self.val_frac < 1):
            raise ValueError("val_frac must lie in [0, 1)")


@dataclass(frozen=True)
class Dataset:
    """Encoded features, solver targets, and enough metadata to rebuild
    each underlying instance."""

    inputs: np.ndarray
    targets: np.ndarray
    meta: tuple = field(default_factory=tuple)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if x.shape[0] != y.shape[0]:
            raise DimensionMismatch("inputs and targets must have equal row counts")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "meta", tuple(self.meta))

    def __len__(self):
        return self.inputs.shape[0]


def init_mlp(layer_dims, seed):
    """Uniform fan-in initialization: W ~ U(+-1/sqrt(in)), b = 0."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(din)
        ws.append(rng.uniform(-bound, bound, size=(dout, din)))
        bs.append(np.zeros(dout))
    return MlpParams(tuple(layer_dims), tuple(ws), tuple(bs))


def forward(params, x):
    """Rectifier network output; accepts a single vector or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    z = np.atleast_2d(x)
    if z.shape[1] != params.in_dim:
        raise DimensionMismatch(f"input dim {z.shape[1]} != expected {params.in_dim}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = z @ w.T + b
        if i < last:
            z = np.maximum(z, 0.0)
    return z[0] if single else z


def _forward_stash(params, X):
    acts = [X]
    z = X
    last = len(params.weights) - 1
    pre = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = z @ w.T + b
        pre.append(z)
        if i < last:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return pre, acts


def grad(params, inputs, targets):
    """Mean squared-error loss over the batch and its parameter gradient.

    Loss is mean over samples of the squared output-error norm, so a batch
    of one reduces to the plain least-squares gradient.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    Y = np.atleast_2d(np.asarray(targets, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    pre, acts = _forward_stash(params, X)
    n_batch = X.shape[0]
    err = acts[-1] - Y
    loss = float((err * err).sum() / n_batch)
    delta = 2.0 * err / n_batch
    grads = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            delta = (delta @ params.weights[i]) * (pre[i - 1] > 0)
    return loss, grads


def train(dataset, cfg, hidden=(64, 64, 64)):
    """Fit an MLP to the dataset; returns (params, history).

    SGD with momentum and a cosine-decayed learning rate; the history dict
    records train and validation loss per epoch.  Raises Diverged when the
    loss stops being finite.
    """
    rng = np.random.default_rng(cfg.seed)
    n_total = len(dataset)
    n_val = int(round(cfg.val_frac * n_total))
    perm = rng.permutation(n_total)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise ValueError("no training rows left after the validation split")
    X, Y = dataset.inputs, dataset.targets
    layer_dims = (X.shape[1], *hidden, Y.shape[1])
    params = init_mlp(layer_dims, seed=rng.integers(2**63))
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(params.weights, params.biases)]
    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]

    n_train = train_idx.size
    batches_per_epoch = int(np.ceil(n_train / cfg.batch_size))
    total_steps = cfg.epochs * batches_per_epoch
    history = {"train_loss": [], "val_loss": []}
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n_train)
        for b0 in range(0, n_train, cfg.batch_size):
            idx = train_idx[order[b0 : b0 + cfg.batch_size]]
            cur = MlpParams(layer_dims, tuple(weights), tuple(biases))
            loss, gs = grad(cur, X[idx], Y[idx])
            if not np.isfinite(loss):
                raise Diverged(f"training loss became non-finite at step {step}")
            lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / max(total_steps - 1, 1)))
            for i, (gw, gb) in enumerate(gs):
                vw, vb = velocity[i]
                vw *= cfg.momentum
                vw += gw
                vb *= cfg.momentum
                vb += gb
                weights[i] -= lr * vw
                biases[i] -= lr * vb
            step += 1
        cur = MlpParams(layer_dims, tuple(weights), tuple(biases))
        tr_loss, _ = grad(cur, X[train_idx], Y[train_idx])
        history["train_loss"].append(tr_loss)
        if n_val:
            va_loss, _ = grad(cur, X[val_idx], Y[val_idx])
            history["val_loss"].append(va_loss)
    return MlpParams(layer_dims, tuple(weights), tuple(biases)), history


def _canonical_payload(params):
    return {
        "layer_dims": list(params.layer_dims),
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def _checksum(payload):
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_params(params, path):
    """Write weights as versioned JSON with a content checksum."""
    payload = _canonical_payload(params)
    doc = {"version": 1, **payload, "checksum": _checksum(payload)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    payload = {k: doc[k] for k in ("layer_dims", "weights", "biases")}
    if doc.get("checksum") != _checksum(payload):
        raise ValueError(f"checksum mismatch in weight file {path}")
    return MlpParams(
        tuple(payload["layer_dims"]),
        tuple(np.array(w) for w in payload["weights"]),
        tuple(np.array(b) for b in payload["biases"]),
    )


def anchored_window(iv):
    """Re-express a window in the frame anchored at the prior estimate.

    The windowed QP is translation-equivariant: shifting measurements by
    the prior's nominal (noise-free) rollout and zeroing the prior leaves
    the optimal noise estimates and multipliers unchanged and turns the
    optimal initial state into a correction on top of the prior.  Networks
    are trained and evaluated in this frame, where the feature distribution
    is stationary even when the plant itself drifts.
    """
    x_nom = iv.prior_estimate
    anchor = np.empty_like(np.asarray(iv.y_window))
    for k in range(iv.window_len):
        anchor[k] = iv.c_window[k] @ x_nom
        x_nom = iv.a_window[k] @ x_nom
    iv0 = InfoVector(
        y_window=np.asarray(iv.y_window) - anchor,
        a_window=iv.a_window,
        c_window=iv.c_window,
        prior_weight=iv.prior_weight,
        prior_estimate=np.zeros(iv.n),
        t=iv.t,
        window_len=iv.window_len,
        window_cap=iv.window_cap,
    )
    return iv0


def anchored_features(iv):
    """Network input: the standard encoding of the anchored window."""
    return encode_features(anchored_window(iv))


@dataclass(frozen=True)
class SamplerConfig:
    """How training/verification instances are drawn.

    A fresh trajectory is simulated per sample; the window time is uniform
    on [window_cap, t_max] and the window prior is the exact growing-window
    estimate at t - window_cap (the initial prior when that is time zero),
    with the Riccati weight chain started at P0.
    """

    gamma: float
    window_cap: int
    P0: np.ndarray
    prior0: np.ndarray
    t_max: int = 0

    def __post_init__(self):
        object.__setattr__(self, "P0", np.asarray(self.P0, dtype=float))
        object.__setattr__(self, "prior0", np.asarray(self.prior0, dtype=float))
        if self.t_max <= 0:
            object.__setattr__(self, "t_max", 2 * int(self.window_cap))
        if self.t_max < self.window_cap:
            raise ValueError("t_max must be at least window_cap")


def sample_instance(model, noise, sampler, seed_key):
    """Draw one i.i.d. windowed instance; deterministic in seed_key."""
    rng = np.random.default_rng(seed_key)
    t_i = int(rng.integers(sampler.window_cap, sampler.t_max + 1))
    x0 = sampler.prior0 + np.linalg.cholesky(sampler.P0) @ rng.standard_normal(model.n)
    traj = simulate_trajectory(model, noise, x0, t_i, seed=int(rng.integers(2**63)))
    tau = t_i - min(t_i, sampler.window_cap)
    P = sampler.P0
    for s in range(tau):
        P = mhe_core.riccati_update(P, model.a(s), model.c(s), noise.Q, noise.R)
    if tau == 0:
        prior_est = sampler.prior0
    else:
        iv_prior = build_info_vector(
            traj.measurements, model, sampler.prior0, sampler.P0, t=tau, window_cap=sampler.window_cap
        )
        prior_est = mhe_core.solve_primal(
            mhe_core.make_instance(iv_prior, sampler.gamma, noise)
        ).estimate
    iv = build_info_vector(traj.measurements, model, prior_est, P, t=t_i, window_cap=sampler.window_cap)
    return mhe_core.make_instance(iv, sampler.gamma, noise), traj


def primal_target(inst, sol):
    """Flatten what the primal network predicts: the prior correction
    (anchored-frame initial state) plus the process-noise sequence."""
    return np.concatenate([sol.x0_hat - inst.iv.prior_estimate, sol.xi_hat.ravel()])


def gen_dataset(model, noise, count, seed, kind, sampler):
    """Simulate, solve, and stack `count` certified training rows.

    kind is "primal" (targets: prior correction + process noise) or "dual"
    (targets: flattened mu); inputs are anchored-frame features either way.
    Failed solves are skipped and replaced by fresh draws, so exactly
    `count` rows are delivered.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if kind not in ("primal", "dual"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    rows_x, rows_y, meta = [], [], []
    draw = 0
    skipped = 0
    while len(rows_x) < count:
        key = (int(seed), draw)
        draw += 1
        try:
            inst, _ = sample_instance(model, noise, sampler, key)
            if kind == "primal":
                target = primal_target(inst, mhe_core.solve_primal(inst))
            else:
                target = dual_core.solve_dual(inst).mu.ravel()
        except MaxIterations:
            skipped += 1
            continue
        rows_x.append(anchored_features(inst.iv))
        rows_y.append(target)
        meta.append({"seed": int(seed), "draw": draw - 1, "t": inst.iv.t, "kind": kind, "skipped_before": skipped})
    return Dataset(np.vstack(rows_x), np.vstack(rows_y), tuple(meta))


def save_dataset(dataset, path):
    """CSV with a header row naming feature and target columns."""
    n_f = dataset.inputs.shape[1]
    n_t = dataset.targets.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["draw", "t"] + [f"f{i}" for i in range(n_f)] + [f"y{i}" for i in range(n_t)])
        for row_x, row_y, m in zip(dataset.inputs, dataset.targets, dataset.meta):
            writer.writerow([m.get("draw", -1), m.get("t", -1)] + list(row_x) + list(row_y))


def load_dataset(path, n_features):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) < 2 + n_features:
            raise ValueError("dataset file has fewer columns than expected")
        xs, ys, meta = [], [], []
        for row in reader:
            vals = [float(v) for v in row]
            xs.append(vals[2 : 2 + n_features])
            ys.append(vals[2 + n_features :])
            meta.append({"draw": int(vals[0]), "t": int(vals[1])})
    return Dataset(np.array(xs), np.array(ys), tuple(meta))
