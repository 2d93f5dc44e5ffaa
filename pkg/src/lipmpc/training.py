"""Dataset handling, standardization, and projected Adam training.

The optimizer is plain Adam on the taped parameters; after every step the
weights are pushed back onto the constraint set (unit spectral norm for the
sorting layers, entrywise clamp for the clipped final map), so the invariant
holds at every point of the trajectory, not just at the end. Early stopping
keeps the parameters from the best validation epoch.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, gradients, largest_singular_value
from .io_utils import atomic_write_text
from .network import (
    LINEAR_CLIPPED,
    SPECTRAL_DENSE,
    Layer,
    Network,
    forward,
    forward_taped,
)

__all__ = [
    "LabeledDataset",
    "ScalerParams",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "fit_scaler",
    "scale",
    "unscale",
    "split_dataset",
    "add_output_noise",
    "prepare_splits",
    "train",
    "evaluate_mse",
    "save_dataset",
    "load_dataset",
    "save_scaler",
    "load_scaler",
    "save_history",
]


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the epoch/step where it happened."""


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.outputs = np.asarray(self.outputs, dtype=float)
        if self.inputs.ndim != 2 or self.outputs.ndim != 2:
            raise ValueError("inputs and outputs must be 2-D arrays")
        if len(self.inputs) != len(self.outputs):
            raise ValueError("inputs and outputs must have equal row counts")

    def __len__(self):
        return len(self.inputs)


@dataclass
class ScalerParams:
    in_mean: np.ndarray
    in_sd: np.ndarray
    out_mean: np.ndarray
    out_sd: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 20
    noise_sd: float = 0.0
    splits: tuple = (0.525, 0.175, 0.30)
    seed: int = 0
    c_max: float = 1.0

    def __post_init__(self):
        if abs(sum(self.splits) - 1.0) > 1e-12 or len(self.splits) != 3:
            raise ValueError("splits must be three fractions summing to 1")
        if min(self.splits) < 0:
            raise ValueError("split fractions must be nonnegative")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("bad optimizer configuration")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")


@dataclass
class TrainResult:
    net: Network
    history: list = field(default_factory=list)  # (epoch, train_mse, val_mse)
    best_epoch: int = -1
    best_val_mse: float = float("inf")


# -- scaling -------------------------------------------------------------------


def fit_scaler(dataset):
    """Per-column mean/sd of inputs and outputs. A constant column cannot be
    standardized and is rejected."""
    in_sd = dataset.inputs.std(axis=0)
    out_sd = dataset.outputs.std(axis=0)
    if np.any(in_sd == 0.0) or np.any(out_sd == 0.0):
        raise ValueError("zero-variance column; cannot standardize")
    return ScalerParams(
        dataset.inputs.mean(axis=0), in_sd, dataset.outputs.mean(axis=0), out_sd
    )


def scale(scaler, dataset):
    return LabeledDataset(
        (dataset.inputs - scaler.in_mean) / scaler.in_sd,
        (dataset.outputs - scaler.out_mean) / scaler.out_sd,
    )


def unscale(scaler, dataset):
    return LabeledDataset(
        dataset.inputs * scaler.in_sd + scaler.in_mean,
        dataset.outputs * scaler.out_sd + scaler.out_mean,
    )


def split_dataset(dataset, splits, seed):
    """Shuffle once, then carve train/validation/test slices."""
    m = len(dataset)
    perm = np.random.default_rng(seed).permutation(m)
    n_train = int(round(splits[0] * m))
    n_val = int(round(splits[1] * m))
    idx = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    return tuple(LabeledDataset(dataset.inputs[i], dataset.outputs[i]) for i in idx)


def add_output_noise(dataset, sd, rng):
    """Gaussian noise on the outputs only; sd=0 returns the data unchanged."""
    if sd == 0.0:
        return LabeledDataset(dataset.inputs.copy(), dataset.outputs.copy())
    noise = rng.normal(0.0, sd, size=dataset.outputs.shape)
    return LabeledDataset(dataset.inputs.copy(), dataset.outputs + noise)


@dataclass
class PreparedData:
    scaler: ScalerParams
    train: LabeledDataset  # scaled, noisy
    val: LabeledDataset  # scaled, clean
    test: LabeledDataset  # scaled, clean


def prepare_splits(dataset, config):
    """Split, standardize on the training slice, then corrupt the training
    outputs only; the validation and test slices stay clean, so epoch
    selection and the reported error both measure distance to the true map."""
    train, val, test = split_dataset(dataset, config.splits, config.seed)
    scaler = fit_scaler(train)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA55]))
    return PreparedData(
        scaler,
        add_output_noise(scale(scaler, train), config.noise_sd, rng),
        scale(scaler, val),
        scale(scaler, test),
    )


# -- training ---------------------------------------------------------------------


def evaluate_mse(net, dataset):
    """Mean over samples of the squared error summed across output columns."""
    pred = forward(net, dataset.inputs)
    return float(np.mean(np.sum((pred - dataset.outputs) ** 2, axis=1)))


def _project_in_place(layers, c_max, warm):
    for i, (kind, w, _) in enumerate(layers):
        if kind == SPECTRAL_DENSE:
            sig = largest_singular_value(w.data, tol=1e-10, max_iter=10_000, u0=warm.get(i))
            w.data = w.data / sig
            warm[i] = _gram_vector(w.data, warm.get(i))
        elif kind == LINEAR_CLIPPED:
            w.data = np.clip(w.data, -c_max, c_max)


def _gram_vector(w, prev):
    # one extra half-iteration keeps the warm-start vector tracking the
    # dominant direction as the weights drift between steps
    gram = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
    v = gram @ (prev if prev is not None else np.ones(gram.shape[0]))
    n = np.linalg.norm(v)
    return v / n if n > 0 else None


def _snapshot(layers):
    return Network(
        [
            Layer(kind, w.data.copy(), None if b is None else b.data.copy())
            for kind, w, b in layers
        ]
    )


def train(net, train_ds, val_ds, config, callback=None):
    """Projected Adam with early stopping on validation MSE.

    `train_ds`/`val_ds` are already scaled (see prepare_splits). Returns the
    parameters of the best validation epoch. Raises TrainingDivergedError on
    a non-finite loss. Deterministic for a fixed config seed.
    """
    layers = [
        (
            l.kind,
            Tensor(l.weight.copy(), requires_grad=True),
            None if l.bias is None else Tensor(l.bias.copy(), requires_grad=True),
        )
        for l in net.layers
    ]
    params = [t for _, w, b in layers for t in (w, b) if t is not None]
    m_state = [np.zeros_like(p.data) for p in params]
    v_state = [np.zeros_like(p.data) for p in params]
    warm = {}
    result = TrainResult(_snapshot(layers))
    batch_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xBA7C]))
    n = len(train_ds)
    t = 0
    stale = 0
    for epoch in range(config.max_epochs):
        order = batch_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = Tensor(train_ds.inputs[idx])
            yb = Tensor(train_ds.outputs[idx])
            pred = forward_taped(layers, xb)
            loss = ((pred - yb) ** 2).sum() / len(idx)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            grads = gradients(loss, params)
            t += 1
            for p, g, ms, vs in zip(params, grads, m_state, v_state):
                ms_new = config.beta1 * ms + (1.0 - config.beta1) * g
                vs_new = config.beta2 * vs + (1.0 - config.beta2) * g * g
                ms[...], vs[...] = ms_new, vs_new
                m_hat = ms_new / (1.0 - config.beta1**t)
                v_hat = vs_new / (1.0 - config.beta2**t)
                p.data = p.data - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
            _project_in_place(layers, config.c_max, warm)
            if callback is not None:
                callback(layers)
            epoch_loss += float(loss.data) * len(idx)
        val_mse = evaluate_mse(_snapshot(layers), val_ds)
        result.history.append((epoch, epoch_loss / n, val_mse))
        if val_mse < result.best_val_mse:
            result.best_val_mse = val_mse
            result.best_epoch = epoch
            result.net = _snapshot(layers)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return result


# -- persistence --------------------------------------------------------------------


def _write_csv(path, metadata, header, rows):
    buf = io.StringIO()
    for key in sorted(metadata):
        buf.write(f"# {key}={metadata[key]}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _read_csv(path):
    metadata, rows = {}, []
    with open(path) as fh:
        header = None
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                metadata[key.strip()] = value
                continue
            if header is None:
                header = line.split(",")
            else:
                rows.append([float(v) for v in line.split(",")])
    return metadata, header, np.array(rows) if rows else np.empty((0, 0))


def save_dataset(dataset, path, in_cols, out_cols, metadata=None):
    md = dict(metadata or {})
    md["n_inputs"] = len(in_cols)
    md["n_outputs"] = len(out_cols)
    rows = np.hstack([dataset.inputs, dataset.outputs])
    _write_csv(
        path, md, list(in_cols) + list(out_cols), [[repr(float(v)) for v in r] for r in rows]
    )


def load_dataset(path):
    md, header, body = _read_csv(path)
    n_in = int(md["n_inputs"])
    return LabeledDataset(body[:, :n_in], body[:, n_in:]), md, header


def save_scaler(scaler, path, metadata=None):
    rows = []
    for role, mean, sd in (
        ("input", scaler.in_mean, scaler.in_sd),
        ("output", scaler.out_mean, scaler.out_sd),
    ):
        for j, (mu, s) in enumerate(zip(mean, sd)):
            rows.append([role, str(j), repr(float(mu)), repr(float(s))])
    buf = io.StringIO()
    for key in sorted(metadata or {}):
        buf.write(f"# {key}={metadata[key]}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["role", "column", "mean", "sd"])
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def load_scaler(path):
    means = {"input": [], "output": []}
    sds = {"input": [], "output": []}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("role,"):
                continue
            role, _, mu, sd = line.split(",")
            means[role].append(float(mu))
            sds[role].append(float(sd))
    return ScalerParams(
        np.array(means["input"]),
        np.array(sds["input"]),
        np.array(means["output"]),
        np.array(sds["output"]),
    )


def save_history(history, path, metadata=None):
    _write_csv(
        path,
        metadata or {},
        ["epoch", "train_mse", "val_mse"],
        [[str(e), repr(tr), repr(va)] for e, tr, va in history],
    )
