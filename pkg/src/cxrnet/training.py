"""Class weighting, weighted cross-entropy, Adam, and the epoch loop.

Class probabilities are ordered (positive, negative); one-hot labels and
weight vectors follow the same order. The epoch loop is functional: each
Adam step produces new parameter arrays, and the best epoch's snapshot is
returned as a checkpoint without mutating the input network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointMeta
from .data import Cohort, CohortRecord, load_image
from .errors import DataError, NumericalError
from .network import Network, forward
from .tensor import Tensor, TensorError, backward, no_grad, parameter


class DegenerateCohortError(DataError):
    """A split needed for training is empty or single-class."""


class TrainingAborted(NumericalError):
    """Loss or parameters became non-finite; carries the failing position."""

    def __init__(self, epoch: int, batch: int, reason: str):
        super().__init__(f"training aborted at epoch {epoch}, batch {batch}: {reason}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class ClassWeights:
    w_p: float
    w_n: float
    n_pos: int
    n_neg: int

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.array([self.w_p, self.w_n], dtype=dtype)


def class_weights(n_pos: int, n_neg: int) -> ClassWeights:
    """w_p = (N_p+N_n)/N_p and w_n = (N_p+N_n)/N_n, so each class
    contributes equal total weight: w_p*N_p = w_n*N_n = N_p+N_n."""
    if n_pos < 1 or n_neg < 1:
        raise DegenerateCohortError(
            f"class weights need at least one case per class, got {n_pos} positive / {n_neg} negative"
        )
    total = n_pos + n_neg
    return ClassWeights(total / n_pos, total / n_neg, n_pos, n_neg)


def unit_weights(n_pos: int, n_neg: int) -> ClassWeights:
    return ClassWeights(1.0, 1.0, n_pos, n_neg)


_CLAMP = 1e-7


def weighted_cross_entropy(probs: Tensor, onehot, weights) -> Tensor:
    """Mean over rows of -w_t * log(p_t), probabilities clamped to
    [1e-7, 1-1e-7] before the log. `weights` is a ClassWeights or a
    per-class array; with unit weights this is plain cross-entropy."""
    q = np.asarray(onehot)
    p = probs.data
    if p.ndim != 2 or q.shape != p.shape:
        raise TensorError(f"probs {p.shape} and one-hot labels {q.shape} must both be N x C")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-5:
        raise TensorError("probability rows must sum to 1 within 1e-5")
    if not (np.isin(q, (0.0, 1.0)).all() and (q.sum(axis=1) == 1.0).all()):
        raise TensorError("labels must be one-hot rows")
    w = weights.as_array(p.dtype) if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=p.dtype)
    if w.shape != (p.shape[1],):
        raise TensorError(f"weights shape {w.shape} != ({p.shape[1]},)")

    q = q.astype(p.dtype)
    lo, hi = _CLAMP, 1.0 - _CLAMP
    clamped = np.clip(p, lo, hi)
    value = -(w * q * np.log(clamped)).sum(axis=1).mean()
    n = p.shape[0]

    def bw(g: np.ndarray) -> None:
        inside = (p >= lo) & (p <= hi)
        probs._accumulate(g * (-(w * q) / clamped) * inside / n)

    return Tensor(np.asarray(value, dtype=p.dtype), parents=(probs,), backward=bw)


def normalize_image(image):
    """Zero-mean, unit-std over all pixels jointly (population std).
    Constant images map to all zeros. Accepts and returns either a Tensor
    or a bare array."""
    wrap = isinstance(image, Tensor)
    arr = image.data if wrap else np.asarray(image)
    out = _normalize_array(arr)
    return Tensor(out) if wrap else out


def _normalize_array(arr: np.ndarray) -> np.ndarray:
    std = arr.std(dtype=np.float64)
    if std < 1e-12:
        return np.zeros_like(arr)
    mean = arr.mean(dtype=np.float64)
    return ((arr - mean) / std).astype(arr.dtype)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 20
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    normalization: str = "per_image"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ValueError("adam parameters out of range")
        if self.normalization not in ("per_image", "dataset"):
            raise ValueError(f"unknown normalization mode {self.normalization!r}")


@dataclass(frozen=True)
class TrainHistory:
    train_loss: tuple[float, ...]
    val_loss: tuple[float, ...]
    best_epoch: int  # 1-based

    def __post_init__(self):
        if len(self.train_loss) != len(self.val_loss) or not self.train_loss:
            raise ValueError("history needs matching, nonempty loss sequences")


def best_epoch_index(val_losses: Sequence[float]) -> int:
    """1-based argmin; earliest epoch wins ties."""
    if not val_losses:
        raise DataError("empty history")
    best = 0
    for i in range(1, len(val_losses)):
        if val_losses[i] < val_losses[best]:
            best = i
    return best + 1


@dataclass(frozen=True)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        {k: np.zeros_like(a) for k, a in params.items()},
        {k: np.zeros_like(a) for k, a in params.items()},
        0,
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected update; returns fresh arrays, inputs untouched."""
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_p: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, arr in params.items():
        g = grads[name]
        if g.shape != arr.shape:
            raise TensorError(f"gradient shape {g.shape} != parameter shape {arr.shape} for {name!r}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (m / corr1) / (np.sqrt(v / corr2) + config.eps)
        new_p[name] = arr - config.learning_rate * update
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(new_m, new_v, t)


def _split_records(cohort: Cohort, split: str) -> list[CohortRecord]:
    return [r for r in cohort.records if r.split == split]


def prepare_inputs(
    cohort: Cohort,
    records: Sequence[CohortRecord],
    side: int,
    normalization: str,
    stats: tuple[float, float] | None = None,
) -> tuple[np.ndarray, np.ndarray, tuple[float, float] | None]:
    """Load, scale, and normalize one split into memory.

    Returns (images N x 1 x side x side, labels N, dataset stats). Dataset
    mode computes mean/std over all pixels of `records` when stats is None;
    pass the training stats back in for validation and test splits.
    """
    raw = np.stack([load_image(cohort.resolve(r.path), side).data for r in records]) if records else np.zeros((0, 1, side, side), np.float32)
    labels = np.array([r.label for r in records], dtype=np.int64)
    if normalization == "per_image":
        images = np.stack([_normalize_array(img) for img in raw]) if len(raw) else raw
        return images, labels, None
    if stats is None:
        mean = float(raw.mean(dtype=np.float64))
        std = float(raw.std(dtype=np.float64))
        if std < 1e-12:
            raise DegenerateCohortError("dataset normalization needs non-constant pixels")
        stats = (mean, std)
    images = ((raw - stats[0]) / stats[1]).astype(np.float32)
    return images, labels, stats


def replicate_channels(images: np.ndarray, channels: int) -> np.ndarray:
    """Grayscale batches are replicated across channels after normalization."""
    if channels > 1:
        return np.repeat(images, channels, axis=1)
    return images


def _onehot(labels: np.ndarray) -> np.ndarray:
    # column 0 = positive, column 1 = negative
    out = np.zeros((len(labels), 2), dtype=np.float32)
    out[labels == 1, 0] = 1.0
    out[labels == 0, 1] = 1.0
    return out


def _eval_loss(
    config_net,
    arrays: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    images: np.ndarray,
    onehot: np.ndarray,
    weights: ClassWeights,
    batch_size: int,
    channels: int,
) -> float:
    total, count = 0.0, 0
    with no_grad():
        params = {name: parameter(a, name) for name, a in arrays.items()}
        net = Network(config_net, params, buffers, 0)
        for start in range(0, len(images), batch_size):
            idx = np.arange(start, min(start + batch_size, len(images)))
            res = forward(net, replicate_channels(images[idx], channels), mode="eval")
            loss = weighted_cross_entropy(res.probs, onehot[idx], weights)
            total += loss.item() * len(idx)
            count += len(idx)
    return total / count


ProgressFn = Callable[[int, float, float], None]


def train(
    network: Network,
    cohort: Cohort,
    train_config: TrainConfig,
    weights: ClassWeights,
    progress: ProgressFn | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Run the epoch loop and return the least-validation-loss checkpoint.

    Each epoch shuffles the training split with a generator seeded by
    (seed, epoch), iterates mini-batches (the final short batch is kept),
    and reports the example-weighted mean loss. Validation runs in eval
    mode after every epoch. Ties in validation loss keep the earliest
    epoch. Aborts with epoch/batch diagnostics if anything goes non-finite.
    """
    cfg = network.config
    train_recs = _split_records(cohort, "train")
    val_recs = _split_records(cohort, "val")
    if not train_recs or not val_recs:
        raise DegenerateCohortError(
            f"training needs nonempty train and val splits, got {len(train_recs)}/{len(val_recs)}"
        )

    train_images, train_labels, stats = prepare_inputs(cohort, train_recs, cfg.input_size, train_config.normalization)
    val_images, val_labels, _ = prepare_inputs(cohort, val_recs, cfg.input_size, train_config.normalization, stats)
    train_onehot = _onehot(train_labels)
    val_onehot = _onehot(val_labels)

    arrays = {name: t.data.copy() for name, t in network.params.items()}
    buffers = {name: a.copy() for name, a in network.buffers.items()}
    state = adam_init(arrays)
    n = len(train_recs)
    channels = cfg.input_channels

    train_losses: list[float] = []
    val_losses: list[float] = []
    best: tuple[float, int, dict, dict] | None = None

    for epoch in range(1, train_config.epochs + 1):
        order = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        total, seen = 0.0, 0
        for bi, start in enumerate(range(0, n, train_config.batch_size), start=1):
            idx = order[start : start + train_config.batch_size]
            try:
                params = {name: parameter(a, name) for name, a in arrays.items()}
                net = Network(cfg, params, buffers, train_config.seed)
                res = forward(net, replicate_channels(train_images[idx], channels), mode="train")
                loss = weighted_cross_entropy(res.probs, train_onehot[idx], weights)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError("training loss is non-finite")
                backward(loss, params=params.values())
                grads = {name: t.grad for name, t in params.items()}
                arrays, state = adam_step(arrays, grads, state, train_config)
            except NumericalError as exc:
                raise TrainingAborted(epoch, bi, str(exc)) from exc
            buffers = res.buffers
            total += value * len(idx)
            seen += len(idx)
        train_losses.append(total / seen)

        val_loss = _eval_loss(cfg, arrays, buffers, val_images, val_onehot, weights, train_config.batch_size, channels)
        if not np.isfinite(val_loss):
            raise TrainingAborted(epoch, 0, "validation loss is non-finite")
        val_losses.append(val_loss)
        if best is None or val_loss < best[0]:
            best = (val_loss, epoch, {k: a.copy() for k, a in arrays.items()}, {k: a.copy() for k, a in buffers.items()})
        if progress is not None:
            progress(epoch, train_losses[-1], val_loss)

    best_loss, best_ep, best_arrays, best_buffers = best
    best_params = {name: parameter(a, name) for name, a in best_arrays.items()}
    best_net = Network(cfg, best_params, best_buffers, train_config.seed)
    extra = {"norm_mode": train_config.normalization}
    if stats is not None:
        extra["norm_mean"] = repr(stats[0])
        extra["norm_std"] = repr(stats[1])
    meta = CheckpointMeta(best_ep, best_loss, train_config.seed, extra)
    history = TrainHistory(tuple(train_losses), tuple(val_losses), best_ep)
    return Checkpoint(best_net, meta), history


def select_checkpoint(history: TrainHistory, saved: Sequence[Checkpoint]) -> Checkpoint:
    """Checkpoint of the argmin validation-loss epoch, earliest on ties."""
    if len(saved) != len(history.val_loss):
        raise DataError(f"{len(saved)} checkpoints for {len(history.val_loss)} epochs")
    return saved[best_epoch_index(history.val_loss) - 1]


def export_history_csv(history: TrainHistory, path) -> None:
    lines = ["epoch,train_loss,val_loss,is_best"]
    for i, (tl, vl) in enumerate(zip(history.train_loss, history.val_loss), start=1):
        lines.append(f"{i},{float(tl)!r},{float(vl)!r},{1 if i == history.best_epoch else 0}")
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\n".join(lines) + "\n")
