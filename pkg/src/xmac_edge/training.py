"""Loss, Adam, plateau LR decay, early stopping and k-fold orchestration."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .data import AugmentConfig, Dataset, batch_iterator, dataset_arrays, kfold_split
from .model import Model, ModelConfig, build_model, forward

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss became NaN/Inf."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_factor: float = 0.5
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    early_stop_patience: int = 10
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    image_size: int | None = None
    nir_proxy: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- loss


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.size}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.data.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return ad.record("cross_entropy", loss, (logits,), bw)


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------- schedule


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0


def lr_schedule(state: PlateauState, epoch_val_loss: float) -> float:
    """Halve the LR after ``patience`` epochs without a ``min_delta`` improvement."""
    if epoch_val_loss < state.best - state.min_delta:
        state.best = epoch_val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr *= state.factor
            state.bad_epochs = 0
    return state.lr


# ---------------------------------------------------------------- loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    learning_rate: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""
    train_config: dict = field(default_factory=dict)
    model_config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "train_config": self.train_config,
            "model_config": self.model_config,
        }


def _loss_and_accuracy(model: Model, rgb, idx, labels, batch_size: int) -> tuple[float, float]:
    total, correct = 0.0, 0
    for i in range(0, len(labels), batch_size):
        out = forward(model, rgb[i : i + batch_size], None if idx is None else idx[i : i + batch_size])
        y = labels[i : i + batch_size]
        total += float(cross_entropy_loss(out.logits, y).data) * len(y)
        correct += int((np.argmax(out.probabilities.data, axis=1) == y).sum())
    n = max(len(labels), 1)
    return total / n, correct / n


def train(model: Model, train_set: Dataset, val_set: Dataset, config: TrainConfig,
          progress=None) -> tuple[Model, TrainHistory]:
    """Fit ``model`` (left untouched) and return the best-validation-loss copy."""
    if not len(train_set) or not len(val_set):
        raise ValueError("train and validation sets must be non-empty")
    if train_set.num_classes != model.config.num_classes:
        raise ValueError(
            f"dataset has {train_set.num_classes} classes, model has {model.config.num_classes}"
        )
    work = model.copy()
    index_on = work.config.index_branch_enabled
    val_rgb, val_idx, val_y = dataset_arrays(val_set, config.image_size, config.nir_proxy)
    state = AdamState()
    sched = PlateauState(config.learning_rate, config.lr_decay_factor, config.plateau_patience, config.plateau_min_delta)
    history = TrainHistory(train_config=config.to_dict(), model_config=work.config.to_dict())
    best_loss, best_model, since_best = math.inf, work.copy(), 0
    lr = config.learning_rate
    drop_root = Rng(config.seed).child(2)

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        drop_rng = drop_root.child(epoch)
        losses = []
        batches = batch_iterator(
            train_set, config.batch_size, config.seed, epoch, config.augment, config.image_size, config.nir_proxy
        )
        for b, (rgb, idx, y) in enumerate(batches):
            out = forward(work, rgb, idx if index_on else None, mode="train", rng=drop_rng)
            with out.tape:
                loss = cross_entropy_loss(out.logits, y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch + 1}, batch index {b}")
            ad.backward(out.tape, loss)
            grads = {k: p.grad for k, p in work.params.items()}
            adam_step(work.params, grads, state, lr, config.beta1, config.beta2, config.adam_eps)
            for p in work.params.values():
                p.grad = None
            losses.append(value * len(y))

        val_loss, val_acc = _loss_and_accuracy(work, val_rgb, val_idx if index_on else None, val_y, 64)
        train_loss = float(np.sum(losses) / len(train_set))
        history.epochs.append(EpochRecord(epoch + 1, train_loss, val_loss, val_acc, lr))
        if progress is not None:
            progress(history.epochs[-1], time.perf_counter() - t0)
        logger.info("epoch %d train %.4f val %.4f acc %.4f lr %.2e", epoch + 1, train_loss, val_loss, val_acc, lr)

        if val_loss < best_loss:
            best_loss, best_model, since_best = val_loss, work.copy(), 0
            history.best_epoch = epoch + 1
        else:
            since_best += 1
        lr = lr_schedule(sched, val_loss)
        if since_best >= config.early_stop_patience:
            history.stop_reason = f"early_stop: no validation-loss improvement for {since_best} epochs"
            break
    else:
        history.stop_reason = "max_epochs"
    return best_model, history


def evaluate(model: Model, dataset: Dataset, image_size: int | None = None, nir_proxy: bool = False,
             batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Infer-mode predictions in dataset order; argmax ties go to the lowest class index."""
    if dataset.num_classes != model.config.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model has {model.config.num_classes}")
    k = model.config.num_classes
    if not len(dataset):
        return np.zeros(0, dtype=np.int64), np.zeros((0, k))
    rgb, idx, _ = dataset_arrays(dataset, image_size, nir_proxy)
    if not model.config.index_branch_enabled:
        idx = None
    probs = []
    for i in range(0, len(rgb), batch_size):
        out = forward(model, rgb[i : i + batch_size], None if idx is None else idx[i : i + batch_size])
        probs.append(out.probabilities.data.astype(np.float64))
    probs = np.concatenate(probs)
    return np.argmax(probs, axis=1), probs


@dataclass
class KFoldResult:
    config_names: list[str]
    accuracy: np.ndarray  # [k, n_configs]; NaN where training failed
    errors: dict[str, str] = field(default_factory=dict)  # "fold/config" -> message
    histories: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "configs": list(self.config_names),
            "accuracy": [[None if math.isnan(v) else float(v) for v in row] for row in self.accuracy],
            "errors": dict(self.errors),
        }


def holdout_split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    labels = dataset.labels()
    rng = Rng(seed)
    keep, held = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(labels == c)
        if not len(idx):
            continue
        perm = idx[rng.child(c).permutation(len(idx))]
        n_held = max(1, int(round(len(idx) * fraction))) if len(idx) > 1 else 0
        held.extend(perm[:n_held])
        keep.extend(perm[n_held:])
    return dataset.subset(sorted(keep)), dataset.subset(sorted(held))


def run_kfold(dataset: Dataset, model_configs, train_config: TrainConfig, k: int = 5,
              val_fraction: float = 0.1, progress=None) -> KFoldResult:
    """Train every config on every fold and tabulate test-fold accuracies.

    ``model_configs`` is a list of ModelConfig or a {name: ModelConfig} dict.
    Each fold carves a stratified validation holdout from its training part.
    A failure in one (fold, config) cell is recorded and the rest still run.
    """
    if isinstance(model_configs, dict):
        names, configs = list(model_configs), list(model_configs.values())
    else:
        configs = list(model_configs)
        names = [f"config{i}" for i in range(len(configs))]
    folds = kfold_split(dataset, k, train_config.seed)
    acc = np.full((k, len(configs)), np.nan)
    result = KFoldResult(names, acc)
    for f, (train_part, test_part) in enumerate(folds):
        fit_set, val_set = holdout_split(train_part, val_fraction, train_config.seed + 7919 * (f + 1))
        for j, (name, cfg) in enumerate(zip(names, configs)):
            try:
                model = build_model(cfg, Rng(train_config.seed).child(3, f))
                best, hist = train(model, fit_set, val_set, train_config)
                pred, _ = evaluate(best, test_part, train_config.image_size, train_config.nir_proxy)
                acc[f, j] = float((pred == test_part.labels()).mean())
                result.histories[f"{f}/{name}"] = hist.to_json()
            except Exception as exc:  # keep the other cells running
                logger.warning("fold %d config %s failed: %s", f, name, exc)
                result.errors[f"{f}/{name}"] = f"{type(exc).__name__}: {exc}"
            if progress is not None:
                progress(f, name, acc[f, j])
    return result
