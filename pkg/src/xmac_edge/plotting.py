"""Report figures rendered to PNG files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import ConfusionMatrix, RocResult  # noqa: E402

_META = {"Software": None}  # keep PNG bytes free of version strings


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata=_META)
    plt.close(fig)
    return path


def plot_confusion_matrix(cm: ConfusionMatrix, path) -> Path:
    k = len(cm.class_names)
    fig, ax = plt.subplots(figsize=(1.1 * k + 2.5, 1.0 * k + 2))
    im = ax.imshow(cm.counts, cmap="Blues")
    thresh = cm.counts.max() / 2.0 if cm.counts.size else 0
    for i in range(k):
        for j in range(k):
            v = int(cm.counts[i, j])
            ax.text(j, i, str(v), ha="center", va="center", color="white" if v > thresh else "black", fontsize=9)
    ax.set_xticks(range(k), cm.class_names, rotation=45, ha="right")
    ax.set_yticks(range(k), cm.class_names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    ax.set_title("Confusion matrix")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_roc(roc: RocResult, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    for name, cur in roc.curves.items():
        ax.plot(cur.fpr, cur.tpr, lw=1.5, label=f"{name} (AUC = {roc.aucs[name]:.2f})")
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title("One-vs-rest ROC")
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_training_curves(history: dict, path) -> Path:
    """``history`` is the JSON form of a TrainHistory."""
    epochs = [e["epoch"] for e in history["epochs"]]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    a1.plot(epochs, [e["train_loss"] for e in history["epochs"]], label="train")
    a1.plot(epochs, [e["val_loss"] for e in history["epochs"]], label="validation")
    a1.set_xlabel("epoch")
    a1.set_ylabel("loss")
    a1.legend()
    a2.plot(epochs, [e["val_accuracy"] for e in history["epochs"]], color="C1")
    a2.set_xlabel("epoch")
    a2.set_ylabel("validation accuracy")
    a2.set_ylim(0, 1.02)
    best = history.get("best_epoch")
    if best is not None:
        for ax in (a1, a2):
            ax.axvline(best, color="grey", ls=":", lw=1)
    return _save(fig, path)


def plot_channel_shap(means: np.ndarray, feature_ids, class_labels, path) -> Path:
    """Grouped bars of mean channel attribution, one group per class."""
    means = np.atleast_2d(means)
    n_cls, m = means.shape
    width = 0.8 / m
    fig, ax = plt.subplots(figsize=(max(6, 1.4 * n_cls + 2), 4))
    x = np.arange(n_cls)
    for j in range(m):
        ax.bar(x + (j - (m - 1) / 2) * width, means[:, j], width, label=feature_ids[j])
    ax.axhline(0, color="k", lw=0.6)
    ax.set_xticks(x, class_labels, rotation=30, ha="right")
    ax.set_ylabel("mean SHAP value")
    ax.set_title("Per-channel attribution")
    ax.legend(fontsize=8, ncol=min(m, 6))
    return _save(fig, path)


def plot_kfold(accuracy: np.ndarray, names, path) -> Path:
    acc = np.asarray(accuracy, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    folds = np.arange(1, acc.shape[0] + 1)
    for j, name in enumerate(names):
        ax.plot(folds, acc[:, j], "o-", label=name)
    ax.set_xticks(folds)
    ax.set_xlabel("fold")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend()
    return _save(fig, path)


def plot_saliency(rgb: np.ndarray, saliency: np.ndarray, path, title: str = "") -> Path:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 4))
    a1.imshow(np.clip(np.transpose(rgb, (1, 2, 0)), 0, 1))
    a1.set_title("input")
    im = a2.imshow(saliency, cmap="coolwarm", vmin=0, vmax=1)
    a2.set_title(title or "saliency")
    for ax in (a1, a2):
        ax.axis("off")
    fig.colorbar(im, ax=a2, fraction=0.046)
    return _save(fig, path)
