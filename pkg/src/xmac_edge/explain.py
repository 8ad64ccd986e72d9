"""Grad-CAM++ saliency and Shapley attributions over the six input planes.

The model input is treated as six planes: R, G, B, NDVI, NPCI, MCARI.
Explainable features are either whole planes ("channels") or g x g pixel
patches spanning all planes ("patches").  A feature that is switched off is
replaced by a per-plane background value, normally the training-set mean of
that plane (0.5 when no dataset is available).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .vegindex import MultibandImage

PLANE_NAMES = ("R", "G", "B", "NDVI", "NPCI", "MCARI")
MAX_EXACT_FEATURES = 12


class InsufficientSamplesError(ValueError):
    pass


class TooManyFeaturesError(ValueError):
    pass


# ---------------------------------------------------------------- Grad-CAM++


@dataclass
class SaliencyMap:
    values: np.ndarray  # [H, W] in [0, 1]
    target_class: int
    source_layer: str
    raw: np.ndarray | None = None  # un-normalized map at feature resolution

    def to_json(self) -> dict:
        return {
            "target_class": self.target_class,
            "source_layer": self.source_layer,
            "shape": list(self.values.shape),
            "values": np.round(self.values, 8).tolist(),
            "raw": None if self.raw is None else np.round(self.raw, 8).tolist(),
        }


def gradcam_pp_weights(activations: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Per-channel Grad-CAM++ weights for activations/gradients of shape [C, h, w].

    Uses the exponential-score closed form: with Y = exp(S), the second and
    third derivatives of Y are exp(S) * g**2 and exp(S) * g**3, so alpha only
    needs first derivatives g = dS/dA.  The common exp(S) factor in the
    channel weights is dropped since maps are max-normalized afterwards.
    """
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    g2, g3 = g * g, g * g * g
    denom = 2.0 * g2 + a.sum(axis=(1, 2), keepdims=True) * g3
    alpha = np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0)
    return (alpha * np.maximum(g, 0.0)).sum(axis=(1, 2))


def gradcam_pp_raw(activations: np.ndarray, grads: np.ndarray) -> np.ndarray:
    w = gradcam_pp_weights(activations, grads)
    return np.maximum(np.tensordot(w, np.asarray(activations, dtype=np.float64), axes=1), 0.0)


def normalize_saliency(raw: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    up = np.maximum(ad.bilinear_resize(raw, out_h, out_w), 0.0)
    peak = up.max()
    if peak <= 0:
        return np.zeros_like(up)
    return np.clip(up / peak, 0.0, 1.0)


def _batch1(x, name):
    if x is None:
        return None
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"{name}: expected a single sample [3,H,W] or [1,3,H,W], got shape {x.shape}")
    return x


def gradcam_pp(model, rgb, index, target_class: int) -> SaliencyMap:
    """Grad-CAM++ map for ``target_class`` from the post-attention feature map.

    ``model`` is anything whose ``forward(rgb, index, mode=..., grad=...)``
    returns an object exposing ``logits``, ``attended_features`` and ``tape``.
    """
    rgb = _batch1(rgb, "rgb")
    index = _batch1(index, "index")
    out = model.forward(rgb, index, mode="infer", grad=True)
    k = out.logits.shape[1]
    if not 0 <= target_class < k:
        raise ValueError(f"target class {target_class} outside [0, {k})")
    onehot = np.zeros(out.logits.shape, dtype=out.logits.data.dtype)
    onehot[0, target_class] = 1.0
    with out.tape:
        score = ad.tensor_sum(ad.mul(out.logits, Tensor(onehot)))
    feats = out.attended_features
    ad.backward(out.tape, score)
    a = feats.data[0]
    g = feats.grad[0] if feats.grad is not None else np.zeros_like(a)
    for p in getattr(model, "params", {}).values():  # leave the model as we found it
        p.grad = None
    raw = gradcam_pp_raw(a, g)
    values = normalize_saliency(raw, rgb.shape[2], rgb.shape[3])
    return SaliencyMap(values, target_class, "attended_features", raw)


def overlay_heatmap(img: MultibandImage, saliency: SaliencyMap, alpha: float = 0.5) -> MultibandImage:
    """Blend the RGB image with a blue (0) to red (1) coloring of the saliency."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    s = np.asarray(saliency.values, dtype=np.float64)
    if s.shape != (img.height, img.width):
        raise ValueError(f"saliency map {s.shape} does not match image {(img.height, img.width)}")
    color = (s, np.zeros_like(s), 1.0 - s)
    bands = dict(img.bands)
    for name, c in zip(("red", "green", "blue"), color):
        bands[name] = np.clip((1.0 - alpha) * img.bands[name] + alpha * c, 0.0, 1.0)
    return MultibandImage(bands, dict(img.meta))


def lesion_mass_ratio(saliency: np.ndarray, boxes) -> float:
    """Saliency mass inside the union of boxes, relative to a uniform map's share."""
    mask = np.zeros(saliency.shape, dtype=bool)
    for r0, c0, r1, c1 in boxes:
        mask[r0:r1, c0:c1] = True
    total = float(saliency.sum())
    if total <= 0 or not mask.any():
        return 0.0
    return (float(saliency[mask].sum()) / total) / (mask.mean())


# ---------------------------------------------------------------- features


@dataclass
class FeatureSpec:
    mode: str  # "channels" | "patches"
    height: int
    width: int
    patch: int = 0

    @classmethod
    def channels(cls, height: int, width: int) -> "FeatureSpec":
        return cls("channels", height, width)

    @classmethod
    def patches(cls, height: int, width: int, patch: int | None = None) -> "FeatureSpec":
        if patch is None:
            patch = default_patch_size(height, width)
        if patch < 1:
            raise ValueError("patch size must be >= 1")
        return cls("patches", height, width, patch)

    @property
    def n_features(self) -> int:
        if self.mode == "channels":
            return len(PLANE_NAMES)
        return math.ceil(self.height / self.patch) * math.ceil(self.width / self.patch)

    def feature_ids(self) -> list[str]:
        if self.mode == "channels":
            return list(PLANE_NAMES)
        nc = math.ceil(self.width / self.patch)
        return [f"patch_r{i // nc}_c{i % nc}" for i in range(self.n_features)]

    def _patch_ids(self) -> np.ndarray:
        rows = np.arange(self.height) // self.patch
        cols = np.arange(self.width) // self.patch
        return rows[:, None] * math.ceil(self.width / self.patch) + cols[None, :]

    def compose(self, z: np.ndarray, planes: np.ndarray, background: np.ndarray) -> np.ndarray:
        """Masked inputs [B, 6, H, W] for coalitions ``z`` [B, M]."""
        z = np.asarray(z, dtype=bool)
        bg = np.broadcast_to(np.asarray(background, dtype=planes.dtype).reshape(6, 1, 1), planes.shape)
        if self.mode == "channels":
            keep = z[:, :, None, None]
        elif self.mode == "patches":
            keep = z[:, self._patch_ids()][:, None, :, :]
        else:
            raise ValueError(f"unknown feature mode {self.mode!r}")
        return np.where(keep, planes[None], bg[None])


def default_patch_size(height: int, width: int, max_features: int = 196) -> int:
    g = 1
    while math.ceil(height / g) * math.ceil(width / g) > max_features:
        g += 1
    return g


def plane_means(rgb: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Per-plane means over a stack of samples, used as the masking baseline."""
    return np.concatenate([rgb.mean(axis=(0, 2, 3)), index.mean(axis=(0, 2, 3))]).astype(np.float64)


# ---------------------------------------------------------------- Shapley


@dataclass
class Attribution:
    values: np.ndarray
    base_value: float
    target_class: int
    mode: str  # "exact" | "sampled"
    feature_mode: str
    feature_ids: list[str] = field(default_factory=list)
    n_samples: int | None = None
    full_value: float | None = None

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "class": self.target_class,
            "base_value": self.base_value,
            "feature_ids": list(self.feature_ids),
            "values": [float(v) for v in self.values],
            "n_samples": self.n_samples,
        }


ValueFn = Callable[[np.ndarray], np.ndarray]  # coalitions [B, M] bool -> values [B]


def _all_coalitions(m: int) -> np.ndarray:
    codes = np.arange(2**m)
    return ((codes[:, None] >> np.arange(m)[None, :]) & 1).astype(bool)


def shapley_exact_game(value_fn: ValueFn, m: int) -> tuple[np.ndarray, float, float]:
    """Brute-force Shapley values of a game with ``m`` players.

    Returns ``(phi, v(empty), v(full))``.
    """
    if m > MAX_EXACT_FEATURES:
        raise TooManyFeaturesError(
            f"exact Shapley needs 2^{m} evaluations; use kernel_shap for more than {MAX_EXACT_FEATURES} features"
        )
    z = _all_coalitions(m)
    v = np.asarray(value_fn(z), dtype=np.float64).reshape(-1)
    sizes = z.sum(axis=1)
    fact = [math.factorial(i) for i in range(m + 1)]
    codes = np.arange(2**m)
    phi = np.zeros(m)
    for i in range(m):
        without = codes[(codes >> i) & 1 == 0]
        s = sizes[without]
        w = np.array([fact[k] * fact[m - k - 1] / fact[m] for k in s])
        phi[i] = np.sum(w * (v[without | (1 << i)] - v[without]))
    return phi, float(v[0]), float(v[-1])


def kernel_weight(m: int, size) -> np.ndarray:
    size = np.asarray(size, dtype=np.float64)
    binom = np.array([math.comb(m, int(s)) for s in np.atleast_1d(size)], dtype=np.float64).reshape(size.shape)
    return (m - 1) / (binom * size * (m - size))


def sample_coalitions(m: int, n_samples: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n_samples - 2`` interior coalitions, plus the empty and full ones.

    Sizes are drawn with probability proportional to their total kernel mass
    and members uniformly within a size, so each coalition is drawn with
    probability proportional to its kernel weight; duplicate draws are merged
    and their counts become the regression weights.
    """
    if n_samples < m + 2:
        raise InsufficientSamplesError(f"kernel SHAP needs at least M+2={m + 2} samples, got {n_samples}")
    sizes = np.arange(1, m)
    p = (m - 1) / (sizes * (m - sizes))
    p = p / p.sum()
    counts: dict[bytes, int] = {}
    order: list[np.ndarray] = []
    for _ in range(n_samples - 2):
        s = int(rng.choice(sizes, p=p))
        zi = np.zeros(m, dtype=bool)
        zi[rng.permutation(m)[:s]] = True
        key = zi.tobytes()
        if key not in counts:
            counts[key] = 0
            order.append(zi)
        counts[key] += 1
    z = np.array(order, dtype=bool).reshape(-1, m)
    w = np.array([counts[zi.tobytes()] for zi in z], dtype=np.float64)
    return z, w


def _constrained_wls(z: np.ndarray, y: np.ndarray, w: np.ndarray, total: float) -> np.ndarray:
    # minimise sum w (y - z.phi)^2 subject to sum(phi) = total, by eliminating the last coefficient
    m = z.shape[1]
    if m == 1:
        return np.array([total])
    zf = z.astype(np.float64)
    a = zf[:, :-1] - zf[:, -1:]
    b = y - zf[:, -1] * total
    sw = np.sqrt(w)
    head, *_ = np.linalg.lstsq(a * sw[:, None], b * sw, rcond=None)
    return np.r_[head, total - head.sum()]


def kernel_shap_game(value_fn: ValueFn, m: int, n_samples: int | None = None, rng: Rng | None = None,
                     exact: bool = False) -> tuple[np.ndarray, float, float, int]:
    """Kernel SHAP on a set function.  Returns ``(phi, base, full, n_evaluations)``."""
    if m < 1:
        raise ValueError("need at least one feature")
    ends = np.array([np.zeros(m, bool), np.ones(m, bool)])
    if m == 1:
        v = np.asarray(value_fn(ends), dtype=np.float64).reshape(-1)
        return np.array([v[1] - v[0]]), float(v[0]), float(v[1]), 2
    if exact:
        z = _all_coalitions(m)[1:-1]
        w = kernel_weight(m, z.sum(axis=1))
    else:
        if n_samples is None or rng is None:
            raise ValueError("sampled kernel SHAP needs n_samples and rng")
        z, w = sample_coalitions(m, n_samples, rng)
    v = np.asarray(value_fn(np.concatenate([ends, z])), dtype=np.float64).reshape(-1)
    base, full = float(v[0]), float(v[1])
    phi = _constrained_wls(z, v[2:] - base, w, full - base)
    return phi, base, full, len(v)


def shapley_exact_via_kernel(value_fn: ValueFn, m: int) -> np.ndarray:
    return kernel_shap_game(value_fn, m, exact=True)[0]


# ---------------------------------------------------------------- image-level wrappers


PredictFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def model_predict_fn(model, output: str = "probability", batch_size: int = 64) -> PredictFn:
    """Wrap a model as ``fn(rgb[B,3,H,W], index[B,3,H,W]) -> [B, K]``."""
    if output not in ("probability", "logit"):
        raise ValueError(f"output must be 'probability' or 'logit', got {output!r}")
    from .model import forward

    def fn(rgb, index):
        outs = []
        for i in range(0, len(rgb), batch_size):
            idx = index[i : i + batch_size] if model.config.index_branch_enabled else None
            o = forward(model, rgb[i : i + batch_size].astype(np.float32), None if idx is None else idx.astype(np.float32))
            outs.append((o.probabilities if output == "probability" else o.logits).data.astype(np.float64))
        return np.concatenate(outs)

    return fn


def _image_game(predict_fn: PredictFn, rgb, index, spec: FeatureSpec, target_class: int, background, batch: int = 256):
    rgb = np.asarray(rgb, dtype=np.float64).reshape(3, spec.height, spec.width)
    index = np.asarray(index, dtype=np.float64).reshape(3, spec.height, spec.width)
    planes = np.concatenate([rgb, index])
    bg = np.full(6, 0.5) if background is None else np.asarray(background, dtype=np.float64)

    def value_fn(z):
        vals = []
        for i in range(0, len(z), batch):
            x = spec.compose(z[i : i + batch], planes, bg)
            out = np.asarray(predict_fn(x[:, :3], x[:, 3:]), dtype=np.float64)
            vals.append(out[:, target_class] if out.ndim == 2 else out.reshape(-1))
        return np.concatenate(vals)

    return value_fn


def exact_shapley(predict_fn: PredictFn, rgb, index, spec: FeatureSpec, target_class: int = 0,
                  background=None) -> Attribution:
    """Shapley values of the input features by enumerating all 2^M coalitions."""
    game = _image_game(predict_fn, rgb, index, spec, target_class, background)
    phi, base, full = shapley_exact_game(game, spec.n_features)
    return Attribution(phi, base, target_class, "exact", spec.mode, spec.feature_ids(), 2**spec.n_features, full)


def kernel_shap(predict_fn: PredictFn, rgb, index, spec: FeatureSpec, target_class: int = 0,
                n_samples: int = 2048, rng: Rng | None = None, mode: str = "sampled",
                background=None) -> Attribution:
    """Kernel SHAP estimate; ``mode="exact"`` regresses on every coalition."""
    if mode not in ("sampled", "exact"):
        raise ValueError(f"mode must be 'sampled' or 'exact', got {mode!r}")
    m = spec.n_features
    if mode == "sampled" and n_samples < m + 2:
        raise InsufficientSamplesError(f"kernel SHAP needs at least M+2={m + 2} samples, got {n_samples}")
    if mode == "exact" and m > MAX_EXACT_FEATURES:
        raise TooManyFeaturesError(f"exact mode enumerates 2^{m} coalitions; use sampled mode")
    game = _image_game(predict_fn, rgb, index, spec, target_class, background)
    phi, base, full, _ = kernel_shap_game(game, m, n_samples, rng if rng is not None else Rng(0), exact=(mode == "exact"))
    return Attribution(phi, base, target_class, mode, spec.mode, spec.feature_ids(),
                       2**m if mode == "exact" else n_samples, full)


@dataclass
class ChannelShapTable:
    classes: list[int]
    feature_ids: list[str]
    means: np.ndarray  # [len(classes), M]
    counts: list[int]

    def to_json(self, class_names=None) -> dict:
        rows = {}
        for c, row, n in zip(self.classes, self.means, self.counts):
            key = class_names[c] if class_names is not None else str(c)
            rows[key] = {"n": n, **{f: float(v) for f, v in zip(self.feature_ids, row)}}
        return {"feature_ids": list(self.feature_ids), "classes": rows}


def aggregate_channel_shap(attributions: list[Attribution]) -> ChannelShapTable:
    """Mean channel attribution per target class."""
    if not attributions:
        raise ValueError("no attributions to aggregate")
    m = len(attributions[0].values)
    for a in attributions:
        if a.feature_mode != "channels":
            raise ValueError(f"aggregate_channel_shap needs channel-mode attributions, got {a.feature_mode!r}")
        if len(a.values) != m:
            raise ValueError("attributions have differing feature counts")
    classes = sorted({a.target_class for a in attributions})
    means, counts = [], []
    for c in classes:
        vals = np.array([a.values for a in attributions if a.target_class == c], dtype=np.float64)
        means.append(vals.mean(axis=0))
        counts.append(len(vals))
    return ChannelShapTable(classes, list(attributions[0].feature_ids), np.array(means), counts)
