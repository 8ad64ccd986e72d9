"""XMACNet-style two-branch classifier.

RGB branch: a stem conv followed by a stack of Fused-MBConv-like ("fused") and
MBConv-like ("separable") stages.  Index branch: conv-BN-ReLU layers over the
normalized (NDVI, NPCI, MCARI) stack.  The two feature maps are concatenated
along channels, mixed by a 1x1 conv, passed through a residual self-attention
block and classified with GAP -> dropout -> linear -> softmax.

Squeeze-excitation is left out of the separable blocks and ReLU is the only
activation.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tape, Tensor


class ConfigError(ValueError):
    """Invalid or self-inconsistent model configuration."""


@dataclass
class StageSpec:
    block_kind: str  # "fused" | "separable"
    depth: int
    out_channels: int
    stride: int
    expand_ratio: int = 2


@dataclass
class IndexStageSpec:
    out_channels: int
    stride: int
    kernel: int = 3


@dataclass
class AttentionSpec:
    enabled: bool = True
    reduction: int = 8


def _toy_rgb_stages() -> list[StageSpec]:
    return [
        StageSpec("fused", 2, 24, 2, expand_ratio=2),
        StageSpec("fused", 2, 48, 2, expand_ratio=2),
        StageSpec("separable", 2, 96, 2, expand_ratio=4),
    ]


def _toy_index_stages() -> list[IndexStageSpec]:
    return [IndexStageSpec(16, 2, 3), IndexStageSpec(32, 2, 3), IndexStageSpec(96, 4, 5)]


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (224, 224)
    num_classes: int = 6
    stem_channels: int = 16
    stem_stride: int = 2
    rgb_stages: list[StageSpec] = field(default_factory=_toy_rgb_stages)
    index_stages: list[IndexStageSpec] = field(default_factory=_toy_index_stages)
    fusion_channels: int = 96
    attention: AttentionSpec = field(default_factory=AttentionSpec)
    index_branch_enabled: bool = True
    dropout_rate: float = 0.2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    preset: str = "toy"

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        cfg = cls(**overrides)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        try:
            d["input_size"] = tuple(d["input_size"])
            d["rgb_stages"] = [StageSpec(**s) for s in d["rgb_stages"]]
            d["index_stages"] = [IndexStageSpec(**s) for s in d["index_stages"]]
            d["attention"] = AttentionSpec(**d["attention"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model config: {exc}") from None

    # -- geometry

    def rgb_output_shape(self) -> tuple[int, int, int]:
        h, w = self.input_size
        h, w = _conv_out(h, 3, self.stem_stride, 1), _conv_out(w, 3, self.stem_stride, 1)
        c = self.stem_channels
        for st in self.rgb_stages:
            for b in range(st.depth):
                s = st.stride if b == 0 else 1
                h, w = _conv_out(h, 3, s, 1), _conv_out(w, 3, s, 1)
            c = st.out_channels
        return c, h, w

    def index_output_shape(self) -> tuple[int, int, int]:
        h, w = self.input_size
        c = 3
        for st in self.index_stages:
            h, w = _conv_out(h, st.kernel, st.stride, st.kernel // 2), _conv_out(w, st.kernel, st.stride, st.kernel // 2)
            c = st.out_channels
        return c, h, w

    def feature_channels(self) -> int:
        """Channels of the map that feeds attention / GAP."""
        return self.fusion_channels if self.index_branch_enabled else self.rgb_output_shape()[0]

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError(f"input_size must be two positive ints, got {self.input_size}")
        for st in self.rgb_stages:
            if st.block_kind not in ("fused", "separable"):
                raise ConfigError(f"unknown block_kind {st.block_kind!r}")
            if st.depth < 1 or st.out_channels < 1 or st.stride < 1 or st.expand_ratio < 1:
                raise ConfigError(f"invalid stage spec {st}")
        for st in self.index_stages:
            if st.out_channels < 1 or st.stride < 1 or st.kernel < 1 or st.kernel % 2 == 0:
                raise ConfigError(f"invalid index stage spec {st}")
        if self.index_branch_enabled:
            if not self.index_stages:
                raise ConfigError("index branch enabled but no index stages configured")
            rgb, idx = self.rgb_output_shape(), self.index_output_shape()
            if rgb[1:] != idx[1:]:
                raise ConfigError(
                    f"fusion-point spatial mismatch: RGB branch gives {rgb[1]}x{rgb[2]} "
                    f"(shape {rgb}), index branch gives {idx[1]}x{idx[2]} (shape {idx})"
                )
        if self.attention.enabled:
            c = self.feature_channels()
            if self.attention.reduction < 1 or c % self.attention.reduction:
                raise ConfigError(
                    f"attention reduction {self.attention.reduction} does not divide {c} channels"
                )


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


# ---------------------------------------------------------------- parameters


class Model:
    """A config plus its named parameters and batchnorm running statistics."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return Model(copy.deepcopy(self.config), params, {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "Model":
        dtype = np.dtype(dtype)
        params = {}
        with ad.precision(dtype):
            for k, v in self.params.items():
                params[k] = Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
        return Model(copy.deepcopy(self.config), params, {k: v.astype(dtype) for k, v in self.buffers.items()})

    def load_state(self, other: "Model") -> None:
        """Copy parameter values and buffers from ``other`` in place."""
        for k, v in other.params.items():
            self.params[k].data = v.data.copy()
        for k, v in other.buffers.items():
            self.buffers[k] = v.copy()

    def forward(self, rgb, index=None, mode: str = "infer", rng: Rng | None = None, grad: bool | None = None):
        return forward(self, rgb, index, mode=mode, rng=rng, grad=grad)


class _Builder:
    def __init__(self, rng: Rng):
        self.rng = rng
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _add(self, name, arr):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def conv(self, name, cout, cin, k, bias=False, depthwise=False):
        fan_in = k * k if depthwise else cin * k * k
        shape = (cout, 1, k, k) if depthwise else (cout, cin, k, k)
        self._add(f"{name}.weight", self.rng.normal(0.0, math.sqrt(2.0 / fan_in), shape))
        if bias:
            self._add(f"{name}.bias", np.zeros(cout))

    def bn(self, name, c):
        self._add(f"{name}.gamma", np.ones(c))
        self._add(f"{name}.beta", np.zeros(c))
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=ad.default_dtype())
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=ad.default_dtype())

    def linear(self, name, dout, din):
        self._add(f"{name}.weight", self.rng.normal(0.0, math.sqrt(2.0 / din), (dout, din)))
        self._add(f"{name}.bias", np.zeros(dout))


def build_model(config: ModelConfig, rng: Rng | int = 0) -> Model:
    """Instantiate parameters for ``config``; deterministic given the seed."""
    config.validate()
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    b = _Builder(rng)

    b.conv("stem.conv", config.stem_channels, 3, 3)
    b.bn("stem.bn", config.stem_channels)
    cin = config.stem_channels
    for si, st in enumerate(config.rgb_stages):
        for bi in range(st.depth):
            p = f"rgb.s{si}.b{bi}"
            hidden = cin * st.expand_ratio
            if st.block_kind == "fused":
                b.conv(f"{p}.expand", hidden, cin, 3)
                b.bn(f"{p}.expand_bn", hidden)
            else:
                b.conv(f"{p}.expand", hidden, cin, 1)
                b.bn(f"{p}.expand_bn", hidden)
                b.conv(f"{p}.dw", hidden, hidden, 3, depthwise=True)
                b.bn(f"{p}.dw_bn", hidden)
            b.conv(f"{p}.project", st.out_channels, hidden, 1)
            b.bn(f"{p}.project_bn", st.out_channels)
            cin = st.out_channels
    rgb_c = cin

    if config.index_branch_enabled:
        cin = 3
        for i, st in enumerate(config.index_stages):
            b.conv(f"index.l{i}.conv", st.out_channels, cin, st.kernel)
            b.bn(f"index.l{i}.bn", st.out_channels)
            cin = st.out_channels
        b.conv("fusion.conv", config.fusion_channels, rgb_c + cin, 1)
        b.bn("fusion.bn", config.fusion_channels)

    c = config.feature_channels()
    if config.attention.enabled:
        cr = c // config.attention.reduction
        b.conv("attention.query", cr, c, 1, bias=True)
        b.conv("attention.key", cr, c, 1, bias=True)
        b.conv("attention.value", c, c, 1, bias=True)
        b._add("attention.gamma", np.zeros(1))

    b.linear("head", config.num_classes, c)
    return Model(config, b.params, b.buffers)


def parameter_count(model: Model) -> int:
    """Total trainable scalars (batchnorm gamma/beta included, running stats excluded)."""
    return int(sum(t.size for t in model.params.values()))


# ---------------------------------------------------------------- forward


@dataclass
class ForwardOutput:
    logits: Tensor
    probabilities: Tensor
    attended_features: Tensor
    tape: Tape
    attention_weights: np.ndarray | None = None


def self_attention_block(
    features: Tensor,
    query: tuple[Tensor, Tensor],
    key: tuple[Tensor, Tensor],
    value: tuple[Tensor, Tensor],
    gamma: Tensor,
    reduction: int,
) -> tuple[Tensor, Tensor]:
    """Single-head non-local attention with a learned residual scale.

    Returns ``(features + gamma * attended_values, attention)`` where
    ``attention`` is [N, hw, hw] with rows (queries) summing to one.
    """
    n, c, h, w = features.shape
    if reduction < 1 or c % reduction:
        raise ConfigError(f"attention reduction {reduction} does not divide {c} channels")
    cr = c // reduction
    if query[0].shape[0] != cr or key[0].shape[0] != cr:
        raise ConfigError(f"query/key projections must have {cr} output channels")
    hw = h * w
    q = ad.reshape(ad.conv2d(features, *query), (n, cr, hw))
    k = ad.reshape(ad.conv2d(features, *key), (n, cr, hw))
    v = ad.reshape(ad.conv2d(features, *value), (n, c, hw))
    scale = Tensor(np.asarray(1.0 / math.sqrt(cr)))
    scores = ad.mul(ad.matmul_batched(ad.swap_last_axes(q), k), scale)
    attn = ad.softmax(scores)
    mixed = ad.reshape(ad.matmul_batched(v, ad.swap_last_axes(attn)), (n, c, h, w))
    return ad.add(features, ad.mul(mixed, gamma)), attn


def _as_input(x, name, n_channels=3) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim != 4 or t.shape[1] != n_channels:
        raise ad.ShapeError(f"{name} input must be [N,{n_channels},H,W], got shape {t.shape}")
    return t


def forward(
    model: Model,
    rgb,
    index=None,
    mode: str = "infer",
    rng: Rng | None = None,
    grad: bool | None = None,
    tape: Tape | None = None,
) -> ForwardOutput:
    """Run the network.

    ``grad`` controls recording (default: on in train mode only).  Grad-CAM++
    passes ``grad=True`` in infer mode to differentiate the class score.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = model.config
    training = mode == "train"
    if grad is None:
        grad = training
    rgb = _as_input(rgb, "rgb")
    if rgb.shape[2:] != tuple(cfg.input_size):
        raise ad.ShapeError(f"rgb spatial size {rgb.shape[2:]} does not match config input_size {tuple(cfg.input_size)}")
    if cfg.index_branch_enabled:
        if index is None:
            raise ValueError("model has the index branch enabled but no index tensor was supplied")
        index = _as_input(index, "index")
        if index.shape != rgb.shape:
            raise ad.ShapeError(f"index shape {index.shape} does not match rgb shape {rgb.shape}")
    else:
        index = None  # ablated branch: contents are ignored by construction

    tape = tape if tape is not None else Tape()
    ctx = tape if grad else ad.no_grad()
    P, B = model.params, model.buffers

    def bn(x, name):
        return ad.batchnorm2d(
            x, P[f"{name}.gamma"], P[f"{name}.beta"],
            B[f"{name}.running_mean"], B[f"{name}.running_var"],
            training, cfg.bn_momentum, cfg.bn_eps,
        )

    with ctx:
        x = ad.relu(bn(ad.conv2d(rgb, P["stem.conv.weight"], stride=cfg.stem_stride, padding=1), "stem.bn"))
        cin = cfg.stem_channels
        for si, st in enumerate(cfg.rgb_stages):
            for bi in range(st.depth):
                p = f"rgb.s{si}.b{bi}"
                s = st.stride if bi == 0 else 1
                if st.block_kind == "fused":
                    y = ad.relu(bn(ad.conv2d(x, P[f"{p}.expand.weight"], stride=s, padding=1), f"{p}.expand_bn"))
                else:
                    y = ad.relu(bn(ad.conv2d(x, P[f"{p}.expand.weight"]), f"{p}.expand_bn"))
                    y = ad.relu(bn(ad.depthwise_conv2d(y, P[f"{p}.dw.weight"], stride=s, padding=1), f"{p}.dw_bn"))
                y = bn(ad.conv2d(y, P[f"{p}.project.weight"]), f"{p}.project_bn")
                if s == 1 and cin == st.out_channels:
                    y = ad.add(x, y)
                x = y
                cin = st.out_channels

        if cfg.index_branch_enabled:
            z = index
            for i, st in enumerate(cfg.index_stages):
                z = ad.relu(
                    bn(ad.conv2d(z, P[f"index.l{i}.conv.weight"], stride=st.stride, padding=st.kernel // 2), f"index.l{i}.bn")
                )
            x = ad.concat_channels(x, z)
            x = ad.relu(bn(ad.conv2d(x, P["fusion.conv.weight"]), "fusion.bn"))

        attn = None
        if cfg.attention.enabled:
            x, attn_t = self_attention_block(
                x,
                (P["attention.query.weight"], P["attention.query.bias"]),
                (P["attention.key.weight"], P["attention.key.bias"]),
                (P["attention.value.weight"], P["attention.value.bias"]),
                P["attention.gamma"],
                cfg.attention.reduction,
            )
            attn = attn_t.data
        attended = x

        pooled = ad.global_avg_pool(attended)
        pooled = ad.dropout(pooled, cfg.dropout_rate, rng, training)
        logits = ad.linear(pooled, P["head.weight"], P["head.bias"])
        probs = ad.softmax(logits)
    return ForwardOutput(logits, probs, attended, tape, attn)


def predict_proba(model: Model, rgb: np.ndarray, index: np.ndarray | None, batch_size: int = 64) -> np.ndarray:
    """Infer-mode class probabilities for arrays of inputs, batched."""
    out = []
    for i in range(0, len(rgb), batch_size):
        idx = None if index is None else index[i : i + batch_size]
        out.append(forward(model, rgb[i : i + batch_size], idx).probabilities.data)
    if not out:
        return np.zeros((0, model.config.num_classes))
    return np.concatenate(out)


def iter_named(model: Model) -> Iterable[tuple[str, np.ndarray]]:
    """Parameters then buffers, in their stable build order."""
    yield from ((k, v.data) for k, v in model.params.items())
    yield from model.buffers.items()
