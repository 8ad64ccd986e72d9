"""Dataset ingestion, preprocessing, splitting and the synthetic leaf generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Rng
from .pngio import read_image, write_image
from .vegindex import MultibandImage, build_index_stack


class DatasetError(ValueError):
    """Dataset directory or contents are unusable."""


class SplitError(ValueError):
    """A class is too small for the requested split."""


@dataclass
class LabeledSample:
    image: MultibandImage
    label: int
    class_name: str
    source: str = "real"  # "real" | "synthetic"
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    samples: list[LabeledSample]
    class_names: list[str]

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError(f"class names must be unique: {self.class_names}")
        for s in self.samples:
            if not 0 <= s.label < len(self.class_names):
                raise DatasetError(f"label {s.label} does not index {len(self.class_names)} classes")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], list(self.class_names))


IMAGE_SUFFIX = ".png"
NIR_SUFFIX = ".nir.png"


def load_dataset(root) -> Dataset:
    """Read ``root/<class>/*.png`` with optional ``<stem>.nir.png`` sidecars.

    Classes are sorted lexicographically; samples follow class order, then
    filename order.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} contains no class subdirectories")
    names = [p.name for p in class_dirs]
    samples = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(
            p for p in cdir.iterdir() if p.is_file() and p.name.endswith(IMAGE_SUFFIX) and not p.name.endswith(NIR_SUFFIX)
        )
        if not files:
            raise DatasetError(f"class directory {cdir} contains no images")
        for f in files:
            nir = f.with_name(f.name[: -len(IMAGE_SUFFIX)] + NIR_SUFFIX)
            img = read_image(f, nir if nir.exists() else None)
            samples.append(LabeledSample(img, label, cdir.name, "real", {"path": str(f)}))
    return Dataset(samples, names)


def write_dataset(dataset: Dataset, root, bitdepth: int = 8) -> None:
    """Write the class-per-directory layout that :func:`load_dataset` reads.

    Lesion boxes of synthetic samples go to ``root/synth_meta.json``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counters: dict[str, int] = {}
    meta = {}
    for s in dataset.samples:
        d = root / s.class_name
        d.mkdir(exist_ok=True)
        i = counters.get(s.class_name, 0)
        counters[s.class_name] = i + 1
        stem = f"{s.class_name}_{i:05d}"
        write_image(s.image, d / f"{stem}{IMAGE_SUFFIX}", bitdepth, d / f"{stem}{NIR_SUFFIX}")
        if "lesion_boxes" in s.meta:
            meta[f"{s.class_name}/{stem}{IMAGE_SUFFIX}"] = s.meta["lesion_boxes"]
    if meta:
        (root / "synth_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


# ---------------------------------------------------------------- geometry / photometry


def _map_bands(img: MultibandImage, fn) -> MultibandImage:
    return MultibandImage({k: fn(v) for k, v in img.bands.items()}, dict(img.meta))


def center_crop(img: MultibandImage, size: int) -> MultibandImage:
    """Centered size x size patch; smaller images are edge-replicated first."""
    h, w = img.height, img.width

    def crop(band):
        ph, pw = max(0, size - h), max(0, size - w)
        if ph or pw:
            band = np.pad(band, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)), mode="edge")
        top = (band.shape[0] - size) // 2
        left = (band.shape[1] - size) // 2
        return band[top : top + size, left : left + size]

    return _map_bands(img, crop)


def rotate90(img: MultibandImage, k: int) -> MultibandImage:
    return _map_bands(img, lambda b: np.rot90(b, k).copy())


def flip(img: MultibandImage, horizontal: bool) -> MultibandImage:
    return _map_bands(img, lambda b: (b[:, ::-1] if horizontal else b[::-1, :]).copy())


@dataclass
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotate: bool = True
    brightness: float = 0.1  # offset ~ U(-b, b)
    contrast: float = 0.1  # scale ~ U(1-c, 1+c)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, False, 0.0, 0.0)


def augment(sample: LabeledSample, config: AugmentConfig, rng: Rng) -> LabeledSample:
    """Random flips, 90-degree rotation, brightness/contrast jitter.

    Geometric transforms hit every band including NIR; photometric jitter is
    applied to RGB only (around the RGB mean) and clamped to [0, 1].
    """
    img = sample.image
    # draw everything up front so the stream does not depend on which branches fire
    hf = rng.random() < config.hflip_p
    vf = rng.random() < config.vflip_p
    k = int(rng.integers(0, 4)) if config.rotate else 0
    b = rng.uniform(-config.brightness, config.brightness) if config.brightness else 0.0
    c = rng.uniform(1 - config.contrast, 1 + config.contrast) if config.contrast else 1.0
    if hf:
        img = flip(img, True)
    if vf:
        img = flip(img, False)
    if k:
        img = rotate90(img, k)
    if config.brightness or config.contrast:
        bands = dict(img.bands)
        mean = float(np.mean([bands[n] for n in ("red", "green", "blue")]))
        for n in ("red", "green", "blue"):
            bands[n] = np.clip((bands[n] - mean) * c + mean + b, 0.0, 1.0)
        img = MultibandImage(bands, dict(img.meta))
    meta = {key: v for key, v in sample.meta.items() if key != "lesion_boxes"}
    return replace(sample, image=img, meta=meta)


# ---------------------------------------------------------------- splitting


@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or min(self.ratios) <= 0 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise SplitError(f"split ratios must be three positive values summing to 1, got {self.ratios}")


def _class_indices(dataset: Dataset) -> list[np.ndarray]:
    labels = dataset.labels()
    return [np.flatnonzero(labels == c) for c in range(dataset.num_classes)]


def stratified_split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    rng = Rng(spec.seed)
    parts: list[list[int]] = [[], [], []]
    for c, idx in enumerate(_class_indices(dataset)):
        if len(idx) == 0:
            continue
        if len(idx) < 3:
            raise SplitError(f"class {dataset.class_names[c]!r} has {len(idx)} samples; stratifying needs >= 3")
        perm = idx[rng.child(c).permutation(len(idx))]
        n_train = int(round(len(idx) * spec.ratios[0]))
        n_val = int(round(len(idx) * spec.ratios[1]))
        n_train = min(n_train, len(idx))
        n_val = min(n_val, len(idx) - n_train)
        parts[0].extend(perm[:n_train])
        parts[1].extend(perm[n_train : n_train + n_val])
        parts[2].extend(perm[n_train + n_val :])
    return tuple(dataset.subset(sorted(int(i) for i in p)) for p in parts)  # type: ignore[return-value]


def kfold_split(dataset: Dataset, k: int, seed: int = 0) -> list[tuple[Dataset, Dataset]]:
    """Stratified k folds; each sample lands in exactly one test fold."""
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    rng = Rng(seed)
    fold_of = np.empty(len(dataset), dtype=np.int64)
    for c, idx in enumerate(_class_indices(dataset)):
        if 0 < len(idx) < k:
            raise SplitError(f"class {dataset.class_names[c]!r} has {len(idx)} samples, fewer than k={k}")
        perm = idx[rng.child(c).permutation(len(idx))]
        for f, chunk in enumerate(np.array_split(perm, k)):
            fold_of[chunk] = f
    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((dataset.subset(train.tolist()), dataset.subset(test.tolist())))
    return folds


# ---------------------------------------------------------------- batching


def sample_arrays(sample: LabeledSample, image_size: int | None = None, nir_proxy: bool = False):
    img = sample.image
    if image_size is not None and (img.height != image_size or img.width != image_size):
        img = center_crop(img, image_size)
    return img.rgb(), build_index_stack(img, nir_proxy=nir_proxy)


def dataset_arrays(dataset: Dataset, image_size: int | None = None, nir_proxy: bool = False):
    """Stack every sample as (rgb [N,3,H,W], index [N,3,H,W], labels [N])."""
    if not len(dataset):
        return np.zeros((0, 3, 1, 1), np.float32), np.zeros((0, 3, 1, 1), np.float32), np.zeros(0, np.int64)
    pairs = [sample_arrays(s, image_size, nir_proxy) for s in dataset.samples]
    rgb = np.stack([p[0] for p in pairs]).astype(np.float32)
    idx = np.stack([p[1] for p in pairs]).astype(np.float32)
    return rgb, idx, dataset.labels()


def epoch_permutation(n: int, seed: int | None, epoch: int) -> np.ndarray:
    if seed is None:
        return np.arange(n)
    return Rng(seed).child(0, epoch).permutation(n)


def batch_iterator(
    dataset: Dataset,
    batch_size: int,
    shuffle_seed: int | None = None,
    epoch: int = 0,
    augment_config: AugmentConfig | None = None,
    image_size: int | None = None,
    nir_proxy: bool = False,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (rgb, index, labels) batches; the last partial batch is kept.

    The order is the permutation derived from (shuffle_seed, epoch), or
    dataset order when ``shuffle_seed`` is None.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_permutation(len(dataset), shuffle_seed, epoch)
    aug_rng = Rng(0 if shuffle_seed is None else shuffle_seed).child(1, epoch) if augment_config else None
    for start in range(0, len(order), batch_size):
        rgbs, idxs, labels = [], [], []
        for i in order[start : start + batch_size]:
            s = dataset.samples[int(i)]
            if aug_rng is not None:
                s = augment(s, augment_config, aug_rng)
            r, x = sample_arrays(s, image_size, nir_proxy)
            rgbs.append(r)
            idxs.append(x)
            labels.append(s.label)
        yield (
            np.stack(rgbs).astype(np.float32),
            np.stack(idxs).astype(np.float32),
            np.asarray(labels, dtype=np.int64),
        )


# ---------------------------------------------------------------- synthetic data


@dataclass
class LesionClass:
    name: str
    lesion_color: tuple[float, float, float] | None  # None: no lesions
    count_range: tuple[int, int] = (0, 0)
    radius_range: tuple[float, float] = (2.0, 4.0)
    nir_offset: float = 0.0


def default_classes() -> list[LesionClass]:
    return [
        LesionClass("bacterial_spot", (0.32, 0.16, 0.06), (2, 4), (2.5, 4.5), -0.15),
        LesionClass("cercospora", (0.85, 0.85, 0.80), (2, 4), (2.5, 4.5), -0.10),
        LesionClass("curl_virus", (0.80, 0.78, 0.15), (2, 4), (2.5, 4.5), -0.05),
        LesionClass("healthy", None, (0, 0), (2.0, 4.0), 0.10),
        LesionClass("nutrition_deficiency", (0.75, 0.35, 0.10), (2, 4), (2.5, 4.5), 0.0),
        LesionClass("white_spot", (0.55, 0.35, 0.75), (2, 4), (2.5, 4.5), 0.05),
    ]


def nir_only_classes() -> list[LesionClass]:
    offsets = (-0.30, -0.18, -0.06, 0.30, 0.06, 0.18)
    return [replace(c, lesion_color=None, count_range=(0, 0), nir_offset=o) for c, o in zip(default_classes(), offsets)]


def lesion_only_classes() -> list[LesionClass]:
    return [
        replace(c, nir_offset=0.0, count_range=(1, 1) if c.lesion_color else (0, 0), radius_range=(5.0, 8.0))
        for c in default_classes()
    ]


@dataclass
class SynthConfig:
    image_size: int = 64
    classes: list[LesionClass] = field(default_factory=default_classes)
    leaf_color_low: tuple[float, float, float] = (0.16, 0.42, 0.12)
    leaf_color_high: tuple[float, float, float] = (0.22, 0.52, 0.18)
    background: tuple[float, float, float] = (0.10, 0.08, 0.05)
    leaf_nir: float = 0.55
    background_nir: float = 0.05
    lesion_nir_drop: float = 0.15
    noise: float = 0.02
    seed: int = 0
    nir_only: bool = False

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("synthetic config needs at least 2 classes")
        for c in self.classes:
            if not -1.0 <= c.nir_offset <= 1.0:
                raise ValueError(f"class {c.name!r}: NIR offset {c.nir_offset} outside [-1, 1]")

    @classmethod
    def nir_only_task(cls, **kw) -> "SynthConfig":
        kw.setdefault("classes", nir_only_classes())
        return cls(nir_only=True, **kw)

    @classmethod
    def lesion_task(cls, **kw) -> "SynthConfig":
        """One lesion per diseased image and no NIR offsets, so the lesion is the only class cue."""
        kw.setdefault("classes", lesion_only_classes())
        return cls(**kw)


def _render(cfg: SynthConfig, cls: LesionClass, rng: Rng) -> tuple[MultibandImage, list[list[int]]]:
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy, cx = n / 2 + rng.uniform(-0.06, 0.06) * n, n / 2 + rng.uniform(-0.06, 0.06) * n
    ay, ax = rng.uniform(0.36, 0.44) * n, rng.uniform(0.26, 0.34) * n
    theta = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    leaf = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0

    leaf_rgb = rng.uniform(cfg.leaf_color_low, cfg.leaf_color_high)
    planes = np.empty((4, n, n))
    for ch in range(3):
        planes[ch] = np.where(leaf, leaf_rgb[ch], cfg.background[ch])
    planes[3] = np.where(leaf, cfg.leaf_nir + cls.nir_offset, cfg.background_nir)

    boxes = []
    if cls.lesion_color is not None and not cfg.nir_only:
        count = int(rng.integers(cls.count_range[0], cls.count_range[1] + 1))
        inside = np.argwhere(leaf)
        for _ in range(count):
            r = rng.uniform(*cls.radius_range)
            py, px = inside[int(rng.integers(0, len(inside)))]
            disk = ((yy - py) ** 2 + (xx - px) ** 2 <= r * r) & leaf
            if not disk.any():
                continue
            for ch in range(3):
                planes[ch][disk] = cls.lesion_color[ch]
            planes[3][disk] -= cfg.lesion_nir_drop
            ys, xs = np.nonzero(disk)
            boxes.append([int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1])

    planes += rng.normal(0.0, cfg.noise, planes.shape)
    np.clip(planes, 0.0, 1.0, out=planes)
    img = MultibandImage.from_arrays(planes[0], planes[1], planes[2], planes[3])
    return img, boxes


def make_synthetic_dataset(config: SynthConfig, n_per_class: int) -> Dataset:
    """Procedural leaves: green ellipse on soil, per-class lesion disks and NIR level.

    In ``nir_only`` mode no lesions are drawn, so classes differ only in NIR.
    """
    if n_per_class < 1:
        raise DatasetError("n_per_class must be >= 1; an empty synthetic dataset is not useful")
    root = Rng(config.seed)
    samples = []
    for label, cls in enumerate(config.classes):
        rng = root.child(label)
        for _ in range(n_per_class):
            img, boxes = _render(config, cls, rng)
            samples.append(LabeledSample(img, label, cls.name, "synthetic", {"lesion_boxes": boxes}))
    return Dataset(samples, [c.name for c in config.classes])
