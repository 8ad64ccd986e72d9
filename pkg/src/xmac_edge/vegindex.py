"""Vegetation-index maps (NDVI, NPCI, MCARI) and the 3-channel index stack.

MCARI is canonically defined on narrow bands R700/R670/R550.  With only
RGB + NIR available the bands are mapped R700 -> NIR, R670 -> Red,
R550 -> Green, which keeps the structure of the formula but makes the value
an approximation of the real index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-6
REQUIRED_BANDS = ("red", "green", "blue")
INDEX_ORDER = ("NDVI", "NPCI", "MCARI")


class MissingBandError(ValueError):
    """A band needed by an index is absent from the image."""


@dataclass
class MultibandImage:
    """H x W raster with named float bands in [0, 1].

    ``red``, ``green`` and ``blue`` are required; ``nir`` is optional.
    """

    bands: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bands = {k.lower(): np.asarray(v, dtype=np.float64) for k, v in self.bands.items()}
        missing = [b for b in REQUIRED_BANDS if b not in self.bands]
        if missing:
            raise MissingBandError(f"image is missing required band(s): {', '.join(missing)}")
        shapes = {v.shape for v in self.bands.values()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValueError(f"all bands must be identically sized 2-D planes, got {sorted(shapes)}")
        for name, v in self.bands.items():
            if v.size and (v.min() < 0.0 or v.max() > 1.0 or not np.isfinite(v).all()):
                raise ValueError(f"band {name!r} has values outside [0, 1]")

    @classmethod
    def from_arrays(cls, red, green, blue, nir=None, **meta) -> "MultibandImage":
        bands = {"red": red, "green": green, "blue": blue}
        if nir is not None:
            bands["nir"] = nir
        return cls(bands, dict(meta))

    @property
    def height(self) -> int:
        return self.bands["red"].shape[0]

    @property
    def width(self) -> int:
        return self.bands["red"].shape[1]

    @property
    def has_nir(self) -> bool:
        return "nir" in self.bands

    def band(self, name: str) -> np.ndarray:
        try:
            return self.bands[name.lower()]
        except KeyError:
            raise MissingBandError(f"band {name!r} is not present") from None

    def rgb(self) -> np.ndarray:
        """Stack red, green, blue as a [3, H, W] array."""
        return np.stack([self.bands["red"], self.bands["green"], self.bands["blue"]])

    def with_nir_proxy(self) -> "MultibandImage":
        """Copy with NIR := Green when NIR is absent (test-only fallback)."""
        if self.has_nir:
            return self
        bands = dict(self.bands)
        bands["nir"] = bands["green"].copy()
        return MultibandImage(bands, dict(self.meta, nir_proxy=True))


@dataclass
class IndexMap:
    kind: str
    values: np.ndarray
    normalized: bool = False


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num)
    ok = np.abs(den) >= EPS
    np.divide(num, den, out=out, where=ok)
    return out


def _require_nir(img: MultibandImage, kind: str) -> np.ndarray:
    if not img.has_nir:
        raise MissingBandError(f"{kind} needs a NIR band (pass nir_proxy to substitute Green)")
    return img.band("nir")


def ndvi(img: MultibandImage) -> IndexMap:
    nir = _require_nir(img, "NDVI")
    red = img.band("red")
    return IndexMap("NDVI", _ratio(nir - red, nir + red))


def npci(img: MultibandImage) -> IndexMap:
    red, blue = img.band("red"), img.band("blue")
    return IndexMap("NPCI", _ratio(red - blue, red + blue))


def mcari(img: MultibandImage) -> IndexMap:
    nir = _require_nir(img, "MCARI")
    red, green = img.band("red"), img.band("green")
    values = ((nir - red) - 0.2 * (nir - green)) * (nir / np.maximum(red, EPS))
    return IndexMap("MCARI", values)


def normalize_index(m: IndexMap) -> IndexMap:
    """Map an index to [0, 1].

    NDVI/NPCI use the fixed affine (x + 1) / 2.  MCARI is unbounded and uses
    per-image min-max; a constant MCARI map becomes all 0.5.
    """
    if m.normalized:
        raise ValueError(f"{m.kind} map is already normalized")
    if m.kind in ("NDVI", "NPCI"):
        values = np.clip((m.values + 1.0) / 2.0, 0.0, 1.0)
    elif m.kind == "MCARI":
        lo, hi = float(m.values.min()), float(m.values.max())
        if hi - lo < EPS:
            values = np.full_like(m.values, 0.5)
        else:
            values = (m.values - lo) / (hi - lo)
    else:
        raise ValueError(f"unknown index kind {m.kind!r}")
    return IndexMap(m.kind, values, normalized=True)


def build_index_stack(img: MultibandImage, nir_proxy: bool = False) -> np.ndarray:
    """Normalized (NDVI, NPCI, MCARI) stacked as a [3, H, W] array."""
    if nir_proxy:
        img = img.with_nir_proxy()
    maps = (ndvi(img), npci(img), mcari(img))
    return np.stack([normalize_index(m).values for m in maps])
