"""PNG decoding/encoding for 8- and 16-bit grayscale or RGB rasters."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import png

from .vegindex import MultibandImage


class ImageFormatError(ValueError):
    """Unsupported or corrupt image file."""


def read_png_array(path) -> np.ndarray:
    """Decode to a float64 [H, W, C] array in [0, 1] (C is 1 or 3)."""
    try:
        w, h, rows, info = png.Reader(filename=str(path)).read()
        if info.get("palette") or info.get("alpha"):
            raise ImageFormatError(f"{path}: palette and alpha PNGs are not supported")
        depth = info["bitdepth"]
        planes = info["planes"]
        if depth not in (8, 16):
            raise ImageFormatError(f"{path}: unsupported bit depth {depth}")
        if planes not in (1, 3):
            raise ImageFormatError(f"{path}: unsupported channel count {planes}")
        arr = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows]).reshape(h, w, planes)
    except ImageFormatError:
        raise
    except (png.Error, OSError, ValueError, EOFError) as exc:
        raise ImageFormatError(f"{path}: cannot decode PNG ({exc})") from None
    return arr.astype(np.float64) / (255.0 if depth == 8 else 65535.0)


def read_image(path, nir_path=None) -> MultibandImage:
    """Read an RGB (or grayscale, replicated) PNG with an optional NIR sidecar."""
    arr = read_png_array(path)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    nir = None
    if nir_path is not None:
        n = read_png_array(nir_path)
        if n.shape[:2] != arr.shape[:2]:
            raise ImageFormatError(
                f"{nir_path}: NIR companion is {n.shape[1]}x{n.shape[0]}, image is {arr.shape[1]}x{arr.shape[0]}"
            )
        nir = n[:, :, 0] if n.shape[2] == 1 else n.mean(axis=2)
    return MultibandImage.from_arrays(arr[:, :, 0], arr[:, :, 1], arr[:, :, 2], nir, source_path=str(path))


def _quantize(arr: np.ndarray, bitdepth: int) -> np.ndarray:
    if bitdepth not in (8, 16):
        raise ImageFormatError(f"unsupported bit depth {bitdepth}")
    peak = 255 if bitdepth == 8 else 65535
    return np.rint(np.clip(arr, 0.0, 1.0) * peak).astype(np.uint16)


def write_png_array(arr: np.ndarray, path, bitdepth: int = 8) -> None:
    """Encode a [H, W] or [H, W, 3] array of values in [0, 1]."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ImageFormatError(f"cannot write array of shape {arr.shape} as PNG")
    h, w, c = arr.shape
    q = _quantize(arr, bitdepth)
    writer = png.Writer(width=w, height=h, greyscale=(c == 1), bitdepth=bitdepth)
    with open(Path(path), "wb") as fh:
        writer.write(fh, q.reshape(h, w * c).tolist())


def write_image(img: MultibandImage, path, bitdepth: int = 8, nir_path=None) -> None:
    write_png_array(np.transpose(img.rgb(), (1, 2, 0)), path, bitdepth)
    if nir_path is not None and img.has_nir:
        write_png_array(img.band("nir"), nir_path, bitdepth)
