"""Binary checkpoint format.

Layout::

    0..3    b"XMAC"
    4..7    u32 LE version (1)
    8..11   u32 LE header length L
    12..    L bytes UTF-8 JSON {"config": ..., "tensors": [{name, shape, byte_offset, byte_len}]}
    ...     float32 LE blobs, contiguous, in manifest order

``byte_offset`` is relative to the first blob byte.  Batchnorm running
statistics are stored as ordinary manifest entries named ``*.running_mean`` /
``*.running_var``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import ConfigError, Model, ModelConfig, build_model

MAGIC = b"XMAC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class HeaderParseError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass


class ConfigConflictError(CheckpointError):
    pass


def _is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def to_bytes(model: Model) -> bytes:
    manifest, blobs, offset = [], [], 0
    for name, arr in [(k, v.data) for k, v in model.params.items()] + list(model.buffers.items()):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "byte_offset": offset, "byte_len": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": model.config.to_dict(), "tensors": manifest}, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def from_bytes(raw: bytes, num_classes: int | None = None) -> Model:
    if len(raw) < _PREFIX.size:
        raise TruncatedCheckpointError(f"file is {len(raw)} bytes, shorter than the {_PREFIX.size}-byte prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads version {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise TruncatedCheckpointError(f"header declares {hlen} bytes but only {len(raw) - _PREFIX.size} remain")
    try:
        header = json.loads(raw[_PREFIX.size : start].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
        entries = [(e["name"], tuple(int(d) for d in e["shape"]), int(e["byte_offset"]), int(e["byte_len"])) for e in manifest]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, ConfigError) as exc:
        raise HeaderParseError(f"cannot parse checkpoint header: {exc}") from None

    if num_classes is not None and config.num_classes != num_classes:
        raise ConfigConflictError(
            f"checkpoint declares num_classes={config.num_classes}, caller requested {num_classes}"
        )

    blob = raw[start:]
    expected = 0
    for name, shape, off, blen in entries:
        if off != expected or blen != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ManifestMismatchError(f"manifest entry {name!r}: offset/length inconsistent with shape {shape}")
        expected += blen
    if len(blob) < expected:
        raise TruncatedCheckpointError(f"blob section has {len(blob)} bytes, manifest needs {expected}")
    if len(blob) > expected:
        raise ManifestMismatchError(f"blob section has {len(blob) - expected} trailing bytes beyond the manifest")

    with np.errstate(all="ignore"):
        model = build_model(config, 0)
    names = {name for name, *_ in entries}
    wanted = set(model.params) | set(model.buffers)
    if names != wanted:
        missing, extra = sorted(wanted - names), sorted(names - wanted)
        raise ManifestMismatchError(f"manifest does not match architecture: missing {missing}, unexpected {extra}")
    for name, shape, off, blen in entries:
        arr = np.frombuffer(blob, dtype="<f4", count=blen // 4, offset=off).reshape(shape).astype(np.float32)
        if _is_buffer(name):
            ref = model.buffers[name]
        else:
            ref = model.params[name].data
        if ref.shape != shape:
            raise ManifestMismatchError(f"tensor {name!r} has shape {shape}, architecture expects {ref.shape}")
        if _is_buffer(name):
            model.buffers[name] = arr
        else:
            model.params[name] = Tensor(arr, requires_grad=True, name=name)
    return model


def load_checkpoint(path, num_classes: int | None = None) -> Model:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(raw, num_classes)
