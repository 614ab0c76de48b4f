"""Multi-channel volumes, preprocessing, and the ``.rvol`` / PGM file formats.

Volumes are stored channel-major as a ``(C, D, H, W)`` float32 array. The
array is marked read-only on construction so a Volume can be shared between
workers without copying.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, MissingInputError, TruncationError

RVOL_MAGIC = b"RVF1"
_HEADER = struct.Struct("<4sIIII")
# Refuse headers that would describe more than 4 GiB of payload.
_MAX_PAYLOAD_BYTES = 1 << 32
_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


@dataclass(frozen=True, eq=False)
class Volume:
    voxels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.voxels)
        if arr.ndim != 4:
            raise DimensionError(f"volume must be 4-D (C, D, H, W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionError(f"volume extents must be positive, got {arr.shape}")
        arr = np.array(arr, dtype=np.float32, order="C", copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)

    @property
    def channels(self) -> int:
        return self.voxels.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape[1:])

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.voxels.shape

    def channel(self, c: int) -> "Volume":
        if not 0 <= c < self.channels:
            raise DimensionError(f"channel {c} out of range [0, {self.channels})")
        return Volume(self.voxels[c : c + 1])

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.shape == other.shape and self.voxels.tobytes() == other.voxels.tobytes()

    def __repr__(self):
        return f"Volume(channels={self.channels}, dims={self.dims})"


def as_volume(data) -> Volume:
    if isinstance(data, Volume):
        return data
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[None]
    return Volume(arr)


def mask_to_volume(mask: np.ndarray) -> Volume:
    """Wrap a boolean ``(D, H, W)`` mask as a 1-channel 0.0/1.0 volume."""
    return Volume(np.asarray(mask, dtype=bool)[None].astype(np.float32))


def volume_to_mask(v: Volume) -> np.ndarray:
    if v.channels != 1:
        raise DimensionError(f"binary mask volume must have 1 channel, got {v.channels}")
    vals = v.voxels[0]
    if not np.all((vals == 0.0) | (vals == 1.0)):
        raise FormatError("binary mask values must be exactly 0.0 or 1.0", field="voxels")
    return vals == 1.0


def minmax_normalize(v: Volume) -> Volume:
    """Rescale every channel independently onto [0, 1].

    A constant channel has no range to stretch and maps to all zeros.
    """
    data = v.voxels.astype(np.float64)
    out = np.zeros_like(data)
    for c in range(v.channels):
        lo, hi = data[c].min(), data[c].max()
        if hi > lo:
            out[c] = (data[c] - lo) / (hi - lo)
    # Clip guards float32 rounding pushing an endpoint just outside [0, 1].
    return Volume(np.clip(out.astype(np.float32), 0.0, 1.0))


def crop_bounds(source: tuple[int, ...], target: tuple[int, ...]) -> list[tuple[int, int]]:
    if len(source) != len(target):
        raise DimensionError(f"crop target {target} has wrong rank for dims {source}")
    bounds = []
    for axis, (s, t) in enumerate(zip(source, target)):
        if t < 1 or t > s:
            raise DimensionError(f"crop target {t} invalid for extent {s} on axis {axis}")
        lo = (s - t) // 2
        bounds.append((lo, lo + t))
    return bounds


def center_crop(v: Volume, target) -> Volume:
    """Centered sub-grid; an odd remainder loses its extra voxel on the high side."""
    target = tuple(int(t) for t in target)
    (z0, z1), (y0, y1), (x0, x1) = crop_bounds(v.dims, target)
    return Volume(v.voxels[:, z0:z1, y0:y1, x0:x1])


def apply_mask(v: Volume, m) -> Volume:
    m = as_volume(m)
    if m.shape != v.shape:
        raise DimensionError(f"mask shape {m.shape} does not match volume shape {v.shape}")
    return Volume(v.voxels * m.voxels)


def preprocess(v: Volume, target=None) -> Volume:
    """Crop first, then normalize, so normalization sees only retained voxels."""
    if target is not None:
        v = center_crop(v, target)
    return minmax_normalize(v)


def extract_slice(v: Volume, channel: int, axis: int, index: int) -> np.ndarray:
    if not 0 <= channel < v.channels:
        raise DimensionError(f"channel {channel} out of range [0, {v.channels})")
    if axis not in (0, 1, 2):
        raise DimensionError(f"axis must be 0, 1 or 2, got {axis}")
    extent = v.dims[axis]
    if not 0 <= index < extent:
        raise DimensionError(f"index {index} out of range [0, {extent}) on axis {axis}")
    return np.take(v.voxels[channel], index, axis=axis).copy()


def write_volume(v: Volume, path) -> None:
    c, d, h, w = v.shape
    payload = v.voxels.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RVOL_MAGIC, c, d, h, w))
        fh.write(payload)


def read_volume(path) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"volume file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncationError(f"header needs {_HEADER.size} bytes, file has {len(raw)}", field="header")
    magic, c, d, h, w = _HEADER.unpack_from(raw)
    if magic != RVOL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {RVOL_MAGIC!r}", field="magic")
    for name, value in (("channels", c), ("D", d), ("H", h), ("W", w)):
        if value == 0:
            raise FormatError("extent must be positive", field=name)
    expected = 4 * c * d * h * w
    if expected > _MAX_PAYLOAD_BYTES:
        raise FormatError(f"declared payload of {expected} bytes overflows the size limit", field="dims")
    body = len(raw) - _HEADER.size
    if body < expected:
        raise TruncationError(f"payload has {body} bytes, header declares {expected}", field="payload")
    if body > expected:
        raise FormatError(f"{body - expected} trailing bytes after payload", field="payload")
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, d, h, w)
    return Volume(arr.astype(np.float32))


def write_pgm(plane: np.ndarray, path) -> None:
    """Binary 8-bit PGM, linearly scaled from the plane's own [min, max]."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise DimensionError(f"PGM export needs a 2-D plane, got shape {plane.shape}")
    lo, hi = plane.min(), plane.max()
    if hi > lo:
        scaled = np.round((plane - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(plane)
    pixels = scaled.astype(np.uint8)
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    match = _PGM_HEADER.match(raw)
    if match is None:
        raise FormatError("not a binary PGM", field="magic")
    cols, rows, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", field="maxval")
    data = raw[match.end() :]
    if len(data) < rows * cols:
        raise TruncationError("pixel data shorter than header declares", field="payload")
    return np.frombuffer(data[: rows * cols], dtype=np.uint8).reshape(rows, cols)
