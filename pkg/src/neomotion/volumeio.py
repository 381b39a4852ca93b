"""Volumes, label maps, the NBV1 file format and 3-slice patch extraction.

Voxel arrays are held with shape ``(nz, ny, nx)`` in C order, so the flat
buffer is x-fastest exactly as it is laid out on disk. ``data[z]`` is one
in-plane slice whose rows (the y axis) are the phase-encode lines.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"NBV1"
DTYPE_IMAGE = 0
DTYPE_LABELS = 1
N_LABELS = 9
CLASS_NAMES = ("CB", "mWM", "BGT", "vCSF", "uWM", "BS", "cGM", "eCSF")

_HEADER = struct.Struct("<4s3I3fB")


class VolumeFormatError(ValueError):
    """Base class for NBV1 read/write failures."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class NonFiniteError(VolumeFormatError):
    pass


class DimensionMismatchError(ValueError):
    pass


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(np.float32(s)) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {spacing}")
    return spacing


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Single-precision 3D image with voxel spacing in millimeters."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("volume contains non-finite voxels")
        object.__setattr__(self, "data", _freeze(data.copy() if data is self.data else data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    def replace(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-voxel tissue labels: 0 background, 1..8 = CB, mWM, BGT, vCSF, uWM, BS, cGM, eCSF."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise ValueError(f"label data must be a non-empty 3D array, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() >= N_LABELS):
            raise ValueError("labels must lie in 0..8")
        data = raw.astype(np.uint8)
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class PatchSpec:
    height: int
    width: int
    depth: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.depth % 2 == 0:
            raise ValueError("patch depth must be odd")
        if min(self.height, self.width, self.stride) < 1:
            raise ValueError("patch height, width and stride must be >= 1")


# --- NBV1 I/O ---------------------------------------------------------------

def to_bytes(v: Volume | LabelMap) -> bytes:
    if isinstance(v, Volume):
        if not np.all(np.isfinite(v.data)):
            raise NonFiniteError("refusing to save non-finite voxels")
        tag, payload = DTYPE_IMAGE, v.data.astype("<f4").tobytes()
    else:
        tag, payload = DTYPE_LABELS, v.data.astype(np.uint8).tobytes()
    nx, ny, nz = v.dims
    return _HEADER.pack(MAGIC, nx, ny, nz, *v.spacing, tag) + payload


def from_bytes(buf: bytes) -> Volume | LabelMap:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not an NBV1 file")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("header truncated")
    _, nx, ny, nz, sx, sy, sz, tag = _HEADER.unpack_from(buf)
    n = nx * ny * nz
    body = buf[_HEADER.size:]
    if tag == DTYPE_IMAGE:
        itemsize, dtype = 4, "<f4"
    elif tag == DTYPE_LABELS:
        itemsize, dtype = 1, np.uint8
    else:
        raise VolumeFormatError(f"unknown dtype tag {tag}")
    if len(body) < n * itemsize:
        raise TruncatedPayloadError(f"expected {n * itemsize} payload bytes, found {len(body)}")
    if len(body) > n * itemsize:
        raise VolumeFormatError("trailing bytes after payload")
    arr = np.frombuffer(body, dtype=dtype).reshape(nz, ny, nx)
    if tag == DTYPE_IMAGE:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("file contains non-finite voxels")
        return Volume(arr.astype(np.float32), (sx, sy, sz))
    return LabelMap(arr, (sx, sy, sz))


def save_volume(v: Volume | LabelMap, path) -> None:
    Path(path).write_bytes(to_bytes(v))


def load_volume(path) -> Volume | LabelMap:
    return from_bytes(Path(path).read_bytes())


def load_labels(path) -> LabelMap:
    obj = load_volume(path)
    if not isinstance(obj, LabelMap):
        raise VolumeFormatError(f"{path} holds an image, not labels")
    return obj


def load_image(path) -> Volume:
    obj = load_volume(path)
    if not isinstance(obj, Volume):
        raise VolumeFormatError(f"{path} holds labels, not an image")
    return obj


# --- masking and patches ----------------------------------------------------

def apply_mask(v: Volume, m: LabelMap | np.ndarray) -> Volume:
    """Zero every voxel where the mask is 0 (any nonzero label counts as inside)."""
    mask = m.data if isinstance(m, LabelMap) else np.asarray(m)
    if mask.shape != v.data.shape:
        raise DimensionMismatchError(f"mask shape {mask.shape} != volume shape {v.data.shape}")
    return v.replace(np.where(mask != 0, v.data, np.float32(0)))


def mirror_index(k: int, n: int) -> int:
    """Reflect an out-of-range slice index back into ``0..n-1`` (edge not repeated)."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    k %= period
    return k if k < n else period - k


def slice_stack(data: np.ndarray, center: int, depth: int) -> np.ndarray:
    """``depth`` consecutive slices around ``center`` with mirrored ends, shape (depth, ny, nx)."""
    half = depth // 2
    nz = data.shape[0]
    return data[[mirror_index(center + o, nz) for o in range(-half, half + 1)]]


def patch_positions(ny: int, nx: int, spec: PatchSpec) -> list[tuple[int, int]]:
    if spec.height > ny or spec.width > nx:
        raise DimensionMismatchError(
            f"patch {spec.height}x{spec.width} larger than slice {ny}x{nx}")
    return [(y, x) for y in range(0, ny - spec.height + 1, spec.stride)
            for x in range(0, nx - spec.width + 1, spec.stride)]


def iter_patches(v: Volume, l: LabelMap, spec: PatchSpec) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if v.data.shape != l.data.shape:
        raise DimensionMismatchError("volume and label map dims differ")
    nz, ny, nx = v.data.shape
    if spec.depth // 2 > nz - 1:
        raise DimensionMismatchError("patch depth exceeds mirror-padded volume depth")
    positions = patch_positions(ny, nx, spec)
    for z in range(nz):
        stack = slice_stack(v.data, z, spec.depth)
        for y, x in positions:
            yield (stack[:, y:y + spec.height, x:x + spec.width],
                   l.data[z, y:y + spec.height, x:x + spec.width])


def extract_patches(v: Volume, l: LabelMap, spec: PatchSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """All (image, label) patches, ordered by center slice then row-major grid position.

    Image patches have shape ``(depth, height, width)``; label patches are the
    center slice's ``(height, width)`` labels.
    """
    return list(iter_patches(v, l, spec))
