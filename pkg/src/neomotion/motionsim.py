"""Rigid in-plane motion corruption simulated line by line in k-space.

Each phase-encode line (an image row, i.e. one ky frequency) is taken from
the spectrum of the slice as it sat at that line's acquisition pose.
Lines are acquired in centred order, so trace index 0 is the most negative
ky and index ``ny // 2`` is the DC row.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .phantom import derive_seed
from .volumeio import Volume


class MotionError(ValueError):
    pass


@dataclass(frozen=True)
class MotionTrace:
    """Per-line (dx, dy, theta) poses; translations in voxels, rotation in radians."""

    poses: np.ndarray
    r_ref: float

    def __post_init__(self):
        poses = np.asarray(self.poses, dtype=np.float64)
        if poses.ndim != 2 or poses.shape[1] != 3 or len(poses) < 1:
            raise MotionError(f"poses must have shape (n_lines, 3), got {poses.shape}")
        if not np.all(np.isfinite(poses)):
            raise MotionError("poses must be finite")
        poses.setflags(write=False)
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def severity(self) -> float:
        scaled = self.poses * np.array([1.0, 1.0, self.r_ref])
        return float(np.mean(np.linalg.norm(scaled, axis=1)))

    @classmethod
    def still(cls, n_lines: int, r_ref: float) -> "MotionTrace":
        return cls(np.zeros((n_lines, 3)), r_ref)

    @classmethod
    def constant(cls, n_lines: int, r_ref: float, dx=0.0, dy=0.0, theta=0.0) -> "MotionTrace":
        return cls(np.tile([dx, dy, theta], (n_lines, 1)), r_ref)


@dataclass(frozen=True)
class MotionConfig:
    seed: int = 0
    n_events: tuple[int, int] = (1, 3)
    max_translation: float = 4.0
    max_rotation: float = 0.05
    block_fraction: tuple[float, float] = (0.05, 0.3)

    def __post_init__(self):
        lo, hi = self.n_events
        if lo < 0 or hi < lo:
            raise MotionError(f"bad n_events range {self.n_events}")
        if self.max_translation < 0 or self.max_rotation < 0:
            raise MotionError("motion bounds must be >= 0")
        flo, fhi = self.block_fraction
        if not 0 < flo <= fhi <= 1:
            raise MotionError(f"bad block_fraction {self.block_fraction}")


def _disjoint_blocks(rng: np.random.Generator, n_lines: int, n_events: int, frac) -> list[tuple[int, int]]:
    blocks: list[tuple[int, int]] = []
    for _ in range(n_events):
        for _attempt in range(100):
            length = int(round(rng.uniform(*frac) * n_lines))
            length = min(max(length, 1), n_lines)
            start = int(rng.integers(0, n_lines - length + 1))
            # a one-line gap keeps neighbouring events from merging into one block
            if all(start + length < s or e < start for s, e in blocks):
                blocks.append((start, start + length))
                break
    return sorted(blocks)


def sample_trace(cfg: MotionConfig, n_lines: int, r_ref: float | None = None) -> MotionTrace:
    """Piecewise-constant poses: still, except for up to ``n_events`` disjoint moved blocks."""
    if n_lines < 1:
        raise MotionError("n_lines must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    r_ref = n_lines / 2 if r_ref is None else r_ref
    n_events = int(rng.integers(cfg.n_events[0], cfg.n_events[1] + 1))
    poses = np.zeros((n_lines, 3))
    if cfg.max_translation == 0 and cfg.max_rotation == 0:
        return MotionTrace(poses, r_ref)
    for start, end in _disjoint_blocks(rng, n_lines, n_events, cfg.block_fraction):
        pose = np.zeros(3)
        while not np.any(pose):
            pose = rng.uniform(-1, 1, 3) * [cfg.max_translation, cfg.max_translation, cfg.max_rotation]
        poses[start:end] = pose
    return MotionTrace(poses, r_ref)


def rotate_slice(s: np.ndarray, theta: float) -> np.ndarray:
    """Bilinear rotation about the slice centre; outside samples are zero."""
    if theta == 0:
        return s
    ny, nx = s.shape
    c, sn = np.cos(theta), np.sin(theta)
    mat = np.array([[c, -sn], [sn, c]])  # (y, x) output -> input
    center = np.array([(ny - 1) / 2, (nx - 1) / 2])
    return ndimage.affine_transform(s, mat, offset=center - mat @ center, order=1, mode="constant", cval=0.0)


def pose_spectrum(s: np.ndarray, dx: float, dy: float, theta: float) -> np.ndarray:
    """Centred 2D spectrum of the slice rotated by ``theta`` then shifted by (dx, dy)."""
    ny, nx = s.shape
    spec = np.fft.fft2(rotate_slice(s, theta))
    if dx or dy:
        ky = np.fft.fftfreq(ny)[:, None]
        kx = np.fft.fftfreq(nx)[None, :]
        spec = spec * np.exp(-2j * np.pi * (kx * dx + ky * dy))
    return np.fft.fftshift(spec)


def assemble_kspace(s: np.ndarray, trace: MotionTrace) -> np.ndarray:
    """Centred k-space with row ``l`` taken from the spectrum at pose ``l``."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise MotionError("corrupt_slice expects a 2D slice")
    if len(trace) != s.shape[0]:
        raise MotionError(f"trace has {len(trace)} lines but slice has {s.shape[0]} rows")
    out = np.empty(s.shape, dtype=np.complex128)
    poses = trace.poses
    uniq, inverse = np.unique(poses, axis=0, return_inverse=True)
    for k, (dx, dy, theta) in enumerate(uniq):
        rows = np.nonzero(inverse.ravel() == k)[0]
        out[rows] = pose_spectrum(s, dx, dy, theta)[rows]
    return out


def corrupt_slice(s: np.ndarray, trace: MotionTrace) -> np.ndarray:
    """Real part of the inverse transform of the motion-assembled spectrum."""
    k = assemble_kspace(s, trace)
    return np.real(np.fft.ifft2(np.fft.ifftshift(k))).astype(np.asarray(s).dtype, copy=False)


def corrupt_volume(v: Volume, cfg: MotionConfig, clip: bool = True) -> tuple[Volume, list[MotionTrace]]:
    """Corrupt every slice with its own trace (seeded from ``cfg.seed`` and the slice index).

    With ``clip`` the result is clamped to the [0, 1] display range.
    """
    nx, ny, nz = v.dims
    out = np.empty_like(v.data)
    traces = []
    for z in range(nz):
        trace = sample_trace(replace(cfg, seed=derive_seed(cfg.seed, z)), ny, r_ref=nx / 2)
        traces.append(trace)
        out[z] = corrupt_slice(v.data[z].astype(np.float64), trace)
    if clip:
        np.clip(out, 0.0, 1.0, out=out)
    return v.replace(out), traces


def write_trace(trace: MotionTrace, path) -> None:
    lines = [f"{i} {dx!r} {dy!r} {th!r}" for i, (dx, dy, th) in enumerate(trace.poses.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trace(path, r_ref: float | None = None) -> MotionTrace:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        idx, dx, dy, th = line.split()
        if int(idx) != len(rows):
            raise MotionError(f"{path}:{n + 1}: expected line index {len(rows)}, got {idx}")
        rows.append((float(dx), float(dy), float(th)))
    poses = np.array(rows).reshape(-1, 3)
    return MotionTrace(poses, len(poses) / 2 if r_ref is None else r_ref)
