"""Synthetic neonatal-brain-like phantoms with exact 8-class label maps.

Shapes are analytic (ellipses and a gyrated ribbon in normalised in-plane
coordinates, tapered towards the outer slices) sampled through a smooth
random displacement field. Image y grows inferiorly. Every inner structure
sits inside the white matter with a margin so each class stays connected
in-plane. Ground truth is the sampled label map itself, so it is exact by
construction.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volumeio import LabelMap, Volume, save_volume

CB, MWM, BGT, VCSF, UWM, BS, CGM, ECSF = range(1, 9)
MIN_INPLANE = 32
PAPER_FOV_MM = 0.34 * 384

# T2-like ordering: CSF brightest, then grey matter, then white matter
DEFAULT_TISSUE_MEANS = {
    CB: 0.38, MWM: 0.20, BGT: 0.54, VCSF: 0.94,
    UWM: 0.46, BS: 0.30, CGM: 0.64, ECSF: 0.82,
}

SPLITS = ("train-clean", "train-motion", "test")
# mirrors the 15 clean / 20 motion training scans
DEFAULT_SPLIT_FRACTIONS = (15 / 35, 20 / 35)


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 8)
    seed: int = 0
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.1
    tissue_means: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_TISSUE_MEANS))
    deformation_scale: float = 3.0
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be >= 0")
        if not 0 <= self.bias_amplitude < 1:
            raise PhantomError("bias_amplitude must lie in [0, 1)")
        missing = set(range(1, 9)) - set(self.tissue_means)
        if missing:
            raise PhantomError(f"tissue_means missing classes {sorted(missing)}")
        if not 0 <= self.seed < 2 ** 64:
            raise PhantomError("seed must be an unsigned 64-bit integer")

    def voxel_spacing(self) -> tuple[float, float, float]:
        """Explicit spacing, or the in-plane spacing that keeps a 384-matrix 0.34 mm field of view."""
        if self.spacing is not None:
            return tuple(self.spacing)
        nx, ny, _ = self.dims
        return (PAPER_FOV_MM / nx, PAPER_FOV_MM / ny, 2.0)


def _smooth_field(rng: np.random.Generator, u, v, w, n_terms: int = 4) -> np.ndarray:
    """Random low-frequency sum of sinusoids, scaled to unit peak amplitude."""
    out = np.zeros(np.broadcast_shapes(u.shape, v.shape, w.shape))
    for _ in range(n_terms):
        fu, fv = rng.uniform(0.15, 0.5, 2) * rng.choice([-1, 1], 2)
        fw = rng.uniform(0.0, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.5, 1.0) * np.sin(np.pi * (fu * u + fv * v + fw * w) + phase)
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def _ellipse(u, v, cu, cv, ru, rv):
    return ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1.0


def phantom_labels(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    nx, ny, nz = cfg.dims
    z = np.linspace(-1, 1, nz) if nz > 1 else np.zeros(1)
    w = z[:, None, None]
    v = (np.arange(ny) + 0.5) / ny * 2 - 1
    u = (np.arange(nx) + 0.5) / nx * 2 - 1
    v = np.broadcast_to(v[None, :, None], (nz, ny, nx))
    u = np.broadcast_to(u[None, None, :], (nz, ny, nx))
    ww = np.broadcast_to(w, (nz, ny, nx))

    # displacement in normalised units (2 / n per voxel)
    du = cfg.deformation_scale * 2 / nx * _smooth_field(rng, u, v, ww)
    dv = cfg.deformation_scale * 2 / ny * _smooth_field(rng, u, v, ww)
    u = u + du
    v = v + dv

    taper = 1.0 - 0.12 * w ** 2
    rho = np.sqrt(u ** 2 + v ** 2) / (0.62 * taper)
    theta = np.arctan2(v, u)
    n_gyri = int(rng.integers(5, 9))
    rho_g = rho * (1 + 0.04 * np.sin(n_gyri * theta + rng.uniform(0, 2 * np.pi)))

    lab = np.zeros((nz, ny, nx), dtype=np.uint8)
    lab[rho <= 1.0] = ECSF
    lab[rho_g <= 0.86] = CGM
    lab[rho_g <= 0.72] = UWM

    j = rng.uniform(-0.015, 0.015, 6)
    t = taper
    lab[_ellipse(u, v, j[0], (-0.29 + j[1]) * t, 0.20 * t, 0.06 * t)] = MWM
    lab[_ellipse(u, v, j[2], (-0.08 + j[3]) * t, 0.26 * t, 0.12 * t)] = BGT
    # two ventricles overlapping at the midline so the class stays connected
    for side in (-1, 1):
        lab[_ellipse(u, v, j[2] + side * 0.07 * t, (-0.10 + j[3]) * t, 0.085 * t, 0.05 * t)] = VCSF
    lab[_ellipse(u, v, j[4], (0.13 + j[5]) * t, 0.07 * t, 0.08 * t)] = BS
    lab[_ellipse(u, v, j[4], (0.28 + j[5]) * t, 0.24 * t, 0.07 * t)] = CB
    for z in range(nz):
        _absorb_fragments(lab[z])
    return lab


def _absorb_fragments(sl: np.ndarray) -> None:
    """Relabel every non-largest in-plane component of a class with its commonest neighbour label."""
    for cls in range(1, 9):
        comp, n = ndimage.label(sl == cls)
        if n <= 1:
            continue
        sizes = ndimage.sum_labels(np.ones_like(comp), comp, index=np.arange(1, n + 1))
        keep = 1 + int(np.argmax(sizes))
        for k in range(1, n + 1):
            if k == keep:
                continue
            piece = comp == k
            ring = ndimage.binary_dilation(piece) & ~piece
            nb = sl[ring]
            nb = nb[nb != cls]
            sl[piece] = np.bincount(nb).argmax() if nb.size else 0


def generate_phantom(cfg: PhantomConfig) -> tuple[Volume, LabelMap]:
    """Deterministic (image, labels) pair for ``cfg``; intensities clamped to [0, 1]."""
    nx, ny, nz = cfg.dims
    if nx < MIN_INPLANE or ny < MIN_INPLANE or nz < 1:
        raise PhantomError(f"in-plane dims must be >= {MIN_INPLANE}, got {nx}x{ny}")
    rng = np.random.default_rng(cfg.seed)
    lab = phantom_labels(cfg, rng)
    present = np.unique(lab)
    if len(present) < 9:
        raise PhantomError(f"dims {cfg.dims} too small to fit all structures (labels {present.tolist()})")

    means = np.zeros(9)
    for cls, mu in cfg.tissue_means.items():
        means[int(cls)] = mu
    img = means[lab]
    if cfg.bias_amplitude > 0:
        z = np.linspace(-1, 1, nz) if nz > 1 else np.zeros(1)
        u = np.linspace(-1, 1, nx)[None, None, :]
        v = np.linspace(-1, 1, ny)[None, :, None]
        img = img * (1 + cfg.bias_amplitude * _smooth_field(rng, u, v, z[:, None, None], 2))
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    spacing = cfg.voxel_spacing()
    return Volume(img.astype(np.float32), spacing), LabelMap(lab, spacing)


# --- cohorts ------------------------------------------------------------------

def derive_seed(base_seed: int, index: int) -> int:
    state = np.random.SeedSequence([base_seed, index]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def split_counts(n: int, fractions=DEFAULT_SPLIT_FRACTIONS) -> tuple[int, int, int]:
    """Largest-remainder allocation of ``n`` scans to train-clean / train-motion / test."""
    fr = list(fractions) + [max(0.0, 1.0 - sum(fractions))]
    raw = [n * f for f in fr]
    counts = [int(np.floor(r)) for r in raw]
    for i in sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


@dataclass(frozen=True)
class ManifestRow:
    split: str
    seed: int
    volume_path: Path
    labels_path: Path


def generate_cohort(n: int, base_cfg: PhantomConfig, out_dir, counts: tuple[int, int, int] | None = None,
                    prefix: str = "phantom") -> list[ManifestRow]:
    """Write ``n`` phantom pairs plus ``manifest.csv`` into ``out_dir``.

    ``counts`` gives (train-clean, train-motion, test); by default it follows
    the 15:20 training ratio with any remainder assigned to test.
    """
    if n < 1:
        raise PhantomError("cohort size must be >= 1")
    counts = split_counts(n) if counts is None else tuple(counts)
    if len(counts) != 3 or sum(counts) != n or min(counts) < 0:
        raise PhantomError(f"split counts {counts} do not sum to {n}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PhantomError(f"cannot create {out}: {exc}") from exc
    splits = [s for s, c in zip(SPLITS, counts) for _ in range(c)]
    rows = []
    for i, split in enumerate(splits):
        seed = derive_seed(base_cfg.seed, i)
        vol, lab = generate_phantom(replace(base_cfg, seed=seed))
        vp, lp = out / f"{prefix}_{i:03d}.nbv", out / f"{prefix}_{i:03d}_labels.nbv"
        save_volume(vol, vp)
        save_volume(lab, lp)
        rows.append(ManifestRow(split, seed, vp, lp))
    write_manifest(rows, out / "manifest.csv")
    return rows


def write_manifest(rows: list[ManifestRow], path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for r in rows:
            writer.writerow([r.split, r.seed, _rel(r.volume_path, path.parent), _rel(r.labels_path, path.parent)])


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].startswith("#"):
                continue
            split, seed, vp, lp = rec
            if split not in SPLITS:
                raise PhantomError(f"unknown split {split!r} in {path}")
            rows.append(ManifestRow(split, int(seed), path.parent / vp, path.parent / lp))
    return rows


def _rel(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(Path(p).resolve())
