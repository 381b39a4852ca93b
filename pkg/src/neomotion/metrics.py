"""3D overlap and surface-distance metrics, per-class reports and Likert records.

Masks are ``(nz, ny, nx)`` arrays. Spacing is given in the usual
``(sx, sy, sz)`` millimetre order and mapped onto the array axes internally.
Surface distances come from an exact Euclidean distance transform of the
other mask's surface, so the cost is linear in the volume size.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volumeio import CLASS_NAMES, DimensionMismatchError, LabelMap

ABSENT = "absent"
CONDITIONS = ("before", "after")
_SIX = ndimage.generate_binary_structure(3, 1)


class MetricsError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a) != 0, np.asarray(b) != 0
    if a.shape != b.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _as3d(m: np.ndarray) -> np.ndarray:
    if m.ndim > 3:
        raise MetricsError(f"masks must be at most 3D, got {m.ndim}D")
    return m.reshape((1,) * (3 - m.ndim) + m.shape)


def dice(a, b) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks score 1."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_mask(mask) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour (outside counts as background)."""
    m = _as3d(np.asarray(mask) != 0)
    inner = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return (m & ~inner).reshape(np.shape(mask))


def extract_surface(mask) -> np.ndarray:
    """Surface voxel indices as an ``(n, ndim)`` integer array in array-axis order."""
    return np.argwhere(surface_mask(mask))


def _sampling(spacing, ndim: int) -> tuple[float, ...]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or min(sp) <= 0:
        raise MetricsError(f"spacing must be three positive values, got {spacing}")
    return sp[::-1][3 - ndim:]


def directed_distances(a, b, spacing) -> np.ndarray | None:
    """Distance in mm from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    a, b = _pair(a, b)
    sa, sb = surface_mask(a), surface_mask(b)
    if not sa.any() or not sb.any():
        return None
    dist = ndimage.distance_transform_edt(~sb, sampling=_sampling(spacing, a.ndim))
    return dist[sa]


def _both(a, b, spacing):
    dab = directed_distances(a, b, spacing)
    dba = directed_distances(b, a, spacing)
    if dab is None or dba is None:
        return None
    return dab, dba


def hausdorff(a, b, spacing) -> float | None:
    """Symmetric Hausdorff distance in mm between mask surfaces; None if either mask is empty."""
    d = _both(a, b, spacing)
    return None if d is None else float(max(d[0].max(), d[1].max()))


def mean_surface_distance(a, b, spacing) -> float | None:
    """Average of the two directed mean surface distances in mm; None if either mask is empty."""
    d = _both(a, b, spacing)
    return None if d is None else float(0.5 * (d[0].mean() + d[1].mean()))


def psnr(estimate, reference, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; infinite for identical inputs."""
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


# --- reports ----------------------------------------------------------------------

@dataclass(frozen=True)
class ClassMetrics:
    name: str
    dc: float
    hd: float | None
    msd: float | None

    @property
    def present(self) -> bool:
        return self.hd is not None


@dataclass(frozen=True)
class MetricReport:
    classes: tuple[ClassMetrics, ...]

    def __getitem__(self, name: str) -> ClassMetrics:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def mean(self) -> ClassMetrics:
        """Average over classes non-empty in both maps; NaN if there are none."""
        used = [c for c in self.classes if c.present]
        if not used:
            return ClassMetrics("mean", math.nan, None, None)
        return ClassMetrics("mean", float(np.mean([c.dc for c in used])),
                            float(np.mean([c.hd for c in used])), float(np.mean([c.msd for c in used])))

    @property
    def mean_dc(self) -> float:
        return self.mean().dc

    def rows(self) -> list[list[str]]:
        def fmt(x):
            return ABSENT if x is None else repr(float(x))
        return [[c.name, fmt(c.dc), fmt(c.hd), fmt(c.msd)] for c in (*self.classes, self.mean())]

    def write_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "dc", "hd_mm", "msd_mm"])
            w.writerows(self.rows())


def average_reports(reports) -> MetricReport:
    """Per-class average over several scans; distances average the scans where they are present."""
    reports = list(reports)
    if not reports:
        raise MetricsError("no reports to average")
    out = []
    for i, name in enumerate(CLASS_NAMES):
        rows = [r.classes[i] for r in reports]
        hd = [c.hd for c in rows if c.hd is not None]
        msd = [c.msd for c in rows if c.msd is not None]
        out.append(ClassMetrics(name, float(np.mean([c.dc for c in rows])),
                                float(np.mean(hd)) if hd else None, float(np.mean(msd)) if msd else None))
    return MetricReport(tuple(out))


def read_report(path) -> MetricReport:
    def val(s):
        return None if s == ABSENT else float(s)
    classes = []
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0] != ["class", "dc", "hd_mm", "msd_mm"]:
        raise MetricsError(f"{path}: not a metric report")
    for name, dc, hd, msd in rows[1:]:
        if name != "mean":
            classes.append(ClassMetrics(name, float(dc), val(hd), val(msd)))
    return MetricReport(tuple(classes))


def evaluate(pred: LabelMap, ref: LabelMap) -> MetricReport:
    """Per-class DC, HD and MSD of ``pred`` against ``ref`` (labels 1..8)."""
    if pred.data.shape != ref.data.shape:
        raise DimensionMismatchError(f"label maps differ in shape: {pred.data.shape} vs {ref.data.shape}")
    if not np.allclose(pred.spacing, ref.spacing):
        raise DimensionMismatchError(f"label maps differ in spacing: {pred.spacing} vs {ref.spacing}")
    out = []
    for cls, name in enumerate(CLASS_NAMES, start=1):
        a, b = pred.data == cls, ref.data == cls
        d = _both(a, b, ref.spacing)
        if d is None:
            out.append(ClassMetrics(name, dice(a, b), None, None))
        else:
            out.append(ClassMetrics(name, dice(a, b), float(max(d[0].max(), d[1].max())),
                                    float(0.5 * (d[0].mean() + d[1].mean()))))
    return MetricReport(tuple(out))


# --- qualitative grading --------------------------------------------------------------

LIKERT_FIELDS = ("scan", "condition", "image_grade", "seg_grade", "rater", "timestamp")


@dataclass(frozen=True)
class LikertRecord:
    """One rater's 1-5 grades (1 = uninterpretable) for a scan before or after correction."""

    scan: str
    condition: str
    image_grade: int
    seg_grade: int
    rater: str
    timestamp: datetime

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise MetricsError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")
        for g in (self.image_grade, self.seg_grade):
            if isinstance(g, bool) or not isinstance(g, (int, np.integer)) or not 1 <= g <= 5:
                raise MetricsError(f"grades must be integers in [1, 5], got {g!r}")


def write_likert(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LIKERT_FIELDS)
        for r in records:
            w.writerow([r.scan, r.condition, int(r.image_grade), int(r.seg_grade), r.rater, r.timestamp.isoformat()])


def read_likert(path) -> list[LikertRecord]:
    with open(Path(path), encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LIKERT_FIELDS:
            raise MetricsError(f"{path}: expected columns {','.join(LIKERT_FIELDS)}")
        out = []
        for row in reader:
            try:
                out.append(LikertRecord(row["scan"], row["condition"], int(row["image_grade"]),
                                        int(row["seg_grade"]), row["rater"],
                                        datetime.fromisoformat(row["timestamp"])))
            except ValueError as exc:
                raise MetricsError(f"{path}: bad Likert row {row}: {exc}") from exc
        return out
