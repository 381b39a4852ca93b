from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from neomotion import phantom as P
from neomotion.volumeio import load_image, load_labels


@pytest.fixture(scope="module")
def default_pair():
    return P.generate_phantom(P.PhantomConfig(dims=(128, 128, 8), seed=3))


def test_deterministic():
    cfg = P.PhantomConfig(dims=(48, 40, 3), seed=11)
    a, b = P.generate_phantom(cfg), P.generate_phantom(cfg)
    assert a[0] == b[0] and a[1] == b[1]


def test_degenerate_config_is_piecewise_constant():
    cfg = P.PhantomConfig(dims=(64, 64, 3), seed=2, noise_sigma=0, bias_amplitude=0)
    v, l = P.generate_phantom(cfg)
    for cls, mu in cfg.tissue_means.items():
        assert np.all(v.data[l.data == cls] == np.float32(mu))
    assert np.all(v.data[l.data == 0] == 0)


def test_histogram_oracle(default_pair):
    v, l = default_pair
    counts = np.bincount(l.data.ravel(), minlength=9)
    assert np.all(counts > 0)
    assert v.data[l.data == P.ECSF].mean() > v.data[l.data == P.UWM].mean()
    # T2-like: both CSF classes brighter than every other tissue
    means = [v.data[l.data == c].mean() for c in range(1, 9)]
    csf = min(means[P.VCSF - 1], means[P.ECSF - 1])
    assert all(csf > m for c, m in enumerate(means, start=1) if c not in (P.VCSF, P.ECSF))


def test_intensity_range(default_pair):
    v, _ = default_pair
    assert np.all(np.isfinite(v.data))
    assert v.data.min() >= 0 and v.data.max() <= 1


def test_classes_connected_in_plane(default_pair):
    _, l = default_pair
    for z in range(l.data.shape[0]):
        for cls in range(1, 9):
            m = l.data[z] == cls
            if m.any():
                assert ndimage.label(m)[1] == 1, (z, cls)


def test_nesting(default_pair):
    """ventricles inside BGT/uWM, everything inside the eCSF shell."""
    _, l = default_pair
    mid = l.data[l.data.shape[0] // 2]
    brain = ndimage.binary_fill_holes(mid > 0)
    assert np.all(mid[~brain] == 0)
    outer = mid * (ndimage.binary_dilation(mid == 0) & (mid > 0))
    assert set(np.unique(outer[outer > 0])) == {P.ECSF}
    # mWM has no contact with the background or eCSF
    ring = ndimage.binary_dilation(mid == P.MWM) & (mid != P.MWM)
    assert not np.isin(mid[ring], [0, P.ECSF]).any()


def test_seed_changes_voxels_keeps_fractions():
    cfg = P.PhantomConfig(dims=(96, 96, 6), seed=0)
    base_v, base_l = P.generate_phantom(cfg)
    f0 = np.bincount(base_l.data.ravel(), minlength=9)[1:]
    for seed in (1, 2, 3):
        v, l = P.generate_phantom(replace(cfg, seed=seed))
        assert not np.array_equal(v.data, base_v.data)
        f = np.bincount(l.data.ravel(), minlength=9)[1:]
        assert np.all(np.abs(f - f0) <= 0.3 * f0)


def test_config_errors():
    with pytest.raises(P.PhantomError):
        P.PhantomConfig(noise_sigma=-0.1)
    with pytest.raises(P.PhantomError):
        P.PhantomConfig(bias_amplitude=1.0)
    with pytest.raises(P.PhantomError):
        P.PhantomConfig(tissue_means={1: 0.5})
    with pytest.raises(P.PhantomError):
        P.generate_phantom(P.PhantomConfig(dims=(16, 64, 2)))


def test_spacing_keeps_field_of_view():
    sx, sy, sz = P.PhantomConfig(dims=(64, 128, 4)).voxel_spacing()
    assert sx * 64 == pytest.approx(0.34 * 384)
    assert sy * 128 == pytest.approx(0.34 * 384)
    assert sz == 2.0


def test_cohort_layout(tmp_path):
    rows = P.generate_cohort(3, P.PhantomConfig(dims=(32, 32, 2), seed=5), tmp_path)
    assert len(rows) == 3
    assert len(list(tmp_path.glob("*_labels.nbv"))) == 3
    assert len([p for p in tmp_path.glob("*.nbv") if "labels" not in p.name]) == 3
    lines = (tmp_path / "manifest.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    for line, row in zip(lines, rows):
        split, seed, vp, lp = line.split(",")
        assert split == row.split and int(seed) == row.seed
        assert load_image(tmp_path / vp) == P.generate_phantom(P.PhantomConfig(dims=(32, 32, 2), seed=row.seed))[0]
        assert load_labels(tmp_path / lp).dims == (32, 32, 2)
    assert P.read_manifest(tmp_path / "manifest.csv") == rows


def test_cohort_deterministic(tmp_path):
    cfg = P.PhantomConfig(dims=(32, 32, 2), seed=9)
    P.generate_cohort(4, cfg, tmp_path / "a")
    P.generate_cohort(4, cfg, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_split_counts_paper_ratio():
    # [PAPER] 15 motion-free and 20 motion-corrupted training scans
    assert P.split_counts(35) == (15, 20, 0)
    # largest remainder: 7 * 15/35 = 3, 7 * 20/35 = 4; 45 -> 19.29, 25.71
    assert P.split_counts(7) == (3, 4, 0)
    assert P.split_counts(45) == (19, 26, 0)
    assert P.split_counts(10, (0.3, 0.3)) == (3, 3, 4)


def test_seeds_distinct_and_derived():
    seeds = [P.derive_seed(42, i) for i in range(50)]
    assert len(set(seeds)) == 50
    assert seeds == [P.derive_seed(42, i) for i in range(50)]
    assert seeds != [P.derive_seed(43, i) for i in range(50)]


def test_cohort_errors(tmp_path):
    with pytest.raises(P.PhantomError):
        P.generate_cohort(0, P.PhantomConfig(), tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(P.PhantomError):
        P.generate_cohort(1, P.PhantomConfig(dims=(32, 32, 1)), blocker / "sub")
