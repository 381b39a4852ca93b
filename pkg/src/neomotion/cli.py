"""``neomotion`` command line: phantom cohorts through to the five-condition report matrix.

Every subcommand reads and writes a fixed layout under ``--out``::

    cohort/       raw phantoms, labels, manifest.csv
    clean/        masked phantoms (all splits)
    corrupted/    motionsim output for train-motion and test, plus motion traces
    cyclegan/     mc.nbc mg.nbc dis_mc.nbc dis_mg.nbc history.csv
    segnet_none/, segnet_motion/   model.nbc history.csv
    corrected/    MC applied to the corrupted test scans
    augmented/    MG applied to the segmenter's training scans
    predictions/<condition>/       label maps
    reports/      <condition>.csv and summary.csv

Configuration is a flat UTF-8 ``section.key=value`` file. ``--seed``
overrides the ``seed`` key. Stage seeds derive from the global seed.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import zlib
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .cyclegan import (CycleGANError, CycleGANModels, CycleLossConfig, DiscriminatorSpec, GeneratorSpec,
                       TrainConfig, add_motion, correct, train_cyclegan)
from .metrics import MetricsError, average_reports, evaluate
from .motionsim import MotionConfig, MotionError, corrupt_volume, write_trace
from .nnkernel import CheckpointError, load_checkpoint, save_checkpoint
from .phantom import PhantomConfig, PhantomError, generate_cohort, read_manifest
from .segnet import SegNetError, SegTrainConfig, UNetSpec, segment_volume, train_segnet
from .volumeio import (DimensionMismatchError, PatchSpec, VolumeFormatError, apply_mask, load_image,
                       load_labels, save_volume)

log = logging.getLogger("neomotion")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4, 5
CONDITIONS = ("motion_free", "motion_synthesized", "motion_corrected",
              "motion_augmented", "motion_corrected_augmented")
# condition -> (segmenter, image source)
CONDITION_INPUTS = {
    "motion_free": ("none", "clean"),
    "motion_synthesized": ("none", "corrupted"),
    "motion_corrected": ("none", "corrected"),
    "motion_augmented": ("motion", "corrupted"),
    "motion_corrected_augmented": ("motion", "corrected"),
}
DATA_ERRORS = (VolumeFormatError, DimensionMismatchError, CheckpointError, CycleGANError, SegNetError,
               MetricsError, MotionError, PhantomError)


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


# --- configuration ------------------------------------------------------------------

def _ints(s):
    return tuple(int(x) for x in s.split(","))


def _floats(s):
    return tuple(float(x) for x in s.split(","))


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _optional_int(s):
    return None if s.strip().lower() in ("", "none") else int(s)


# key -> (parser, default); defaults define the desk-scale experiment
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "phantom.dims": (_ints, (64, 64, 8)),
    "phantom.noise_sigma": (float, 0.02),
    "phantom.bias_amplitude": (float, 0.1),
    "phantom.deformation_scale": (float, 3.0),
    "phantom.counts": (_ints, (15, 20, 10)),
    "motion.n_events": (_ints, (1, 3)),
    "motion.max_translation": (float, 4.0),
    "motion.max_rotation": (float, 0.05),
    "motion.block_fraction": (_floats, (0.05, 0.3)),
    "cyclegan.lambda": (float, 10.0),
    "cyclegan.batch_size": (int, 1),
    "cyclegan.learning_rate": (float, 2e-4),
    "cyclegan.beta1": (float, 0.5),
    "cyclegan.epochs": (int, 1),
    "cyclegan.iterations": (_optional_int, 2000),
    "cyclegan.pool_size": (int, 50),
    "cyclegan.base_width": (int, 16),
    "cyclegan.residual_blocks": (int, 3),
    "cyclegan.global_skip": (_bool, True),
    "cyclegan.dis_base_width": (int, 16),
    "cyclegan.dis_instance_norm": (_bool, False),
    "segnet.batch_size": (int, 4),
    "segnet.learning_rate": (float, 1e-3),
    "segnet.epochs": (int, 150),
    "segnet.iterations": (_optional_int, None),
    "segnet.base_width": (int, 8),
    "segnet.train_volumes": (int, 5),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve(raw: dict[str, str], seed: int | None = None) -> dict:
    values = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from None
        else:
            values[key] = default
    if seed is not None:
        values["seed"] = seed
    if not 0 <= values["seed"] < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return values


def _canonical(values: dict) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(fmt(x) for x in v)
        return repr(v)
    return "".join(f"{k}={fmt(values[k])}\n" for k in SCHEMA)


def stage_seed(seed: int, stage: str) -> int:
    state = np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    out: Path
    phantom: PhantomConfig = field(init=False)
    counts: tuple[int, int, int] = field(init=False)
    motion: MotionConfig = field(init=False)
    cyclegan: TrainConfig = field(init=False)
    loss: CycleLossConfig = field(init=False)
    segnet: SegTrainConfig = field(init=False)
    seg_volumes: int = field(init=False)

    def __post_init__(self):
        v = self.values
        seed = v["seed"]
        try:
            dims = v["phantom.dims"]
            if len(dims) != 3:
                raise ConfigError("phantom.dims needs three values")
            counts = v["phantom.counts"]
            if len(counts) != 3 or min(counts) < 1:
                raise ConfigError("phantom.counts needs three positive values")
            ph = PhantomConfig(dims=dims, seed=stage_seed(seed, "phantom"), noise_sigma=v["phantom.noise_sigma"],
                               bias_amplitude=v["phantom.bias_amplitude"],
                               deformation_scale=v["phantom.deformation_scale"])
            mo = MotionConfig(seed=stage_seed(seed, "motion"), n_events=v["motion.n_events"],
                              max_translation=v["motion.max_translation"], max_rotation=v["motion.max_rotation"],
                              block_fraction=v["motion.block_fraction"])
            gen = GeneratorSpec(base_width=v["cyclegan.base_width"], n_residual_blocks=v["cyclegan.residual_blocks"],
                                global_skip=v["cyclegan.global_skip"])
            dis = DiscriminatorSpec(base_width=v["cyclegan.dis_base_width"],
                                    instance_norm=v["cyclegan.dis_instance_norm"])
            tc = TrainConfig(batch_size=v["cyclegan.batch_size"], learning_rate=v["cyclegan.learning_rate"],
                             epochs=v["cyclegan.epochs"], seed=stage_seed(seed, "cyclegan"),
                             pool_size=v["cyclegan.pool_size"], iterations=v["cyclegan.iterations"],
                             beta1=v["cyclegan.beta1"], generator=gen, discriminator=dis)
            loss = CycleLossConfig(lam=v["cyclegan.lambda"])
            seg = SegTrainConfig(batch_size=v["segnet.batch_size"], learning_rate=v["segnet.learning_rate"],
                                 epochs=v["segnet.epochs"], iterations=v["segnet.iterations"],
                                 patch=PatchSpec(dims[1], dims[0], 3), seed=stage_seed(seed, "segnet"),
                                 unet=UNetSpec.scaled(v["segnet.base_width"]))
            n_seg = v["segnet.train_volumes"]
            if not 1 <= n_seg <= counts[0]:
                raise ConfigError("segnet.train_volumes must lie in 1..phantom.counts[0]")
            for n in dims[:2]:
                if n % seg.unet.divisor or n % gen.divisor:
                    raise ConfigError(f"phantom in-plane dims must be divisible by {seg.unet.divisor}")
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        for name, val in (("phantom", ph), ("counts", tuple(counts)), ("motion", mo), ("cyclegan", tc),
                          ("loss", loss), ("segnet", seg), ("seg_volumes", n_seg)):
            object.__setattr__(self, name, val)

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(_canonical(self.values).encode()).hexdigest()[:16]

    @property
    def provenance(self) -> str:
        return f"neomotion {__version__} config_sha256={self.config_hash} seed={self.seed}"


def load_config(path: str | None, out: str, seed: int | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            text = p.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        raw = parse_config_text(text, str(p))
    return ExperimentConfig(resolve(raw, seed), Path(out))


# --- stages -------------------------------------------------------------------------

def _dir(cfg: ExperimentConfig, name: str, create: bool = True) -> Path:
    d = cfg.out / name
    if create:
        d.mkdir(parents=True, exist_ok=True)
    return d


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"{path} not found; run `neomotion {stage}` first")
    return path


def _stamp(cfg: ExperimentConfig, d: Path) -> None:
    """Binary formats have no comment field, so each stage directory gets a provenance sidecar."""
    (d / "provenance.txt").write_text(f"# {cfg.provenance}\n" + _canonical(cfg.values), encoding="utf-8")


def _rows(cfg: ExperimentConfig, split: str | None = None):
    rows = read_manifest(_require(cfg.out / "cohort" / "manifest.csv", "phantom"))
    return [r for r in rows if split is None or r.split == split]


def _stem(row) -> str:
    return Path(row.volume_path).stem


def run_phantom(cfg: ExperimentConfig) -> None:
    d = _dir(cfg, "cohort")
    rows = generate_cohort(sum(cfg.counts), cfg.phantom, d, counts=cfg.counts)
    _stamp(cfg, d)
    log.info("wrote %d phantoms to %s", len(rows), d)


def run_corrupt(cfg: ExperimentConfig) -> None:
    clean_dir, bad_dir = _dir(cfg, "clean"), _dir(cfg, "corrupted")
    for i, row in enumerate(_rows(cfg)):
        masked = apply_mask(load_image(_require(row.volume_path, "phantom")),
                            load_labels(_require(row.labels_path, "phantom")))
        save_volume(masked, clean_dir / f"{_stem(row)}.nbv")
        if row.split == "train-clean":
            continue
        bad, traces = corrupt_volume(masked, replace(cfg.motion, seed=stage_seed(cfg.motion.seed, str(i))))
        save_volume(bad, bad_dir / f"{_stem(row)}.nbv")
        for z, tr in enumerate(traces):
            write_trace(tr, bad_dir / f"{_stem(row)}_z{z:03d}.trace")
    _stamp(cfg, clean_dir)
    _stamp(cfg, bad_dir)


def _slices(paths) -> np.ndarray:
    return np.concatenate([load_image(p).data for p in paths])


def run_train_cyclegan(cfg: ExperimentConfig) -> None:
    clean = [_require(cfg.out / "clean" / f"{_stem(r)}.nbv", "corrupt") for r in _rows(cfg, "train-clean")]
    motion = [_require(cfg.out / "corrupted" / f"{_stem(r)}.nbv", "corrupt") for r in _rows(cfg, "train-motion")]
    models, history = train_cyclegan(_slices(clean), _slices(motion), cfg.cyclegan, cfg.loss)
    d = _dir(cfg, "cyclegan")
    models.save(d)
    history.write_csv(d / "history.csv", cfg.provenance)
    _stamp(cfg, d)


def _load_cyclegan(cfg: ExperimentConfig) -> CycleGANModels:
    d = _require(cfg.out / "cyclegan", "train-cyclegan")
    for name in ("mc.nbc", "mg.nbc"):
        _require(d / name, "train-cyclegan")
    return CycleGANModels.load(d, cfg.cyclegan.generator, cfg.cyclegan.discriminator)


def _seg_pairs(cfg: ExperimentConfig):
    rows = _rows(cfg, "train-clean")[: cfg.seg_volumes]
    return [(load_image(_require(cfg.out / "clean" / f"{_stem(r)}.nbv", "corrupt")), load_labels(r.labels_path))
            for r in rows]


def run_add_motion(cfg: ExperimentConfig) -> None:
    mg = _load_cyclegan(cfg).mg
    d = _dir(cfg, "augmented")
    for r in _rows(cfg, "train-clean")[: cfg.seg_volumes]:
        v = load_image(_require(cfg.out / "clean" / f"{_stem(r)}.nbv", "corrupt"))
        save_volume(add_motion(mg, v, cfg.cyclegan.generator), d / f"{_stem(r)}.nbv")
    _stamp(cfg, d)


def run_train_segnet(cfg: ExperimentConfig, modes=("none", "motion")) -> None:
    pairs = _seg_pairs(cfg)
    for mode in modes:
        seg_cfg = replace(cfg.segnet, augmentation=mode)
        mg = _load_cyclegan(cfg).mg if mode == "motion" else None
        model, history = train_segnet(pairs, seg_cfg, mg=mg, gen_spec=cfg.cyclegan.generator)
        d = _dir(cfg, f"segnet_{mode}")
        save_checkpoint(model, d / "model.nbc")
        with open(d / "history.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# {cfg.provenance}\nepoch,loss\n")
            fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(history.epoch_loss))
        _stamp(cfg, d)


def run_correct(cfg: ExperimentConfig) -> None:
    mc = _load_cyclegan(cfg).mc
    d = _dir(cfg, "corrected")
    for r in _rows(cfg, "test"):
        v = load_image(_require(cfg.out / "corrupted" / f"{_stem(r)}.nbv", "corrupt"))
        save_volume(correct(mc, v, cfg.cyclegan.generator), d / f"{_stem(r)}.nbv")
    _stamp(cfg, d)


def run_segment(cfg: ExperimentConfig) -> None:
    models = {m: load_checkpoint(_require(cfg.out / f"segnet_{m}" / "model.nbc", "train-segnet"))
              for m in ("none", "motion")}
    stage = {"clean": "corrupt", "corrupted": "corrupt", "corrected": "correct"}
    for cond in CONDITIONS:
        mode, source = CONDITION_INPUTS[cond]
        d = _dir(cfg, f"predictions/{cond}")
        for r in _rows(cfg, "test"):
            v = load_image(_require(cfg.out / source / f"{_stem(r)}.nbv", stage[source]))
            save_volume(segment_volume(models[mode], v, cfg.segnet.unet), d / f"{_stem(r)}_seg.nbv")
        _stamp(cfg, d)


def run_evaluate(cfg: ExperimentConfig) -> dict[str, float]:
    d = _dir(cfg, "reports")
    means = {}
    for cond in CONDITIONS:
        reps = []
        for r in _rows(cfg, "test"):
            pred = load_labels(_require(cfg.out / "predictions" / cond / f"{_stem(r)}_seg.nbv", "segment"))
            reps.append(evaluate(pred, load_labels(r.labels_path)))
        report = average_reports(reps)
        report.write_csv(d / f"{cond}.csv", cfg.provenance)
        means[cond] = report.mean_dc
    with open(d / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {cfg.provenance}\ncondition,mean_dc\n")
        fh.writelines(f"{c},{means[c]!r}\n" for c in CONDITIONS)
    return means


def run_experiment(cfg: ExperimentConfig) -> None:
    for name, fn in STAGES:
        log.info("stage %s", name)
        fn(cfg)


STAGES = (
    ("phantom", run_phantom),
    ("corrupt", run_corrupt),
    ("train-cyclegan", run_train_cyclegan),
    ("add-motion", run_add_motion),
    ("train-segnet", run_train_segnet),
    ("correct", run_correct),
    ("segment", run_segment),
    ("evaluate", run_evaluate),
)
COMMANDS = dict(STAGES, experiment=run_experiment)


# --- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neomotion", description="Motion-artifact correction experiments on phantoms.")
    ap.add_argument("--version", action="version", version=f"neomotion {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file (defaults apply when omitted)")
        p.add_argument("--out", default="neomotion_out", help="work directory (default: %(default)s)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _thread_limit():
    raw = os.environ.get("NEOMOTION_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"NEOMOTION_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.out, args.seed)
        with _thread_limit():
            COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"neomotion: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"neomotion: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DATA_ERRORS as exc:
        print(f"neomotion: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - anything else is a bug, reported with its own exit code
        log.exception("internal error")
        print(f"neomotion: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
