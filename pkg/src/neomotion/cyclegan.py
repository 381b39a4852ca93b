"""Motion-correction / motion-generation cycleGAN.

Two identical ResNet-style generators (MC: motion -> clean, MG: clean -> motion)
and two PatchGAN discriminators, trained on unpaired slice sets with a
least-squares adversarial loss plus lambda-weighted L1 cycle consistency.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .nnkernel import AdamConfig, ModelParams, Tensor, adam_step, collect_grads
from .nnkernel import graph as G
from .nnkernel.layers import conv, conv_t, init_residual_block, inorm, residual_block
from .nnkernel.params import init_conv, init_norm, load_checkpoint, save_checkpoint
from .volumeio import Volume

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("adv_mc", "adv_mg", "cyc_mc", "cyc_mg", "d_mc", "d_mg")
CHECKPOINT_FILES = {"mc": "mc.nbc", "mg": "mg.nbc", "dis_mc": "dis_mc.nbc", "dis_mg": "dis_mg.nbc"}


class CycleGANError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 16
    n_residual_blocks: int = 3
    n_down: int = 2
    # output = clamp(input + tanh(.)/2) instead of (tanh(.) + 1)/2
    global_skip: bool = True

    def __post_init__(self):
        if self.n_residual_blocks < 1:
            raise CycleGANError("n_residual_blocks must be >= 1")
        if self.base_width < 1 or self.n_down < 1:
            raise CycleGANError("base_width and n_down must be >= 1")

    @property
    def divisor(self) -> int:
        return 2 ** self.n_down


@dataclass(frozen=True)
class DiscriminatorSpec:
    """70x70 PatchGAN: three stride-2 4x4 convs, one stride-1, then a 1-channel head."""

    in_channels: int = 1
    base_width: int = 64
    n_layers: int = 3
    instance_norm: bool = False

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * min(2 ** i, 8) for i in range(self.n_layers + 1))

    def receptive_field(self) -> int:
        strides = [2] * self.n_layers + [1, 1]
        rf = 1
        for s in reversed(strides):
            rf = (rf - 1) * s + 4
        return rf

    def output_size(self, n: int) -> int:
        for _ in range(self.n_layers):
            n = (n + 2 - 4) // 2 + 1
        for _ in range(2):
            n = n + 2 - 4 + 1
        return n


@dataclass(frozen=True)
class CycleLossConfig:
    lam: float = 10.0
    adversarial: str = "lsgan"

    def __post_init__(self):
        if self.lam < 0:
            raise CycleGANError("lambda must be >= 0")
        if self.adversarial != "lsgan":
            raise CycleGANError(f"unsupported adversarial flavor {self.adversarial!r}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1
    learning_rate: float = 2e-4
    epochs: int = 1
    seed: int = 0
    pool_size: int = 50
    iterations: int | None = None
    beta1: float = 0.5
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=lambda: DiscriminatorSpec(base_width=16))

    def __post_init__(self):
        if min(self.batch_size, self.epochs) < 1 or self.pool_size < 0 or not self.learning_rate > 0:
            raise CycleGANError("batch_size, epochs and learning_rate must be positive")
        if self.iterations is not None and self.iterations < 1:
            raise CycleGANError("iterations must be positive")

    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, beta1=self.beta1)


# values reported for the clinical run; desk defaults above are what the tests train
PAPER_TRAIN = TrainConfig(batch_size=4, learning_rate=5e-5, epochs=100, beta1=0.9,
                          generator=GeneratorSpec(base_width=64, n_residual_blocks=9, global_skip=False),
                          discriminator=DiscriminatorSpec(base_width=64))
DESK_TRAIN = TrainConfig(iterations=2000)


# --- networks -------------------------------------------------------------------

def build_generator(spec: GeneratorSpec, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = ModelParams()
    w = spec.base_width
    init_conv(p, rng, "head", (w, spec.in_channels, 7, 7))
    init_norm(p, "head_norm", w)
    ch = w
    for i in range(spec.n_down):
        init_conv(p, rng, f"down{i}", (ch * 2, ch, 3, 3))
        init_norm(p, f"down{i}_norm", ch * 2)
        ch *= 2
    for i in range(spec.n_residual_blocks):
        init_residual_block(p, rng, f"res{i}", ch)
    for i in range(spec.n_down):
        init_conv(p, rng, f"up{i}", (ch, ch // 2, 4, 4), transpose=True)
        init_norm(p, f"up{i}_norm", ch // 2)
        ch //= 2
    init_conv(p, rng, "tail", (spec.out_channels, ch, 7, 7))
    return p


def generator_forward(p: dict[str, Tensor], spec: GeneratorSpec, x: Tensor) -> Tensor:
    """(b, c, h, w) -> (b, c, h, w) in [0, 1]; h and w must be divisible by 4."""
    h, w = x.shape[2:]
    if h % spec.divisor or w % spec.divisor:
        raise CycleGANError(f"generator input {h}x{w} not divisible by {spec.divisor}")
    y = G.relu(inorm(p, "head_norm", conv(p, "head", x, 1, 3)))
    for i in range(spec.n_down):
        y = G.relu(inorm(p, f"down{i}_norm", conv(p, f"down{i}", y, 2, 1)))
    for i in range(spec.n_residual_blocks):
        y = residual_block(p, f"res{i}", y)
    for i in range(spec.n_down):
        y = G.relu(inorm(p, f"up{i}_norm", conv_t(p, f"up{i}", y, 2, 1)))
    y = G.tanh(conv(p, "tail", y, 1, 3))
    if spec.global_skip and spec.in_channels == spec.out_channels:
        return G.clamp(G.add(x, G.affine(y, 0.5, 0.0)))
    return G.affine(y, 0.5, 0.5)


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = ModelParams()
    ch = spec.in_channels
    for i, width in enumerate(spec.widths):
        init_conv(p, rng, f"c{i}", (width, ch, 4, 4))
        if i > 0 and spec.instance_norm:
            init_norm(p, f"c{i}_norm", width)
        ch = width
    init_conv(p, rng, "score", (1, ch, 4, 4))
    return p


def discriminator_forward(p: dict[str, Tensor], spec: DiscriminatorSpec, x: Tensor,
                          normalize: bool = True) -> Tensor:
    """Grid of raw patch scores, one per 70x70 receptive field.

    ``normalize=False`` skips the instance norms, whose image-wide statistics
    otherwise couple every score to every pixel; it exists to expose the conv
    stack's own receptive field.
    """
    y = x
    for i in range(len(spec.widths)):
        y = conv(p, f"c{i}", y, 2 if i < spec.n_layers else 1, 1)
        if i > 0 and normalize and spec.instance_norm:
            y = inorm(p, f"c{i}_norm", y)
        y = G.leaky_relu(y)
    return conv(p, "score", y, 1, 1)


# --- losses ----------------------------------------------------------------------

def adversarial_loss_value(scores: np.ndarray, real: bool) -> tuple[float, np.ndarray]:
    """Least-squares loss ``mean((s - t)^2)`` (t = 1 real, 0 fake) and its gradient."""
    t = 1.0 if real else 0.0
    diff = scores - t
    return float(np.mean(diff * diff)), (2.0 / scores.size) * diff


def adversarial_loss(scores: Tensor, real: bool) -> Tensor:
    value, grad = adversarial_loss_value(scores.data, real)
    return G.apply(np.asarray(value, dtype=scores.data.dtype), (scores,), lambda g: (g * grad,))


def cycle_loss_value(original: np.ndarray, reconstructed: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its gradient w.r.t. ``reconstructed`` (sign(0) = 0)."""
    diff = reconstructed - original
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def cycle_loss(original: Tensor, reconstructed: Tensor) -> Tensor:
    value, grad = cycle_loss_value(original.data, reconstructed.data)
    return G.apply(np.asarray(value, dtype=reconstructed.data.dtype), (original, reconstructed),
                   lambda g: (-g * grad, g * grad))


def weighted_sum(terms: list[tuple[float, Tensor]]) -> Tensor:
    data = sum(w * t.data for w, t in terms)
    return G.apply(np.asarray(data), [t for _, t in terms], lambda g: tuple(w * g for w, _ in terms))


# --- training --------------------------------------------------------------------

class EpochSampler:
    """Batches of dataset indices from successive seeded permutations."""

    def __init__(self, n: int, batch_size: int, seed):
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng(seed)
        self._queue = np.empty(0, dtype=np.int64)

    def __call__(self) -> np.ndarray:
        while self._queue.size < self.batch_size:
            self._queue = np.concatenate([self._queue, self.rng.permutation(self.n)])
        out, self._queue = self._queue[: self.batch_size], self._queue[self.batch_size:]
        return out


class ReplayBuffer:
    """Pool of past generated images shown to a discriminator."""

    def __init__(self, size: int, seed):
        self.size = size
        self.images: list[np.ndarray] = []
        self.rng = np.random.default_rng(seed)

    def query(self, batch: np.ndarray) -> np.ndarray:
        if self.size == 0:
            return batch
        out = []
        for img in batch:
            if len(self.images) < self.size:
                self.images.append(img.copy())
                out.append(img)
            elif self.rng.random() < 0.5:
                k = int(self.rng.integers(self.size))
                out.append(self.images[k])
                self.images[k] = img.copy()
            else:
                out.append(img)
        return np.stack(out)


@dataclass
class CycleGANModels:
    mc: ModelParams
    mg: ModelParams
    dis_mc: ModelParams
    dis_mg: ModelParams
    gen_spec: GeneratorSpec
    dis_spec: DiscriminatorSpec

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for key, fname in CHECKPOINT_FILES.items():
            save_checkpoint(getattr(self, key), out / fname)

    @classmethod
    def load(cls, out_dir, gen_spec: GeneratorSpec, dis_spec: DiscriminatorSpec) -> "CycleGANModels":
        out = Path(out_dir)
        nets = {k: load_checkpoint(out / f) for k, f in CHECKPOINT_FILES.items()}
        return cls(**nets, gen_spec=gen_spec, dis_spec=dis_spec)


@dataclass
class History:
    rows: list[dict[str, float]] = field(default_factory=list)
    g_total: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("iteration",) + HISTORY_COLUMNS)
            for i, r in enumerate(self.rows):
                writer.writerow([i] + [repr(float(r[c])) for c in HISTORY_COLUMNS])


def _as_slices(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1 or len(arr) == 0:
        raise CycleGANError(f"expected a non-empty (n, h, w) slice stack, got shape {arr.shape}")
    return arr


def default_samplers(cfg: TrainConfig, n_clean: int, n_motion: int) -> tuple[EpochSampler, EpochSampler]:
    """The independent clean and motion index streams ``train_cyclegan`` uses when none are given."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(8)
    return EpochSampler(n_clean, cfg.batch_size, seeds[4]), EpochSampler(n_motion, cfg.batch_size, seeds[5])


def train_cyclegan(clean_slices, motion_slices, cfg: TrainConfig = DESK_TRAIN,
                   loss_cfg: CycleLossConfig = CycleLossConfig(),
                   clean_sampler: Callable[[], np.ndarray] | None = None,
                   motion_sampler: Callable[[], np.ndarray] | None = None,
                   models: CycleGANModels | None = None,
                   callback: Callable[[int, dict], None] | None = None) -> tuple[CycleGANModels, History]:
    """Alternate generator and discriminator updates on unpaired slice sets.

    The two datasets are sampled by independent index streams. Pass explicit
    samplers to control the draw order (used to check the unpaired contract).
    """
    clean = _as_slices(clean_slices)
    motion = _as_slices(motion_slices)
    if clean.shape[2:] != motion.shape[2:]:
        raise CycleGANError(f"slice dims differ: {clean.shape[2:]} vs {motion.shape[2:]}")
    gspec, dspec = cfg.generator, cfg.discriminator
    h, w = clean.shape[2:]
    if h % gspec.divisor or w % gspec.divisor:
        raise CycleGANError(f"slice dims {h}x{w} not divisible by {gspec.divisor}")

    seeds = np.random.SeedSequence(cfg.seed).spawn(8)
    if models is None:
        gseed = [int(s.generate_state(1)[0]) for s in seeds[:4]]
        models = CycleGANModels(build_generator(gspec, gseed[0]), build_generator(gspec, gseed[1]),
                                build_discriminator(dspec, gseed[2]), build_discriminator(dspec, gseed[3]),
                                gspec, dspec)
    default_clean, default_motion = default_samplers(cfg, len(clean), len(motion))
    clean_sampler = clean_sampler or default_clean
    motion_sampler = motion_sampler or default_motion
    pool_clean = ReplayBuffer(cfg.pool_size, seeds[6])
    pool_motion = ReplayBuffer(cfg.pool_size, seeds[7])
    n_iter = cfg.iterations or cfg.epochs * int(np.ceil(max(len(clean), len(motion)) / cfg.batch_size))
    adam = cfg.adam()
    lam = loss_cfg.lam
    history = History()

    for it in range(n_iter):
        real_motion = Tensor(motion[motion_sampler()])
        real_clean = Tensor(clean[clean_sampler()])

        # generator step; discriminator weights frozen
        pmc, pmg = models.mc.leaves(), models.mg.leaves()
        dmc, dmg = models.dis_mc.leaves(False), models.dis_mg.leaves(False)
        fake_clean = generator_forward(pmc, gspec, real_motion)
        rec_motion = generator_forward(pmg, gspec, fake_clean)
        fake_motion = generator_forward(pmg, gspec, real_clean)
        rec_clean = generator_forward(pmc, gspec, fake_motion)
        adv_mc = adversarial_loss(discriminator_forward(dmc, dspec, fake_clean), True)
        adv_mg = adversarial_loss(discriminator_forward(dmg, dspec, fake_motion), True)
        cyc_mc = cycle_loss(real_motion, rec_motion)
        cyc_mg = cycle_loss(real_clean, rec_clean)
        g_total = weighted_sum([(1.0, adv_mc), (1.0, adv_mg), (lam, cyc_mc), (lam, cyc_mg)])
        g_total.backward()
        adam_step(models.mc, collect_grads(pmc), adam)
        adam_step(models.mg, collect_grads(pmg), adam)

        # discriminator step on real batches and pooled fakes
        losses = {}
        for key, net, real, fake, pool in (
                ("d_mc", models.dis_mc, real_clean, fake_clean, pool_clean),
                ("d_mg", models.dis_mg, real_motion, fake_motion, pool_motion)):
            pd = net.leaves()
            loss_real = adversarial_loss(discriminator_forward(pd, dspec, real), True)
            loss_fake = adversarial_loss(discriminator_forward(pd, dspec, Tensor(pool.query(fake.data))), False)
            total = weighted_sum([(1.0, loss_real), (1.0, loss_fake)])
            total.backward()
            adam_step(net, collect_grads(pd), adam)
            losses[key] = float(total.data)

        row = {"adv_mc": float(adv_mc.data), "adv_mg": float(adv_mg.data),
               "cyc_mc": float(cyc_mc.data), "cyc_mg": float(cyc_mg.data), **losses}
        if not all(np.isfinite(v) for v in row.values()):
            raise CycleGANError(f"non-finite loss at iteration {it}: {row}")
        history.rows.append(row)
        history.g_total.append(float(g_total.data))
        if callback is not None:
            callback(it, row)
        if it % 100 == 0:
            log.info("cyclegan iter %d %s", it, {k: round(v, 4) for k, v in row.items()})
    return models, history


# --- inference -------------------------------------------------------------------

def apply_generator(params: ModelParams, spec: GeneratorSpec, v: Volume, chunk: int = 8) -> Volume:
    """Run a generator slice by slice; output clamped to [0, 1]."""
    nx, ny, nz = v.dims
    if nx % spec.divisor or ny % spec.divisor:
        raise CycleGANError(f"in-plane dims {nx}x{ny} not divisible by {spec.divisor}")
    leaves = params.leaves(False)
    out = np.empty_like(v.data)
    for z0 in range(0, nz, chunk):
        x = Tensor(v.data[z0:z0 + chunk, None].astype(np.float32))
        out[z0:z0 + chunk] = generator_forward(leaves, spec, x).data[:, 0]
    return v.replace(np.clip(out, 0.0, 1.0))


def correct(mc: ModelParams, v: Volume, spec: GeneratorSpec = GeneratorSpec()) -> Volume:
    return apply_generator(mc, spec, v)


def add_motion(mg: ModelParams, v: Volume, spec: GeneratorSpec = GeneratorSpec()) -> Volume:
    return apply_generator(mg, spec, v)
