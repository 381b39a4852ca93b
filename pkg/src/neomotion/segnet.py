"""U-Net tissue segmenter on 3-slice inputs, trained with a soft multi-class Dice loss.

The three neighbouring slices enter as input channels of a 2D network; the
output has nine channels (background plus the eight tissue classes).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nnkernel import AdamConfig, ModelParams, Tensor, adam_step, collect_grads
from .nnkernel import graph as G
from .nnkernel.layers import bnorm, conv
from .nnkernel.params import init_conv, init_norm
from .volumeio import N_LABELS, LabelMap, PatchSpec, Volume, extract_patches, slice_stack

log = logging.getLogger(__name__)

DICE_EPS = 1e-5
AUGMENTATION_MODES = ("none", "motion")
# 2x2 "same" convolution after upsampling: one extra row/column at the bottom/right
_UP_PAD = (0, 1, 0, 1)


class SegNetError(ValueError):
    pass


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int = 3
    n_classes: int = N_LABELS
    widths: tuple[int, ...] = (32, 64, 128, 256, 512)

    def __post_init__(self):
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise SegNetError("need at least two stages of positive width")

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.widths) - 1)

    @classmethod
    def scaled(cls, base_width: int) -> "UNetSpec":
        return cls(widths=tuple(base_width * 2 ** i for i in range(5)))


@dataclass(frozen=True)
class SegTrainConfig:
    batch_size: int = 6
    learning_rate: float = 1e-4
    epochs: int = 200
    patch: PatchSpec = field(default_factory=lambda: PatchSpec(64, 64, 3))
    augmentation: str = "none"
    seed: int = 0
    unet: UNetSpec = field(default_factory=UNetSpec)
    # optional hard stop, counted in optimizer steps
    iterations: int | None = None

    def __post_init__(self):
        if min(self.batch_size, self.epochs) < 1 or not self.learning_rate > 0:
            raise SegNetError("batch_size, epochs and learning_rate must be positive")
        if self.iterations is not None and self.iterations < 1:
            raise SegNetError("iterations must be positive")
        if self.augmentation not in AUGMENTATION_MODES:
            raise SegNetError(f"augmentation must be one of {AUGMENTATION_MODES}")
        if self.patch.depth != self.unet.in_channels:
            raise SegNetError("patch depth must equal the network's input channels")


PAPER_SEG_TRAIN = SegTrainConfig(patch=PatchSpec(256, 256, 3))
DESK_SEG_TRAIN = SegTrainConfig(batch_size=4, learning_rate=1e-3, epochs=150, unet=UNetSpec.scaled(8))


# --- network ----------------------------------------------------------------------

def build_unet(spec: UNetSpec, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = ModelParams()

    def conv_bn(name, cin, cout, k):
        init_conv(p, rng, name, (cout, cin, k, k), bias=False)
        init_norm(p, f"{name}_bn", cout, running=True)

    ch = spec.in_channels
    for i, w in enumerate(spec.widths):
        conv_bn(f"enc{i}a", ch, w, 3)
        conv_bn(f"enc{i}b", w, w, 3)
        ch = w
    for i in reversed(range(len(spec.widths) - 1)):
        w = spec.widths[i]
        conv_bn(f"up{i}", ch, w, 2)
        conv_bn(f"dec{i}a", 2 * w, w, 3)
        conv_bn(f"dec{i}b", w, w, 3)
        ch = w
    init_conv(p, rng, "head", (spec.n_classes, ch, 1, 1))
    return p


def _cbr(p, name, x, train, padding=1):
    return G.relu(bnorm(p, f"{name}_bn", conv(p, name, x, 1, padding), train))


def unet_forward(p: dict[str, Tensor], spec: UNetSpec, x: Tensor, train: bool = False) -> Tensor:
    """(b, 3, h, w) -> (b, 9, h, w) raw class scores."""
    h, w = x.shape[2:]
    if x.shape[1] != spec.in_channels:
        raise SegNetError(f"expected {spec.in_channels} input channels, got {x.shape[1]}")
    if h % spec.divisor or w % spec.divisor:
        raise SegNetError(f"input {h}x{w} not divisible by {spec.divisor}")
    skips = []
    y = x
    last = len(spec.widths) - 1
    for i in range(len(spec.widths)):
        y = _cbr(p, f"enc{i}b", _cbr(p, f"enc{i}a", y, train), train)
        if i < last:
            skips.append(y)
            y = G.max_pool2d(y)
    for i in reversed(range(last)):
        y = _cbr(p, f"up{i}", G.upsample_nearest(y), train, _UP_PAD)
        y = G.concat([skips[i], y])
        y = _cbr(p, f"dec{i}b", _cbr(p, f"dec{i}a", y, train), train)
    return conv(p, "head", y)


# --- loss -------------------------------------------------------------------------

def softmax(scores: np.ndarray, axis: int = 1) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _one_hot(labels: np.ndarray, n: int, dtype) -> np.ndarray:
    if labels.min() < 0 or labels.max() >= n:
        raise SegNetError(f"labels must lie in 0..{n - 1}")
    return (labels[:, None] == np.arange(n).reshape(1, -1, 1, 1)).astype(dtype)


def soft_dice_value(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """``1 - mean_c soft DC_c`` over all channels, and its gradient w.r.t. the scores."""
    n = scores.shape[1]
    labels = np.asarray(labels)
    if labels.shape != (scores.shape[0],) + scores.shape[2:]:
        raise SegNetError(f"labels {labels.shape} do not match scores {scores.shape}")
    p = softmax(scores)
    y = _one_hot(labels.astype(np.int64), n, scores.dtype)
    axes = (0, 2, 3)
    inter = (p * y).sum(axis=axes)
    denom = p.sum(axis=axes) + y.sum(axis=axes) + DICE_EPS
    dc = (2 * inter + DICE_EPS) / denom
    dp = -(2 * y * denom.reshape(1, -1, 1, 1) - (2 * inter + DICE_EPS).reshape(1, -1, 1, 1)) \
        / (denom ** 2).reshape(1, -1, 1, 1) / n
    ds = p * (dp - (p * dp).sum(axis=1, keepdims=True))
    return float(1.0 - dc.mean()), ds


def soft_dice_loss(scores: Tensor, labels: np.ndarray) -> Tensor:
    value, grad = soft_dice_value(scores.data, labels)
    return G.apply(np.asarray(value, dtype=scores.data.dtype), (scores,), lambda g: (g * grad,))


# --- training ---------------------------------------------------------------------

@dataclass
class SegHistory:
    epoch_loss: list[float] = field(default_factory=list)
    iteration_loss: list[float] = field(default_factory=list)
    n_training_volumes: int = 0


def _patch_arrays(pairs, spec: PatchSpec) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for v, l in pairs:
        for img, lab in extract_patches(v, l, spec):
            xs.append(img)
            ys.append(lab)
    return np.stack(xs).astype(np.float32), np.stack(ys)


def augment_pairs(pairs, mg: ModelParams, gen_spec) -> list[tuple[Volume, LabelMap]]:
    """MG-transformed copy of every volume, each paired with its original, unchanged label map."""
    from .cyclegan import add_motion

    return [(add_motion(mg, v, gen_spec), l) for v, l in pairs]


def train_segnet(pairs, cfg: SegTrainConfig = DESK_SEG_TRAIN, mg: ModelParams | None = None,
                 gen_spec=None, model: ModelParams | None = None) -> tuple[ModelParams, SegHistory]:
    """Train the U-Net on patches of (Volume, LabelMap) pairs with soft-Dice loss and Adam.

    In motion mode every volume also contributes an MG-synthesized copy.
    Clean and synthesized patches are shuffled by separate streams and
    batches alternate between them, starting with a clean batch.
    """
    pairs = list(pairs)
    if not pairs:
        raise SegNetError("no training volumes")
    if cfg.augmentation == "motion" and mg is None:
        raise SegNetError("motion augmentation requires an MG generator")
    spec = cfg.unet
    streams = []
    xs, ys = _patch_arrays(pairs, cfg.patch)
    streams.append((xs, ys))
    n_volumes = len(pairs)
    if cfg.augmentation == "motion":
        from .cyclegan import GeneratorSpec

        aug = augment_pairs(pairs, mg, gen_spec or GeneratorSpec())
        streams.append(_patch_arrays(aug, cfg.patch))
        n_volumes += len(aug)
    h, w = xs.shape[2:]
    if h % spec.divisor or w % spec.divisor:
        raise SegNetError(f"patch {h}x{w} not divisible by {spec.divisor}")

    seeds = np.random.SeedSequence(cfg.seed).spawn(1 + len(AUGMENTATION_MODES))
    model = model or build_unet(spec, int(seeds[0].generate_state(1)[0]))
    rngs = [np.random.default_rng(s) for s in seeds[1:1 + len(streams)]]
    adam = AdamConfig(cfg.learning_rate)
    history = SegHistory(n_training_volumes=n_volumes)

    steps = 0
    for epoch in range(cfg.epochs):
        if cfg.iterations is not None and steps >= cfg.iterations:
            break
        per_stream = []
        for (sx, _), rng in zip(streams, rngs):
            order = rng.permutation(len(sx))
            per_stream.append([order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)])
        schedule = []
        for k in range(max(len(b) for b in per_stream)):
            for s, batches in enumerate(per_stream):
                if k < len(batches):
                    schedule.append((s, batches[k]))
        losses = []
        for s, idx in schedule:
            if cfg.iterations is not None and steps >= cfg.iterations:
                break
            steps += 1
            sx, sy = streams[s]
            leaves = model.leaves()
            loss = soft_dice_loss(unet_forward(leaves, spec, Tensor(sx[idx]), train=True), sy[idx])
            loss.backward()
            adam_step(model, collect_grads(leaves), adam)
            value = float(loss.data)
            if not np.isfinite(value):
                raise SegNetError(f"non-finite loss in epoch {epoch}")
            losses.append(value)
            history.iteration_loss.append(value)
        history.epoch_loss.append(float(np.mean(losses)))
        log.info("segnet epoch %d loss %.4f", epoch, history.epoch_loss[-1])
    return model, history


# --- inference --------------------------------------------------------------------

def predict_scores(model: ModelParams, spec: UNetSpec, v: Volume, chunk: int = 8) -> np.ndarray:
    """(nz, 9, ny, nx) class scores; each slice sees its mirror-padded neighbours."""
    nx, ny, nz = v.dims
    if nx % spec.divisor or ny % spec.divisor:
        raise SegNetError(f"in-plane dims {nx}x{ny} not divisible by {spec.divisor}")
    leaves = model.leaves(False)
    stacks = np.stack([slice_stack(v.data, z, spec.in_channels) for z in range(nz)]).astype(np.float32)
    out = np.empty((nz, spec.n_classes, ny, nx), dtype=np.float32)
    for z0 in range(0, nz, chunk):
        out[z0:z0 + chunk] = unet_forward(leaves, spec, Tensor(stacks[z0:z0 + chunk])).data
    return out


def segment_volume(model: ModelParams, v: Volume, spec: UNetSpec = UNetSpec()) -> LabelMap:
    scores = predict_scores(model, spec, v)
    return LabelMap(np.argmax(scores, axis=1).astype(np.uint8), v.spacing)
