"""Parameter collections, the Adam optimizer and the NBC1 checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Tensor

CHECKPOINT_MAGIC = b"NBC1"
# Non-trainable state (batch-norm running statistics) is recognised by name.
BUFFER_SUFFIXES = (".running_mean", ".running_var")
_STEP_ENTRY = "adam.t"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


class ModelParams:
    """Ordered name -> float32 array map plus Adam moment state.

    Shapes are fixed at :meth:`add` time. ``m``/``v`` are kept for trainable
    entries only; ``t`` counts optimizer steps.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        if name == _STEP_ENTRY or name.endswith((".m", ".v")):
            raise KeyError(f"reserved parameter name {name!r}")
        arr = np.array(value, dtype=np.float32)
        self.values[name] = arr
        if not is_buffer(name):
            self.m[name] = np.zeros_like(arr)
            self.v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def trainable(self) -> list[str]:
        return [n for n in self.values if not is_buffer(n)]

    def count(self) -> int:
        """Number of trainable scalars."""
        return sum(self.values[n].size for n in self.trainable())

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Fresh graph leaves sharing storage with the parameter arrays."""
        return {n: Tensor(a, requires_grad=requires_grad and not is_buffer(n), name=n)
                for n, a in self.values.items()}

    def copy(self) -> "ModelParams":
        out = ModelParams()
        out.values = {k: a.copy() for k, a in self.values.items()}
        out.m = {k: a.copy() for k, a in self.m.items()}
        out.v = {k: a.copy() for k, a in self.v.items()}
        out.t = self.t
        return out

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison of values and optimizer state."""
        def same(a, b):
            return a.keys() == b.keys() and all(
                a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)
        return (list(self.values) == list(other.values) and same(self.values, other.values)
                and same(self.m, other.m) and same(self.v, other.v) and self.t == other.t)


def collect_grads(leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: t.grad for n, t in leaves.items() if t.requires_grad and t.grad is not None}


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], cfg: AdamConfig) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    for name, g in grads.items():
        if name not in params.m:
            raise KeyError(f"gradient for unknown or non-trainable entry {name!r}")
        if g.shape != params.values[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params.values[name].shape} for {name}")
    params.t += 1
    t = params.t
    lr, b1, b2, eps = cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in params.m:
        g = grads.get(name)
        m, v = params.m[name], params.v[name]
        m *= b1
        v *= b2
        if g is not None:
            g = g.astype(np.float32, copy=False)
            m += (1 - b1) * g
            v += (1 - b2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        params.values[name] -= step.astype(np.float32)


# --- NBC1 checkpoints -------------------------------------------------------------

def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def checkpoint_bytes(params: ModelParams) -> bytes:
    entries = list(params.values.items())
    entries += [(f"{k}.m", a) for k, a in params.m.items()]
    entries += [(f"{k}.v", a) for k, a in params.v.items()]
    entries.append((_STEP_ENTRY, np.float32(params.t)))
    body = b"".join(_pack_entry(n, a) for n, a in entries)
    return CHECKPOINT_MAGIC + struct.pack("<I", len(entries)) + body


def params_from_bytes(buf: bytes) -> ModelParams:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an NBC1 checkpoint")
    try:
        (count,) = struct.unpack_from("<I", buf, 4)
        pos = 8
        raw: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"truncated payload for entry {name!r}")
            raw[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    params = ModelParams()
    for name, arr in raw.items():
        if name == _STEP_ENTRY or (name.endswith((".m", ".v")) and name[:-2] in raw):
            continue
        params.values[name] = arr
    for name in params.values:
        if not is_buffer(name):
            params.m[name] = raw[f"{name}.m"]
            params.v[name] = raw[f"{name}.v"]
    params.t = int(raw[_STEP_ENTRY]) if _STEP_ENTRY in raw else 0
    return params


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())


# --- initialization ---------------------------------------------------------------

def init_conv(params: ModelParams, rng: np.random.Generator, name: str, shape,
              bias: bool = True, transpose: bool = False) -> None:
    """Normal(0, 0.02) weights and zero bias.

    ``shape`` is (Cout, Cin, k, k), or (Cin, Cout, k, k) when ``transpose``.
    """
    params.add(f"{name}.w", rng.normal(0.0, 0.02, size=shape))
    if bias:
        params.add(f"{name}.b", np.zeros(shape[1] if transpose else shape[0]))


def init_norm(params: ModelParams, name: str, channels: int, running: bool = False) -> None:
    params.add(f"{name}.gamma", np.ones(channels))
    params.add(f"{name}.beta", np.zeros(channels))
    if running:
        params.add(f"{name}.running_mean", np.zeros(channels))
        params.add(f"{name}.running_var", np.ones(channels))
