"""Named-parameter layer helpers shared by the generator, discriminator and U-Net."""
from __future__ import annotations

from . import graph as G
from .graph import Tensor


def conv(p: dict[str, Tensor], name: str, x: Tensor, stride: int = 1, padding=0) -> Tensor:
    return G.conv2d(x, p[f"{name}.w"], p.get(f"{name}.b"), stride, padding)


def conv_t(p: dict[str, Tensor], name: str, x: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    return G.conv_transpose2d(x, p[f"{name}.w"], p.get(f"{name}.b"), stride, padding)


def inorm(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return G.instance_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"])


def bnorm(p: dict[str, Tensor], name: str, x: Tensor, train: bool) -> Tensor:
    return G.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"],
                        p[f"{name}.running_mean"].data, p[f"{name}.running_var"].data, train)


def residual_block(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    """``x + F(x)`` with F = reflect-pad, conv3x3, instance norm, relu, reflect-pad, conv3x3, instance norm."""
    h = conv(p, f"{name}.conv1", G.reflect_pad(x, 1))
    h = G.relu(inorm(p, f"{name}.norm1", h))
    h = conv(p, f"{name}.conv2", G.reflect_pad(h, 1))
    h = inorm(p, f"{name}.norm2", h)
    return G.add(x, h)


def init_residual_block(params, rng, name: str, channels: int) -> None:
    from .params import init_conv, init_norm

    for i in (1, 2):
        init_conv(params, rng, f"{name}.conv{i}", (channels, channels, 3, 3))
        init_norm(params, f"{name}.norm{i}", channels)
