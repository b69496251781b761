"""Layers of the residual TCN block: 1x1 conv, dilated depthwise conv,
PReLU and global layer norm.

Every layer accepts ``(C, T)`` or batched ``(B, C, T)`` input.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable leaf. ``decay`` marks it for L2 weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.decay = decay


class Module:
    """Parameter container; children and parameters are found by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _check_channels(layer: str, x: Tensor, expected: int) -> None:
    if x.ndim not in (2, 3) or x.shape[-2] != expected:
        raise ConfigurationError(f"{layer}: expected (..., {expected}, T) input, got shape {x.shape}")


class Conv1x1(Module):
    """Per-frame affine channel map ``W x + b``."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator | None = None, zero: bool = False):
        self.c_in, self.c_out = c_in, c_out
        if zero or rng is None:
            w = np.zeros((c_out, c_in))
        else:
            w = uniform_init(rng, (c_out, c_in), c_in)
        b = np.zeros((c_out, 1)) if zero or rng is None else uniform_init(rng, (c_out, 1), c_in)
        self.weight = Parameter(w)
        self.bias = Parameter(b, decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels("conv1x1", x, self.c_in)
        return tn.matmul(self.weight, x) + self.bias

    @staticmethod
    def count(c_in: int, c_out: int) -> int:
        return c_out * c_in + c_out


class DepthwiseDilatedConv(Module):
    def __init__(self, channels: int, kernel_size: int = 3, dilation: int = 1, rng: np.random.Generator | None = None):
        if kernel_size % 2 == 0:
            raise ConfigurationError(f"depthwise kernel size must be odd, got {kernel_size}")
        if dilation < 1:
            raise ConfigurationError(f"dilation must be >= 1, got {dilation}")
        self.channels, self.kernel_size, self.dilation = channels, kernel_size, dilation
        rng = rng or np.random.default_rng(0)
        self.kernel = Parameter(uniform_init(rng, (channels, kernel_size), kernel_size))
        self.bias = Parameter(uniform_init(rng, (channels, 1), kernel_size), decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels("dd_conv", x, self.channels)
        return tn.depthwise_conv1d(x, self.kernel, self.dilation) + self.bias

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * self.dilation

    @staticmethod
    def count(channels: int, kernel_size: int) -> int:
        return channels * kernel_size + channels


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        self.channels = channels
        self.slope = Parameter(np.full((channels, 1), init))

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels("prelu", x, self.channels)
        return tn.prelu(x, self.slope)


class GlobalLayerNorm(Module):
    """Normalise by mean/variance over all channels and frames of each utterance.

    ``frozen_stats`` replaces the computed (mean, variance) with fixed arrays;
    :func:`frozen_norm_stats` uses it to isolate the convolutional path.
    ``detach_stats`` treats the statistics as constants in backward. That is
    a deliberately wrong gradient, used only as a gradcheck negative control.
    """

    def __init__(self, channels: int, eps: float = 1e-8, detach_stats: bool = False):
        if eps <= 0:
            raise ConfigurationError(f"gLN epsilon must be positive, got {eps}")
        self.channels, self.eps, self.detach_stats = channels, eps, detach_stats
        self.gamma = Parameter(np.ones((channels, 1)), decay=False)
        self.beta = Parameter(np.zeros((channels, 1)), decay=False)
        self.last_stats: tuple[np.ndarray, np.ndarray] | None = None
        self.frozen_stats: tuple[np.ndarray, np.ndarray] | None = None

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels("gln", x, self.channels)
        if self.frozen_stats is not None:
            mu, var = (Tensor(a) for a in self.frozen_stats)
        else:
            mu = tn.mean(x, axis=(-2, -1), keepdims=True)
            var = tn.var(x, axis=(-2, -1), keepdims=True)
            self.last_stats = (mu.data, var.data)
            if self.detach_stats:
                mu, var = mu.detach(), var.detach()
        return (x - mu) / tn.sqrt(var + self.eps) * self.gamma + self.beta


def norm_layers(module: Module) -> list[GlobalLayerNorm]:
    found = []
    for value in vars(module).values():
        items = value if isinstance(value, list) else [value]
        for item in items:
            if isinstance(item, GlobalLayerNorm):
                found.append(item)
            elif isinstance(item, Module):
                found.extend(norm_layers(item))
    return found


@contextmanager
def frozen_norm_stats(module: Module, forward, reference):
    """Run ``forward(reference)`` and pin every gLN to the statistics it saw.

    Inside the block, perturbed inputs are normalised with the reference
    statistics, so their effect travels only through the convolutions.
    """
    with tn.no_grad():
        forward(reference)
    layers = norm_layers(module)
    for layer in layers:
        layer.frozen_stats = layer.last_stats
    try:
        yield
    finally:
        for layer in layers:
            layer.frozen_stats = None


class TCNBlock(Module):
    """x + out_conv(gLN(PReLU(dd_conv(gLN(PReLU(in_conv(x)))))))."""

    def __init__(
        self,
        channels: int,
        hidden: int,
        dilation: int,
        kernel_size: int = 3,
        rng: np.random.Generator | None = None,
        zero_out: bool = True,
    ):
        rng = rng or np.random.default_rng(0)
        self.channels, self.hidden, self.dilation, self.kernel_size = channels, hidden, dilation, kernel_size
        self.in_conv = Conv1x1(channels, hidden, rng)
        self.act1 = PReLU(hidden)
        self.norm1 = GlobalLayerNorm(hidden)
        self.dd_conv = DepthwiseDilatedConv(hidden, kernel_size, dilation, rng)
        self.act2 = PReLU(hidden)
        self.norm2 = GlobalLayerNorm(hidden)
        self.out_conv = Conv1x1(hidden, channels, rng, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels("tcn_block", x, self.channels)
        h = self.norm1(self.act1(self.in_conv(x)))
        h = self.norm2(self.act2(self.dd_conv(h)))
        return x + self.out_conv(h)

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * self.dilation

    @staticmethod
    def count(channels: int, hidden: int, kernel_size: int) -> int:
        return (
            Conv1x1.count(channels, hidden)
            + 2 * hidden  # two PReLU slope vectors
            + 4 * hidden  # two gLN gamma/beta pairs
            + DepthwiseDilatedConv.count(hidden, kernel_size)
            + Conv1x1.count(hidden, channels)
        )


def apply_dd_conv(x: Tensor, layer: DepthwiseDilatedConv) -> Tensor:
    return layer(x)


def apply_gln(x: Tensor, layer: GlobalLayerNorm) -> Tensor:
    return layer(x)


def apply_tcn_block(x: Tensor, block: TCNBlock) -> Tensor:
    return block(x)
