"""Temporal pooling: attentive statistics pooling and the simpler variants
(max, average, plain statistics) used for ablations.

Inputs are ``(D, T)`` or ``(B, D, T)``; time is always the last axis.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .blocks import Conv1x1, Module
from .errors import DataError, UsageError
from .tensor import Tensor

VAR_EPS = 1e-9
POOLING_KINDS = ("max", "avg", "sp", "asp")


def _std(second_moment: Tensor, mean: Tensor) -> Tensor:
    # E[z^2] - E[z]^2 can dip just below zero in floating point
    return tn.sqrt(tn.clamp_min(second_moment - mean * mean, VAR_EPS))


class AttentionNet(Module):
    """conv2(tanh(conv1(c))) mapping the 3D-wide context to D attention logits.

    conv2 starts at zero, so untrained attention is uniform over frames.
    """

    def __init__(self, dim: int, hidden: int = 128, rng: np.random.Generator | None = None):
        self.dim, self.hidden = dim, hidden
        self.conv1 = Conv1x1(3 * dim, hidden, rng)
        self.conv2 = Conv1x1(hidden, dim, zero=True)

    def __call__(self, c: Tensor) -> Tensor:
        return self.conv2(tn.tanh(self.conv1(c)))

    @staticmethod
    def count(dim: int, hidden: int) -> int:
        return Conv1x1.count(3 * dim, hidden) + Conv1x1.count(hidden, dim)


def _check_frames(z: Tensor) -> None:
    if z.ndim not in (2, 3):
        raise DataError(f"pooling expects (D, T) or (B, D, T) input, got shape {z.shape}")


def attention_weights(z: Tensor, net: AttentionNet) -> Tensor:
    """Softmax over time of the attention logits; each channel sums to 1."""
    _check_frames(z)
    mu = tn.mean(z, axis=-1, keepdims=True)
    sigma = _std(tn.mean(z * z, axis=-1, keepdims=True), mu)
    context = tn.concat([z, tn.broadcast_to(mu, z.shape), tn.broadcast_to(sigma, z.shape)], axis=-2)
    return tn.softmax(net(context), axis=-1)


def weighted_stats(z: Tensor, alpha: Tensor) -> Tensor:
    """[sum_t a*z || sqrt(sum_t a*z^2 - mean^2)] along the channel axis."""
    mu_a = tn.tsum(alpha * z, axis=-1)
    sigma_a = _std(tn.tsum(alpha * z * z, axis=-1), mu_a)
    return tn.concat([mu_a, sigma_a], axis=-1)


def asp(z: Tensor, net: AttentionNet) -> Tensor:
    return weighted_stats(z, attention_weights(z, net))


def stats_pool(z: Tensor) -> Tensor:
    _check_frames(z)
    mu = tn.mean(z, axis=-1)
    return tn.concat([mu, _std(tn.mean(z * z, axis=-1), mu)], axis=-1)


def pool_variant(z: Tensor, kind: str, net: AttentionNet | None = None) -> Tensor:
    _check_frames(z)
    if kind == "max":
        return tn.tmax(z, axis=-1)
    if kind == "avg":
        return tn.mean(z, axis=-1)
    if kind == "sp":
        return stats_pool(z)
    if kind == "asp":
        if net is None:
            raise UsageError("asp pooling needs an attention net")
        return asp(z, net)
    raise UsageError(f"unknown pooling kind {kind!r}; choose from {', '.join(POOLING_KINDS)}")


class Pooling(Module):
    def __init__(self, kind: str, dim: int, attention_hidden: int = 128, rng: np.random.Generator | None = None):
        if kind not in POOLING_KINDS:
            raise UsageError(f"unknown pooling kind {kind!r}; choose from {', '.join(POOLING_KINDS)}")
        self.kind, self.dim = kind, dim
        self.net = AttentionNet(dim, attention_hidden, rng) if kind == "asp" else None

    @property
    def out_dim(self) -> int:
        return self.dim if self.kind in ("max", "avg") else 2 * self.dim

    def __call__(self, z: Tensor) -> Tensor:
        return pool_variant(z, self.kind, self.net)

    @staticmethod
    def count(kind: str, dim: int, attention_hidden: int) -> int:
        return AttentionNet.count(dim, attention_hidden) if kind == "asp" else 0
