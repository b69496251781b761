"""Multi-scale temporal encoder: bottleneck, three cascaded dilation stages,
channel-wise fusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .blocks import Conv1x1, Module, TCNBlock
from .errors import ConfigurationError
from .tensor import Tensor


@dataclass
class EncoderConfig:
    channels: int = 64  # bottleneck width C
    fusion: int = 128  # fused width D
    hidden: int | None = None  # block expansion H, None -> 2 * channels
    kernel_size: int = 3
    dilations_s: list[int] = field(default_factory=lambda: [1, 2])
    dilations_m: list[int] = field(default_factory=lambda: [4, 8])
    dilations_l: list[int] = field(default_factory=lambda: [16, 32])
    repeats: int = 3

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigurationError(f"repeats must be >= 1, got {self.repeats}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        if not any(self.stage_dilations):
            raise ConfigurationError("at least one stage needs a non-empty dilation list")
        for d in sum(self.stage_dilations, []):
            if d < 1:
                raise ConfigurationError(f"dilations must be positive, got {d}")

    @property
    def hidden_width(self) -> int:
        return self.hidden if self.hidden is not None else 2 * self.channels

    @property
    def stage_dilations(self) -> list[list[int]]:
        return [list(self.dilations_s), list(self.dilations_m), list(self.dilations_l)]

    @property
    def active_stages(self) -> int:
        return sum(1 for d in self.stage_dilations if d)

    def with_stages(self, stages: str) -> EncoderConfig:
        """Keep only the named stages (subset of "SML"), emptying the rest."""
        stages = stages.upper()
        if not stages or set(stages) - set("SML"):
            raise ConfigurationError(f"stages must be a non-empty subset of 'SML', got {stages!r}")
        keep = {"S": self.dilations_s, "M": self.dilations_m, "L": self.dilations_l}
        return EncoderConfig(
            channels=self.channels,
            fusion=self.fusion,
            hidden=self.hidden,
            kernel_size=self.kernel_size,
            dilations_s=list(keep["S"]) if "S" in stages else [],
            dilations_m=list(keep["M"]) if "M" in stages else [],
            dilations_l=list(keep["L"]) if "L" in stages else [],
            repeats=self.repeats,
        )


class StageOutputs(NamedTuple):
    x_s: Tensor
    x_m: Tensor
    x_l: Tensor


class Stage(Module):
    """R repetitions of the dilation sequence, each block with its own weights."""

    def __init__(self, channels: int, hidden: int, dilations, repeats: int, kernel_size: int, rng):
        self.dilations = list(dilations)
        self.repeats = repeats
        self.blocks = [
            TCNBlock(channels, hidden, d, kernel_size, rng) for _ in range(repeats) for d in self.dilations
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def run_stage(x: Tensor, stage: Stage) -> Tensor:
    return stage(x)


class MultiScaleEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        C, H, K = cfg.channels, cfg.hidden_width, cfg.kernel_size
        self.stage_s = Stage(C, H, cfg.dilations_s, cfg.repeats, K, rng)
        self.stage_m = Stage(C, H, cfg.dilations_m, cfg.repeats, K, rng)
        self.stage_l = Stage(C, H, cfg.dilations_l, cfg.repeats, K, rng)

    @property
    def stages(self) -> list[Stage]:
        return [self.stage_s, self.stage_m, self.stage_l]

    def __call__(self, x0: Tensor) -> StageOutputs:
        x_s = self.stage_s(x0)
        x_m = self.stage_m(x_s)
        x_l = self.stage_l(x_m)
        return StageOutputs(x_s, x_m, x_l)


def encode(x0: Tensor, encoder: MultiScaleEncoder) -> StageOutputs:
    return encoder(x0)


class Fusion(Module):
    """ReLU(Conv1x1([X_S || X_M || X_L])) over the stages that are present."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.active = [bool(d) for d in cfg.stage_dilations]
        self.proj = Conv1x1(cfg.channels * sum(self.active), cfg.fusion, rng)

    def __call__(self, s: StageOutputs) -> Tensor:
        parts = [x for x, keep in zip(s, self.active) if keep]
        return tn.relu(self.proj(tn.concat(parts, axis=-2)))


def fuse(s: StageOutputs, fusion: Fusion) -> Tensor:
    return fusion(s)


def bottleneck(x: Tensor, proj: Conv1x1) -> Tensor:
    return proj(x)


def receptive_field(cfg: EncoderConfig) -> int:
    """Frames of input visible to one output frame of the last stage."""
    total = sum(sum(d) for d in cfg.stage_dilations)
    return 1 + (cfg.kernel_size - 1) * cfg.repeats * total
