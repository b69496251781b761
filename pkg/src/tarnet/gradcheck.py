"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
# Rounding noise of a central difference is about eps*|f|/h ~ 2e-11*|f| at
# h=1e-5; gradients smaller than this floor are judged in absolute terms.
DENOM_FLOOR = 1e-6


def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """(f(x + h) - f(x - h)) / 2h for every entry of ``t``, mutating it in place."""
    flat = t.data.reshape(-1)
    out = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * h)
    return out.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, value: float = 1.0) -> float:
    """max |a - n| scaled by the larger of the two gradient magnitudes.

    Normalising by the tensor-wide magnitude keeps near-zero entries, whose
    finite difference is dominated by rounding, from blowing up the ratio.
    ``value`` is the function value at the check point; the floor scales with
    it so an identically zero gradient is not failed on rounding noise.
    """
    floor = DENOM_FLOOR * max(1.0, abs(value))
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def check_gradients(
    f: Callable[[], Tensor],
    named: Sequence[tuple[str, Tensor]],
    h: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
) -> list[CheckResult]:
    """Compare backward() against finite differences for each named tensor."""
    for _, t in named:
        t.requires_grad = True
        t.grad = None
    loss = f()
    value = loss.item()
    backward(loss)
    results = []
    for name, t in named:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        results.append(CheckResult(name, relative_error(analytic, numeric_grad(f, t, h), value), tol))
    return results


# -- layer suites for the ``gradcheck`` command --------------------------------

TINY = dict(n_mels=8, channels=4, hidden=8, fusion=8, embed_dim=8, frames=12, n_speakers=3)


def _randomize(module, rng: np.random.Generator, scale: float = 0.5) -> None:
    # zero-initialised layers (out_conv, attention conv2) would hide their
    # inputs' gradients, so every parameter gets a random offset
    for _, p in module.named_parameters():
        p.data = p.data + scale * rng.normal(size=p.shape)


def _away_from_kinks(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(a) < margin, np.copysign(margin + 0.05, a), a)


def tiny_model_config():
    from .encoder import EncoderConfig
    from .model import ModelConfig

    enc = EncoderConfig(
        channels=TINY["channels"],
        fusion=TINY["fusion"],
        hidden=TINY["hidden"],
        dilations_s=[1, 2],
        dilations_m=[4],
        dilations_l=[8],
        repeats=1,
    )
    return ModelConfig(
        n_mels=TINY["n_mels"],
        n_speakers=TINY["n_speakers"],
        embed_dim=TINY["embed_dim"],
        attention_hidden=TINY["hidden"],
        encoder=enc,
    )


def _set_break_gln(module, broken: bool) -> None:
    from .blocks import norm_layers

    for layer in norm_layers(module):
        layer.detach_stats = broken


def gradient_suites(seed: int = 0, break_gln: bool = False):
    """Yield ``(suite, check)`` pairs; each check is a zero-argument callable
    returning a list of :class:`CheckResult`.

    Suites: conv1x1, dd_conv, prelu, gln, block, fusion, asp, cross_entropy
    and the full model on the tiny configuration. ``break_gln`` makes every
    gLN treat its statistics as constants in backward, a deliberately wrong
    gradient that the suites must catch.
    """
    from . import tensor as tn
    from .blocks import Conv1x1, DepthwiseDilatedConv, GlobalLayerNorm, PReLU, TCNBlock
    from .encoder import Fusion, StageOutputs
    from .model import TarnetModel
    from .pooling import AttentionNet, asp
    from .train import cross_entropy

    rng = np.random.default_rng(seed)
    C, H, D, T = TINY["channels"], TINY["hidden"], TINY["fusion"], TINY["frames"]

    def layer_suite(layer, in_shape, kinks=False):
        def run():
            _randomize(layer, rng)
            if isinstance(layer, GlobalLayerNorm):
                layer.detach_stats = break_gln
            else:
                _set_break_gln(layer, break_gln)
            x0 = rng.normal(size=in_shape)
            x = Tensor(_away_from_kinks(x0) if kinks else x0)
            with no_grad():
                out_shape = layer(x).shape
            proj = rng.normal(size=out_shape)
            return check_gradients(lambda: tn.tsum(layer(x) * proj), [("input", x)] + list(layer.named_parameters()))

        return run

    yield "conv1x1", layer_suite(Conv1x1(C, H, rng), (2, C, T))
    yield "dd_conv", layer_suite(DepthwiseDilatedConv(H, 3, 2, rng), (2, H, T))
    yield "prelu", layer_suite(PReLU(H), (2, H, T), kinks=True)
    yield "gln", layer_suite(GlobalLayerNorm(H), (2, H, T))
    yield "block", layer_suite(TCNBlock(C, H, 2, 3, rng), (2, C, T))

    def fusion_suite():
        cfg = tiny_model_config().encoder
        fusion = Fusion(cfg, rng)
        _randomize(fusion, rng)
        xs = [Tensor(rng.normal(size=(2, C, T))) for _ in range(3)]
        proj = rng.normal(size=(2, D, T))
        named = [("x_s", xs[0]), ("x_m", xs[1]), ("x_l", xs[2])] + list(fusion.named_parameters())
        return check_gradients(lambda: tn.tsum(fusion(StageOutputs(*xs)) * proj), named)

    yield "fusion", fusion_suite

    def asp_suite():
        net = AttentionNet(D, TINY["hidden"], rng)
        _randomize(net, rng)
        z = Tensor(rng.normal(size=(2, D, T)))
        proj = rng.normal(size=(2, 2 * D))
        return check_gradients(lambda: tn.tsum(asp(z, net) * proj), [("input", z)] + list(net.named_parameters()))

    yield "asp", asp_suite

    def ce_suite():
        logits = Tensor(rng.normal(size=(4, TINY["n_speakers"])))
        labels = rng.integers(0, TINY["n_speakers"], size=4)
        return check_gradients(lambda: cross_entropy(logits, labels), [("logits", logits)])

    yield "cross_entropy", ce_suite

    def model_suite():
        model = TarnetModel(tiny_model_config(), rng)
        _randomize(model, rng, 0.3)
        _set_break_gln(model, break_gln)
        x = Tensor(rng.normal(size=(2, TINY["n_mels"], T)))
        labels = rng.integers(0, TINY["n_speakers"], size=2)
        return check_gradients(lambda: cross_entropy(model(x), labels), list(model.named_parameters()))

    yield "model", model_suite
