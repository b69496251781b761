"""Cross-entropy SGD training with weight decay, validation-based model
selection and resumable checkpoints."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .data import Utterance, crop
from .errors import DataError, NumericError, UsageError
from .frontend import FrontendConfig, log_mel
from .metrics import EvalReport
from .model import TarnetModel, load_model, save_model
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_top1", "val_top5", "wall_seconds")


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 5e-4
    momentum: float = 0.0
    epochs: int = 300
    batch_size: int = 100
    crop_seconds: float = 3.0
    eval_batch: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise UsageError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise UsageError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise UsageError(f"epochs must be >= 0, got {self.epochs}")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = tn.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        logits = tn.reshape(logits, (1, -1))
        labels = labels.reshape(1)
    n_cls = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise DataError(f"{labels.shape[0] if labels.ndim else 1} labels for {logits.shape[0]} logit rows")
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise DataError(f"label out of range [0, {n_cls}): {labels[(labels < 0) | (labels >= n_cls)][:3]}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = tn.tsum(tn.log_softmax(logits, axis=-1) * onehot)
    return picked * (-1.0 / len(labels))


def sgd_step(params, cfg: TrainConfig, step: int = 0, velocity: dict[int, np.ndarray] | None = None) -> None:
    """p <- p - lr * (g + wd * p) with optional heavy-ball momentum.

    Parameters whose ``decay`` flag is off (biases, gLN gain/shift) skip the
    decay term. ``velocity`` is keyed by position in ``params``.
    """
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient at step {step}")
        g = p.grad
        if cfg.weight_decay and getattr(p, "decay", True):
            g = g + cfg.weight_decay * p.data
        if cfg.momentum and velocity is not None:
            v = velocity.get(i)
            v = g.copy() if v is None else cfg.momentum * v + g
            velocity[i] = v
            g = v
        p.data = p.data - cfg.lr * g


@dataclass
class TrainState:
    model: TarnetModel
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    best_val_top1: float = -1.0
    velocity: dict[int, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, model: TarnetModel, seed: int) -> TrainState:
        from .seeding import stream

        return cls(model, stream(seed, "crops"))

    def save(self, path, train_cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
        meta = {
            "epoch": self.epoch,
            "step": self.step,
            "best_val_top1": self.best_val_top1,
            "rng_state": self.rng.bit_generator.state,
            "history": self.history,
            **(extra or {}),
        }
        if train_cfg is not None:
            meta["train"] = asdict(train_cfg)
        velocity = {f"opt.{i}": v for i, v in self.velocity.items()}
        save_model(path, self.model, meta, velocity)

    @classmethod
    def load(cls, path) -> tuple[TrainState, dict]:
        model, rest, meta = load_model(path)
        rng = np.random.default_rng()
        if "rng_state" in meta:
            rng.bit_generator.state = meta["rng_state"]
        velocity = {int(k.split(".", 1)[1]): v for k, v in rest.items() if k.startswith("opt.")}
        state = cls(
            model,
            rng,
            epoch=int(meta.get("epoch", 0)),
            step=int(meta.get("step", 0)),
            best_val_top1=float(meta.get("best_val_top1", -1.0)),
            velocity=velocity,
            history=list(meta.get("history", [])),
        )
        return state, meta


def features(w, fcfg: FrontendConfig) -> np.ndarray:
    return log_mel(w, fcfg).values


def evaluate(model: TarnetModel, utts: list[Utterance], fcfg: FrontendConfig, batch: int = 50, cache: dict | None = None) -> EvalReport:
    """Score full-length utterances; equal-length ones are batched together."""
    if not utts:
        raise UsageError("evaluate: no utterances")
    feats = []
    for u in utts:
        key = id(u)
        if cache is not None and key in cache:
            feats.append(cache[key])
            continue
        x = features(u.load(), fcfg)
        if cache is not None:
            cache[key] = x
        feats.append(x)
    scores = np.zeros((len(utts), model.cfg.n_speakers))
    by_len: dict[int, list[int]] = {}
    for i, x in enumerate(feats):
        by_len.setdefault(x.shape[1], []).append(i)
    with tn.no_grad():
        for idx in by_len.values():
            for s in range(0, len(idx), batch):
                chunk = idx[s : s + batch]
                scores[chunk] = model(np.stack([feats[i] for i in chunk])).data
    return EvalReport.from_scores(scores, [u.speaker_id for u in utts])


def train_epoch(state: TrainState, train: list[Utterance], cfg: TrainConfig, fcfg: FrontendConfig) -> float:
    model, rng = state.model, state.rng
    params = model.parameters()
    order = rng.permutation(len(train))
    total, count = 0.0, 0
    for s in range(0, len(order), cfg.batch_size):
        batch = [train[i] for i in order[s : s + cfg.batch_size]]
        x = np.stack([features(crop(u, cfg.crop_seconds, rng), fcfg) for u in batch])
        labels = [u.speaker_id for u in batch]
        model.zero_grad()
        loss = cross_entropy(model(x), labels)
        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite loss at step {state.step}")
        tn.backward(loss)
        sgd_step(params, cfg, state.step, state.velocity)
        state.step += 1
        total += loss.item() * len(batch)
        count += len(batch)
    return total / count


def train_loop(
    model: TarnetModel | TrainState,
    train: list[Utterance],
    val: list[Utterance],
    cfg: TrainConfig,
    fcfg: FrontendConfig = FrontendConfig(),
    out_dir=None,
    save_every: int = 0,
    extra_meta: dict | None = None,
) -> TrainState:
    """Run epochs ``state.epoch + 1 .. cfg.epochs``.

    Pass a :class:`TrainState` (from :meth:`TrainState.load`) to resume.
    With ``out_dir`` set: ``last.ckpt`` every epoch, ``best.ckpt`` on a new
    best validation Top-1, ``epoch_NNN.ckpt`` every ``save_every`` epochs,
    and ``epochs.csv`` appended per epoch.
    """
    if not train or not val:
        raise UsageError("training needs non-empty train and validation splits")
    state = model if isinstance(model, TrainState) else TrainState.fresh(model, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "epochs.csv"
        if state.epoch == 0 or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)
        if state.epoch == 0:
            state.save(out / "initial.ckpt", cfg, extra_meta)
    val_cache: dict = {}
    t0 = time.perf_counter()
    while state.epoch < cfg.epochs:
        loss = train_epoch(state, train, cfg, fcfg)
        state.epoch += 1
        report = evaluate(state.model, val, fcfg, cfg.eval_batch, val_cache)
        row = {
            "epoch": state.epoch,
            "train_loss": loss,
            "val_top1": report.top1,
            "val_top5": report.top5,
            "wall_seconds": time.perf_counter() - t0,
        }
        state.history.append(row)
        logger.info("epoch %d loss %.4f val top1 %.4f", state.epoch, loss, report.top1)
        improved = report.top1 > state.best_val_top1
        if improved:
            state.best_val_top1 = report.top1
        if out is not None:
            with open(out / "epochs.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] for k in LOG_FIELDS])
            state.save(out / "last.ckpt", cfg, extra_meta)
            if improved:
                state.save(out / "best.ckpt", cfg, extra_meta)
            if save_every and state.epoch % save_every == 0:
                state.save(out / f"epoch_{state.epoch:03d}.ckpt", cfg, extra_meta)
    return state
