"""Identification metrics and the paired approximate-randomization test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

REPORT_FIELDS = ("top1", "top5", "precision", "recall", "f1")


def ranked(scores: np.ndarray) -> np.ndarray:
    """Class indices by descending score; ties go to the lower index."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    return np.argsort(-scores, axis=1, kind="stable")


def topk_accuracy(scores, labels, k: int) -> float:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels)
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    if len(labels) != len(scores):
        raise UsageError(f"{len(scores)} score rows for {len(labels)} labels")
    k = min(k, scores.shape[1])
    top = ranked(scores)[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def weighted_prf(true, pred) -> tuple[float, float, float]:
    """Support-weighted precision, recall and F1 over the classes present in ``true``.

    A class never predicted gets precision 0 (and F1 0).
    """
    true, pred = np.asarray(true), np.asarray(pred)
    if len(true) == 0:
        raise UsageError("weighted_prf: empty input")
    if len(true) != len(pred):
        raise UsageError(f"weighted_prf: {len(true)} labels vs {len(pred)} predictions")
    classes, support = np.unique(true, return_counts=True)
    p = r = f = 0.0
    for c, n in zip(classes, support):
        tp = np.sum((pred == c) & (true == c))
        n_pred = np.sum(pred == c)
        prec = tp / n_pred if n_pred else 0.0
        rec = tp / n
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        w = n / len(true)
        p, r, f = p + w * prec, r + w * rec, f + w * f1
    return float(p), float(r), float(f)


@dataclass
class ARResult:
    observed: float
    p_value: float
    n_permutations: int
    seed: int


def approx_randomization(scores_a, scores_b, n_perm: int = 10000, seed: int = 0, chunk: int = 2000) -> ARResult:
    """Two-sided paired test on |mean(a) - mean(b)|.

    Each round swaps every pair with probability 1/2. The p-value is
    (count(stat >= observed) + 1) / (n_perm + 1). Round blocks draw from
    per-chunk generators spawned off ``seed``, so blocks could run anywhere.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"approx_randomization: paired vectors differ in shape {a.shape} vs {b.shape}")
    if len(a) == 0 or n_perm < 1:
        raise UsageError("approx_randomization needs non-empty inputs and n_perm >= 1")
    diff = a - b
    observed = abs(diff.mean())
    hits = 0
    n_chunks = -(-n_perm // chunk)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    for i, ss in enumerate(children):
        m = min(chunk, n_perm - i * chunk)
        signs = np.where(np.random.default_rng(ss).random((m, len(a))) < 0.5, -1.0, 1.0)
        stats = np.abs(signs @ diff) / len(a)
        hits += int(np.sum(stats >= observed - 1e-12))
    return ARResult(float(observed), (hits + 1) / (n_perm + 1), n_perm, seed)


@dataclass
class EvalReport:
    labels: np.ndarray
    scores: np.ndarray
    top1: float = 0.0
    top5: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    @classmethod
    def from_scores(cls, scores, labels) -> EvalReport:
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.int64)
        pred = ranked(scores)[:, 0]
        p, r, f = weighted_prf(labels, pred)
        return cls(
            labels,
            scores,
            topk_accuracy(scores, labels, 1),
            topk_accuracy(scores, labels, 5),
            p,
            r,
            f,
        )

    @property
    def predictions(self) -> np.ndarray:
        return ranked(self.scores)[:, 0]

    def correct(self, k: int = 1) -> np.ndarray:
        k = min(k, self.scores.shape[1])
        return np.any(ranked(self.scores)[:, :k] == self.labels[:, None], axis=1).astype(np.float64)

    def as_row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in REPORT_FIELDS}

    def table(self) -> str:
        lines = [f"{'metric':<10} {'value':>8}"]
        lines += [f"{name:<10} {100 * getattr(self, name):7.2f}%" for name in REPORT_FIELDS]
        lines.append(f"{'n':<10} {len(self.labels):>8}")
        return "\n".join(lines)
