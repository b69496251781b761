"""Utterance corpora: synthetic source-filter speakers, WAV-directory
ingestion, stratified splitting, random crops and CSV manifests."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import DataError, UsageError
from .frontend import Waveform, read_wav

SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = ("path", "speaker", "duration", "split")


@dataclass(frozen=True)
class SpeakerProfile:
    f0: float
    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]
    jitter: float

    def __post_init__(self):
        if not 60.0 <= self.f0 <= 400.0:
            raise DataError(f"f0 {self.f0} Hz outside [60, 400]")
        if list(self.formants) != sorted(self.formants):
            raise DataError(f"formants must ascend, got {self.formants}")


@dataclass
class Utterance:
    speaker_id: int
    duration: float
    sample_rate: int = 16000
    path: str | None = None
    samples: np.ndarray | None = field(default=None, repr=False)
    speaker: str = ""
    split: str = ""

    def load(self) -> Waveform:
        if self.samples is None:
            if self.path is None:
                raise DataError("utterance has neither samples nor a path")
            w = read_wav(self.path)
            if w.sample_rate != self.sample_rate:
                raise DataError(f"{self.path}: sample rate {w.sample_rate}, manifest says {self.sample_rate}")
            return w
        return Waveform(np.asarray(self.samples, dtype=np.float64), self.sample_rate)


def random_profile(rng: np.random.Generator) -> SpeakerProfile:
    f1 = rng.uniform(300.0, 900.0)
    f2 = rng.uniform(max(f1 + 300.0, 900.0), 2300.0)
    f3 = rng.uniform(max(f2 + 300.0, 2300.0), 3400.0)
    return SpeakerProfile(
        f0=float(rng.uniform(80.0, 260.0)),
        formants=(float(f1), float(f2), float(f3)),
        bandwidths=tuple(float(b) for b in rng.uniform(60.0, 160.0, size=3)),
        jitter=float(rng.uniform(0.005, 0.02)),
    )


def _resonator(freq: float, bw: float, sr: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bw / sr)
    theta = 2.0 * np.pi * freq / sr
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a  # unit gain at DC


def synthesize(profile: SpeakerProfile, duration: float, sr: int, rng: np.random.Generator, snr_db: float = 30.0) -> np.ndarray:
    """Glottal pulse train through three formant resonators plus white noise.

    Per utterance the pitch and formants wander slightly around the speaker's
    profile, the pitch drifts slowly over the utterance, and every pitch
    period is jittered.
    """
    n = int(round(duration * sr))
    base_f0 = profile.f0 * rng.uniform(0.93, 1.07)
    drift = 1.0 + 0.06 * np.sin(2.0 * np.pi * rng.uniform(0.3, 1.0) * np.arange(n) / sr + rng.uniform(0, 2 * np.pi))
    source = np.zeros(n)
    t = rng.uniform(0.0, sr / base_f0)
    while t < n:
        source[int(t)] = 1.0
        period = sr / (base_f0 * drift[int(t)])
        t += period * (1.0 + profile.jitter * rng.standard_normal())
    # open-quotient smoothing so the source is not a pure click train
    source = lfilter([1.0], [1.0, -0.9], source)
    voiced = source
    for freq, bw in zip(profile.formants, profile.bandwidths):
        freq = min(freq * rng.uniform(0.97, 1.03), 0.45 * sr)
        b, a = _resonator(freq, bw, sr)
        voiced = lfilter(b, a, voiced)
    voiced -= voiced.mean()
    voiced /= np.sqrt(np.mean(voiced**2)) + 1e-12
    noise = rng.standard_normal(n) * 10.0 ** (-snr_db / 20.0)
    signal = voiced + noise
    gain = rng.uniform(0.05, 0.2)
    return gain * signal / np.abs(signal).max()


def synth_corpus(
    n_speakers: int = 10,
    utt_per_spk: int = 50,
    dur: float = 2.0,
    seed: int = 0,
    sample_rate: int = 16000,
    profiles: list[SpeakerProfile] | None = None,
) -> list[Utterance]:
    if n_speakers < 2:
        raise UsageError(f"closed-set identification needs at least 2 speakers, got {n_speakers}")
    if dur <= 0 or utt_per_spk < 1:
        raise UsageError("duration and utterances per speaker must be positive")
    rng = np.random.default_rng(seed)
    if profiles is None:
        profiles = [random_profile(rng) for _ in range(n_speakers)]
    elif len(profiles) != n_speakers:
        raise UsageError(f"got {len(profiles)} profiles for {n_speakers} speakers")
    corpus = []
    for spk, profile in enumerate(profiles):
        for _ in range(utt_per_spk):
            samples = synthesize(profile, dur, sample_rate, rng).astype(np.float32)
            corpus.append(Utterance(spk, dur, sample_rate, samples=samples, speaker=f"spk{spk:03d}"))
    return corpus


def crop(u: Utterance | Waveform, length: float, rng: np.random.Generator) -> Waveform:
    """Random window of ``length`` seconds; wraps around when the source is shorter."""
    w = u.load() if isinstance(u, Utterance) else u
    n = int(round(length * w.sample_rate))
    total = len(w.samples)
    if n <= 0:
        raise UsageError(f"crop length must be positive, got {length}")
    if n <= total:
        start = int(rng.integers(0, total - n + 1))
        return Waveform(w.samples[start : start + n], w.sample_rate)
    start = int(rng.integers(0, total))
    return Waveform(w.samples[(start + np.arange(n)) % total], w.sample_rate)


def split(corpus: list[Utterance], fractions=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[list, list, list]:
    """Per-speaker stratified partition into train/val/test."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise UsageError(f"split fractions must be three nonnegatives summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    by_speaker: dict[int, list[int]] = {}
    for i, u in enumerate(corpus):
        by_speaker.setdefault(u.speaker_id, []).append(i)
    parts: tuple[list, list, list] = ([], [], [])
    for spk in sorted(by_speaker):
        idx = by_speaker[spk]
        if len(idx) < 3:
            raise DataError(f"speaker {spk} has {len(idx)} utterances; need >= 3 to appear in every split")
        order = [idx[j] for j in rng.permutation(len(idx))]
        n_val = max(1, int(round(fractions[1] * len(idx))))
        n_test = max(1, int(round(fractions[2] * len(idx))))
        n_train = len(idx) - n_val - n_test
        if n_train < 1:
            raise DataError(f"speaker {spk} has too few utterances for a training share")
        for part, chosen in zip(parts, (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])):
            part.extend(corpus[j] for j in sorted(chosen))
    for name, part in zip(SPLITS, parts):
        for u in part:
            u.split = name
    return parts


def ingest_directory(root) -> list[Utterance]:
    """root/<speaker>/*.wav; labels follow lexicographic speaker-directory order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    speakers = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(speakers) < 2:
        raise DataError(f"{root}: need at least 2 speaker directories, found {len(speakers)}")
    corpus = []
    for label, name in enumerate(speakers):
        for wav in sorted((root / name).glob("*.wav")):
            w = read_wav(wav)
            corpus.append(Utterance(label, w.duration, w.sample_rate, path=str(wav), speaker=name))
    return corpus


def write_manifest(path, corpus: list[Utterance]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for u in corpus:
            writer.writerow([u.path or "", u.speaker or u.speaker_id, f"{u.duration:.6f}", u.split])


def read_manifest(path, sample_rate: int = 16000) -> list[Utterance]:
    """Load a manifest; speaker labels are indexed in sorted name order."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DataError(f"{path}: expected columns {','.join(MANIFEST_FIELDS)}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: manifest is empty")
    labels = {name: i for i, name in enumerate(sorted({r["speaker"] for r in rows}))}
    base = path.parent
    corpus = []
    for r in rows:
        p = Path(r["path"])
        corpus.append(
            Utterance(
                labels[r["speaker"]],
                float(r["duration"]),
                sample_rate,
                path=str(p if p.is_absolute() else base / p),
                speaker=r["speaker"],
                split=r["split"],
            )
        )
    return corpus


def by_split(corpus: list[Utterance]) -> tuple[list, list, list]:
    return tuple([u for u in corpus if u.split == name] for name in SPLITS)
