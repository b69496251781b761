"""Log-Mel front-end: framing, radix-2 FFT, mel filterbank, log compression,
plus 16-bit PCM WAV reading and writing."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError

LOG_EPS = 1e-6


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None  # None -> Nyquist

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    def num_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.win_length) // self.hop_length


@dataclass
class SpectrogramFeatures:
    values: np.ndarray  # (n_mels, n_frames)

    @property
    def num_mels(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise UsageError(f"hz_to_mel: negative frequency {f.min()}")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(out) if out.ndim == 0 else out


def rfft(frames: np.ndarray) -> np.ndarray:
    """Iterative radix-2 FFT over the last axis, returning bins 0..n/2.

    The last axis must be a power of two. Works row-wise on any leading shape.
    """
    n = frames.shape[-1]
    if n < 1 or n & (n - 1):
        raise UsageError(f"rfft: length {n} is not a power of two")
    x = frames.astype(np.complex128)[..., _bit_reversal(n)]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        x = x.reshape(x.shape[:-1] + (n // size, size))
        even = x[..., :half]
        odd = x[..., half:] * tw
        x = np.concatenate([even + odd, even - odd], axis=-1).reshape(x.shape[:-2] + (n,))
        size *= 2
    return x[..., : n // 2 + 1]


@lru_cache(maxsize=16)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular filters, shape (n_mels, n_fft // 2 + 1).

    Filter edges are equally spaced on the mel scale; each triangle is scaled
    by 2 / (upper_hz - lower_hz) so every filter has the same area.
    """
    f_max = sample_rate / 2.0 if f_max is None else f_max
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb *= 2.0 / (upper - lower)
    fb.flags.writeable = False
    return fb


def log_mel(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> SpectrogramFeatures:
    if w.sample_rate != cfg.sample_rate:
        raise DataError(f"sample rate {w.sample_rate} Hz, expected {cfg.sample_rate} Hz")
    x = np.asarray(w.samples, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("waveform contains NaN or infinite samples")
    win, hop = cfg.win_length, cfg.hop_length
    if len(x) < win:
        raise DataError(f"waveform has {len(x)} samples, need at least {win} for one frame")
    n_frames = cfg.num_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    padded = np.zeros((n_frames, cfg.n_fft))
    padded[:, :win] = frames * hann(win)
    spec = rfft(padded)
    power = spec.real**2 + spec.imag**2
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.f_min, cfg.f_max)
    return SpectrogramFeatures(np.log(fb @ power.T + LOG_EPS))


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM RIFF file into floats in [-1, 1)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a PCM WAV file ({exc})") from None
    if channels != 1 or width != 2:
        raise DataError(f"{path}: need mono 16-bit PCM, got {channels} channel(s) x {8 * width} bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())
