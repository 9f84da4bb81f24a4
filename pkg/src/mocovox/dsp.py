"""Waveform container, WAV I/O and log-mel feature extraction."""

from __future__ import annotations

import hashlib
import wave
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import BoundsError, ConfigError, DataError, DataIOError

SAMPLE_RATE = 16000
SEGMENT_SECONDS = 1.8


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be mono (1-D), got shape {self.samples.shape}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains NaN or Inf samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    win_len: float = 0.025
    hop_len: float = 0.010
    n_mels: int = 40
    fft_size: int = 512
    fmin: float = 20.0
    fmax: float = 7600.0
    log_floor: float = 1e-10
    # per-utterance mean subtraction over time; off by default
    normalize: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.win_samples < 1 or self.hop_samples < 1:
            raise ConfigError("window and hop must each span at least one sample")
        if self.win_samples > self.fft_size:
            raise ConfigError(
                f"window of {self.win_samples} samples exceeds fft_size={self.fft_size}"
            )
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin}, fmax={self.fmax}"
            )
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if not self.log_floor > 0:
            raise ConfigError(f"log_floor must be positive, got {self.log_floor}")

    @property
    def win_samples(self) -> int:
        return int(round(self.win_len * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_len * self.sample_rate))

    @property
    def config_hash(self) -> str:
        text = ";".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha1(text.encode()).hexdigest()[:12]

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.win_samples) // self.hop_samples + 1


@dataclass
class LogMelSegment:
    values: np.ndarray  # (T, n_mels)
    config_hash: str = field(default="")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_breakpoints(cfg: FeatureConfig) -> np.ndarray:
    """Edge/centre frequencies in Hz of the triangular filters (n_mels + 2 points)."""
    mels = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


def chop_segment(utterance: Waveform, start: int, duration: float) -> Waveform:
    n = int(round(duration * utterance.sample_rate))
    start = int(start)
    if start < 0 or n < 1 or start + n > len(utterance):
        raise BoundsError(
            f"segment [{start}, {start + n}) requested but utterance has {len(utterance)} samples"
        )
    return Waveform(utterance.samples[start:start + n], utterance.sample_rate)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular HTK-mel filterbank of shape (n_mels, fft_size // 2 + 1)."""
    cfg.validate()
    return _filterbank(cfg).copy()


@lru_cache(maxsize=16)
def _filterbank(cfg: FeatureConfig) -> np.ndarray:
    pts = mel_breakpoints(cfg)
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lower, center, upper = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"mel filters {empty.tolist()} cover no FFT bin; raise fft_size or lower n_mels"
        )
    fb.setflags(write=False)
    return fb


def power_frames(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Hamming-windowed |DFT|^2 per frame; samples (..., N) -> (..., T, fft_size//2+1)."""
    x = np.asarray(samples, dtype=np.float64)
    W, H = cfg.win_samples, cfg.hop_samples
    if x.shape[-1] < W:
        raise DataError(f"signal of {x.shape[-1]} samples is shorter than one {W}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, W, axis=-1)[..., ::H, :]
    spec = np.fft.rfft(frames * np.hamming(W), n=cfg.fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def mel_energies(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Linear mel energies (before the log), shape (..., T, n_mels)."""
    return power_frames(samples, cfg) @ _filterbank(cfg).T


def log_mel_batch(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Vectorised log_mel over equal-length signals: (B, N) -> (B, T, n_mels)."""
    out = np.log(np.maximum(mel_energies(samples, cfg), cfg.log_floor))
    if cfg.normalize:
        out = out - out.mean(axis=-2, keepdims=True)
    return out


def log_mel(segment: Waveform, cfg: FeatureConfig) -> LogMelSegment:
    if segment.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"segment sample rate {segment.sample_rate} != feature sample rate {cfg.sample_rate}"
        )
    return LogMelSegment(log_mel_batch(segment.samples, cfg), cfg.config_hash)


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1 or f.getsampwidth() != 2:
                raise DataError(f"{path}: expected mono 16-bit PCM")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (OSError, EOFError, wave.Error) as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0, rate)


def write_wav(path, wav: Waveform) -> None:
    pcm = np.clip(np.round(wav.samples * 32767.0), -32768, 32767).astype("<i2")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with wave.open(str(path), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(2)
            f.setframerate(wav.sample_rate)
            f.writeframes(pcm.tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
