"""Additive-noise and reverberation augmentation, and the pair-level augmentation policy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .dsp import SAMPLE_RATE, Waveform
from .errors import ConfigError, DegenerateSignalError
from .seeding import rng_for

MODES = ("none", "one_segment", "both_segments")
KINDS = ("noise_only", "noise_or_rir")
NOISE_KINDS = ("white", "babble_proxy", "music_proxy")
SIDES = ("key", "query")
RT60_LIMITS = (0.05, 2.0)
DECAY_60DB = np.log(1000.0)  # 6.9078: amplitude ratio of 60 dB
BABBLE_TALKERS = 6


@dataclass(frozen=True)
class AugmentPolicy:
    mode: str = "none"
    kind: str = "noise_or_rir"
    noise_prob: float = 0.75
    snr_range_db: tuple = (5.0, 20.0)
    rt60_range_s: tuple = (0.2, 0.8)
    # member of the positive pair augmented in one_segment mode
    side: str = "key"

    def __post_init__(self):
        object.__setattr__(self, "snr_range_db", tuple(float(x) for x in self.snr_range_db))
        object.__setattr__(self, "rt60_range_s", tuple(float(x) for x in self.rt60_range_s))
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"augment mode must be one of {MODES}, got {self.mode!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"augment kind must be one of {KINDS}, got {self.kind!r}")
        if self.side not in SIDES:
            raise ConfigError(f"augment side must be one of {SIDES}, got {self.side!r}")
        if not 0 <= self.noise_prob <= 1:
            raise ConfigError(f"noise_prob must lie in [0, 1], got {self.noise_prob}")
        for name, rng in (("snr_range_db", self.snr_range_db), ("rt60_range_s", self.rt60_range_s)):
            if len(rng) != 2 or rng[0] > rng[1]:
                raise ConfigError(f"{name} must be [lo, hi] with lo <= hi, got {rng}")
        lo, hi = self.rt60_range_s
        if lo < RT60_LIMITS[0] or hi > RT60_LIMITS[1]:
            raise ConfigError(f"rt60_range_s must lie within {RT60_LIMITS}, got {self.rt60_range_s}")


@dataclass(frozen=True)
class NoiseChoice:
    kind: str
    snr_db: float


@dataclass(frozen=True)
class RirChoice:
    rt60: float


@dataclass
class AugmentDecision:
    apply_to: tuple = ()  # segment indices: 0 = query segment, 1 = key segment
    choices: dict = field(default_factory=dict)


def rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def mix_noise(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    n = len(clean)
    if len(noise) < n:
        raise ConfigError(f"noise has {len(noise)} samples, clean signal needs {n}")
    noise_part = noise.samples[:n]
    rc, rn = rms(clean.samples), rms(noise_part)
    if rc == 0 or rn == 0:
        raise DegenerateSignalError("SNR is undefined for a silent clean or noise signal")
    gain = rc / (rn * 10.0 ** (snr_db / 20.0))
    return Waveform(clean.samples + gain * noise_part, clean.sample_rate)


def _music(duration, rng, fs):
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    root = rng.uniform(110.0, 330.0)
    out = np.zeros(n)
    for ratio in (1.0, 1.25, 1.5, 2.0):
        f = root * ratio
        lfo = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 2 * np.pi))
        for h in range(1, 6):
            if h * f < fs / 2:
                out += lfo * np.sin(2 * np.pi * h * f * t + rng.uniform(0, 2 * np.pi)) / h
    return out


def gen_noise(kind: str, duration: float, rng: np.random.Generator,
              sample_rate: int = SAMPLE_RATE) -> Waveform:
    if not duration > 0:
        raise ConfigError(f"noise duration must be positive, got {duration}")
    n = int(round(duration * sample_rate))
    if kind == "white":
        x = rng.uniform(-1.0, 1.0, size=n)
    elif kind == "babble_proxy":
        from .synthdata import MIN_DURATION, CorpusStyle, gen_speaker, synth_utterance

        talker = CorpusStyle(channel_db=0.0, noise_snr_db=None)

        dur = max(duration, MIN_DURATION)
        x = np.zeros(int(round(dur * sample_rate)))
        for i in range(BABBLE_TALKERS):
            spec = gen_speaker(rng, f"babble{i}")
            x += synth_utterance(spec, dur, rng, sample_rate, talker).samples
        x = x[:n]
    elif kind == "music_proxy":
        x = _music(duration, rng, sample_rate)
    else:
        raise ConfigError(f"noise kind must be one of {NOISE_KINDS}, got {kind!r}")
    peak = np.max(np.abs(x))
    return Waveform(x / peak if peak > 0 else x, sample_rate)


def gen_rir(rt60: float, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Exponentially decaying noise tail, unit first tap, unit total energy."""
    if not RT60_LIMITS[0] <= rt60 <= RT60_LIMITS[1]:
        raise ConfigError(f"rt60 must lie in {RT60_LIMITS} s, got {rt60}")
    h = rir_envelope(rt60, sample_rate) * rng.standard_normal(int(round(rt60 * sample_rate)))
    h[0] = 1.0
    return Waveform(h / np.sqrt(np.sum(h * h)), sample_rate)


def rir_envelope(rt60: float, sample_rate: int = SAMPLE_RATE, n=None) -> np.ndarray:
    n = int(round(rt60 * sample_rate)) if n is None else n
    return np.exp(-DECAY_60DB * np.arange(n) / (rt60 * sample_rate))


def apply_rir(wave: Waveform, rir: Waveform) -> Waveform:
    if wave.sample_rate != rir.sample_rate:
        raise ConfigError(f"sample rate mismatch: wave {wave.sample_rate} Hz, rir {rir.sample_rate} Hz")
    if len(wave) == 0 or len(rir) == 0:
        raise ConfigError("apply_rir needs non-empty signals")
    y = fftconvolve(wave.samples, rir.samples)[:len(wave)]
    in_peak, out_peak = np.max(np.abs(wave.samples)), np.max(np.abs(y))
    if out_peak > 0:
        y = y * (in_peak / out_peak)
    return Waveform(y, wave.sample_rate)


def sample_decision(policy: AugmentPolicy, rng: np.random.Generator) -> AugmentDecision:
    if policy.mode == "none":
        return AugmentDecision()
    if policy.mode == "one_segment":
        apply_to = (1,) if policy.side == "key" else (0,)
    else:
        apply_to = (0, 1)
    choices = {}
    for idx in apply_to:
        use_noise = policy.kind == "noise_only" or rng.random() < policy.noise_prob
        if use_noise:
            kind = NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
            choices[idx] = NoiseChoice(kind, float(rng.uniform(*policy.snr_range_db)))
        else:
            choices[idx] = RirChoice(float(rng.uniform(*policy.rt60_range_s)))
    return AugmentDecision(apply_to, choices)


class NoiseBank:
    """Fixed pool of pre-generated noise clips per kind, standing in for a noise corpus."""

    def __init__(self, seed: int, clips_per_kind: int = 6, clip_seconds: float = 6.0,
                 sample_rate: int = SAMPLE_RATE):
        self.sample_rate = sample_rate
        self.clips = {
            kind: [gen_noise(kind, clip_seconds, rng_for(seed, "noisebank", kind, i), sample_rate)
                   for i in range(clips_per_kind)]
            for kind in NOISE_KINDS
        }

    def draw(self, kind: str, n_samples: int, rng: np.random.Generator) -> Waveform:
        clip = self.clips[kind][int(rng.integers(len(self.clips[kind])))]
        if len(clip) < n_samples:
            reps = -(-n_samples // len(clip))
            clip = Waveform(np.tile(clip.samples, reps), clip.sample_rate)
        start = int(rng.integers(len(clip) - n_samples + 1))
        return Waveform(clip.samples[start:start + n_samples], clip.sample_rate)


def augment_segment(wave: Waveform, choice, rng: np.random.Generator, bank: NoiseBank) -> Waveform:
    if isinstance(choice, NoiseChoice):
        noise = bank.draw(choice.kind, len(wave), rng)
        if rms(wave.samples) == 0:
            return wave
        return mix_noise(wave, noise, choice.snr_db)
    if isinstance(choice, RirChoice):
        return apply_rir(wave, gen_rir(choice.rt60, rng, wave.sample_rate))
    raise ConfigError(f"unknown augmentation choice {choice!r}")


def augment_pair(seg_q: Waveform, seg_k: Waveform, decision: AugmentDecision,
                 rng: np.random.Generator, bank: NoiseBank):
    segs = [seg_q, seg_k]
    for idx in decision.apply_to:
        segs[idx] = augment_segment(segs[idx], decision.choices[idx], rng, bank)
    return segs[0], segs[1]
