"""Synthetic harmonic-resonator speaker corpus, manifests and trial lists."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import SAMPLE_RATE, SEGMENT_SECONDS, Waveform, write_wav
from .errors import ConfigError, DataIOError, FormatError
from .seeding import derive_seed, pool_map, rng_for

F0_RANGE = (90.0, 280.0)
# disjoint bands keep centres strictly increasing
RESONANCE_RANGES = ((300.0, 900.0), (900.0, 2300.0), (2300.0, 3600.0))
BANDWIDTH_RANGE = (60.0, 250.0)
DECAY_RANGE = (0.4, 1.6)
F0_JITTER = 0.03
MIN_DURATION = 2 * SEGMENT_SECONDS
DEFAULT_DURATION = 4.0
PEAK = 0.9

MANIFEST_NAME = "manifest.tsv"
TRIALS_NAME = "trials.tsv"


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: str
    f0: float
    resonances: tuple
    bandwidths: tuple
    gain_decay: float


@dataclass(frozen=True)
class UtteranceRecord:
    speaker_id: str
    utterance_id: str
    path: str
    duration: float
    split: str


@dataclass(frozen=True)
class TrialPair:
    label: int  # 1 same speaker, 0 different
    utterance_a: str
    utterance_b: str


class Manifest:
    """Rows of a corpus manifest plus the directory paths are relative to."""

    def __init__(self, records, root="."):
        self.records = list(records)
        self.root = Path(root)
        self._by_id = {r.utterance_id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, utterance_id) -> UtteranceRecord:
        return self._by_id[utterance_id]

    def split(self, name) -> "Manifest":
        return Manifest([r for r in self.records if r.split == name], self.root)

    def speakers(self):
        return sorted({r.speaker_id for r in self.records})

    def path_of(self, utterance_id) -> Path:
        return self.root / self[utterance_id].path

    def write(self, path) -> None:
        lines = [
            f"{r.speaker_id}\t{r.utterance_id}\t{r.path}\t{r.duration!r}\t{r.split}\n"
            for r in self.records
        ]
        try:
            Path(path).write_text("".join(lines), encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot write manifest {path}: {exc}") from exc

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
        records = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 tab-separated columns")
            records.append(UtteranceRecord(cols[0], cols[1], cols[2], float(cols[3]), cols[4]))
        return cls(records, path.parent)


def gen_speaker(rng: np.random.Generator, speaker_id: str = "spk") -> SpeakerSpec:
    f0 = rng.uniform(*F0_RANGE)
    centres = tuple(float(rng.uniform(lo, hi)) for lo, hi in RESONANCE_RANGES)
    bws = tuple(float(x) for x in rng.uniform(*BANDWIDTH_RANGE, size=3))
    return SpeakerSpec(speaker_id, float(f0), centres, bws, float(rng.uniform(*DECAY_RANGE)))


def _resonate(x, centre, bandwidth, fs):
    r = np.exp(-np.pi * bandwidth / fs)
    theta = 2 * np.pi * centre / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    # unity gain at the resonance peak
    g = np.abs(np.polyval(a[::-1], np.exp(-1j * theta)))
    return lfilter([g], a, x)


@dataclass(frozen=True)
class CorpusStyle:
    """Within-speaker variability knobs; zeros give a clean stationary voice."""

    # per-syllable relative perturbation of each resonance centre ("vowel" content)
    vowel_spread: float = 0.2
    # std (dB) of a smooth random per-utterance channel response
    channel_db: float = 8.0
    # per-utterance background white noise SNR range; None disables it
    noise_snr_db: tuple | None = (20.0, 35.0)
    syllable_s: tuple = (0.15, 0.35)


CLEAN = CorpusStyle(0.0, 0.0, None)


def _channel(x, rng, channel_db):
    spec = np.fft.rfft(x)
    f = np.linspace(0.0, 1.0, spec.shape[0])
    gain_db = sum(rng.normal(0.0, channel_db / np.sqrt(3)) * np.cos(np.pi * k * f) for k in (1, 2, 3))
    return np.fft.irfft(spec * 10.0 ** (gain_db / 20.0), x.shape[0])


def synth_utterance(spec: SpeakerSpec, duration: float, rng: np.random.Generator,
                    sample_rate: int = SAMPLE_RATE, style: CorpusStyle = CorpusStyle()) -> Waveform:
    """Harmonic source through the speaker's resonator cascade, syllable by syllable."""
    if duration < MIN_DURATION:
        raise ConfigError(f"utterance duration {duration} s is below the {MIN_DURATION} s minimum")
    n = int(round(duration * sample_rate))
    f0 = spec.f0 * (1 + rng.uniform(-F0_JITTER, F0_JITTER))
    n_harm = int((0.5 * sample_rate - 1) // f0)
    h = np.arange(1, n_harm + 1)
    amps = h ** -spec.gain_decay
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    t = np.arange(n) / sample_rate
    source = amps @ np.sin(2 * np.pi * f0 * h[:, None] * t[None, :] + phases[:, None])

    x = np.zeros(n)
    centres = np.array(spec.resonances)
    pos = 0
    while pos < n:
        length = max(2, int(rng.uniform(*style.syllable_s) * sample_rate))
        seg = source[pos:pos + length]
        shift = 1 + rng.uniform(-style.vowel_spread, style.vowel_spread, size=3)
        for centre, bw in zip(np.sort(centres * shift), spec.bandwidths):
            seg = _resonate(seg, min(centre, 0.45 * sample_rate), bw, sample_rate)
        env = np.sqrt(np.hanning(seg.shape[0] + 2)[1:-1]) * rng.uniform(0.3, 1.0)
        x[pos:pos + length] = seg * env
        pos += length
    if style.channel_db > 0:
        x = _channel(x, rng, style.channel_db)
    if style.noise_snr_db is not None:
        noise = rng.standard_normal(n)
        snr = rng.uniform(*style.noise_snr_db)
        x = x + noise * np.sqrt(np.mean(x * x) / np.mean(noise * noise)) / 10.0 ** (snr / 20.0)
    return Waveform(PEAK * x / np.max(np.abs(x)), sample_rate)


def speaker_id_of(index: int) -> str:
    return f"spk{index:03d}"


def build_corpus(n_speakers: int, utts_per_speaker: int, out_dir, seed: int,
                 duration: float = DEFAULT_DURATION, test_fraction: float = 0.2,
                 sample_rate: int = SAMPLE_RATE, style: CorpusStyle = CorpusStyle(),
                 threads=None) -> Manifest:
    if n_speakers < 2:
        raise ConfigError(f"need at least 2 speakers, got {n_speakers}")
    if utts_per_speaker < 2:
        raise ConfigError(f"need at least 2 utterances per speaker, got {utts_per_speaker}")
    if duration < MIN_DURATION:
        raise ConfigError(f"utterance duration {duration} s is below the {MIN_DURATION} s minimum")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {out_dir}: {exc}") from exc

    speakers = [gen_speaker(rng_for(seed, "speaker", i), speaker_id_of(i)) for i in range(n_speakers)]
    n_test = min(n_speakers - 1, max(1, int(round(test_fraction * n_speakers))))
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(n_speakers)
    test_ids = {speakers[i].speaker_id for i in order[:n_test]}

    jobs = [(spec, f"{spec.speaker_id}-u{j:03d}") for spec in speakers for j in range(utts_per_speaker)]

    def make(job):
        spec, utt_id = job
        wav = synth_utterance(spec, duration, rng_for(seed, spec.speaker_id, utt_id), sample_rate, style)
        rel = f"wav/{spec.speaker_id}/{utt_id}.wav"
        write_wav(out_dir / rel, wav)
        split = "test" if spec.speaker_id in test_ids else "dev"
        return UtteranceRecord(spec.speaker_id, utt_id, rel, len(wav) / sample_rate, split)

    manifest = Manifest(pool_map(make, jobs, threads), out_dir)
    manifest.write(out_dir / MANIFEST_NAME)
    return manifest


def build_trials(test: Manifest, n_pairs: int, seed: int) -> list:
    """Balanced same/different trials drawn without replacement where possible."""
    by_spk = {}
    for r in test:
        by_spk.setdefault(r.speaker_id, []).append(r.utterance_id)
    same = [p for utts in by_spk.values() for p in itertools.combinations(sorted(utts), 2)]
    spks = sorted(by_spk)
    diff = [(a, b) for s1, s2 in itertools.combinations(spks, 2)
            for a in sorted(by_spk[s1]) for b in sorted(by_spk[s2])]
    if n_pairs < 2 or not same or not diff:
        raise ConfigError(
            f"cannot build {n_pairs} balanced trials from {len(spks)} test speakers "
            f"({len(same)} same-speaker pairs available)"
        )
    rng = np.random.default_rng(derive_seed(seed, "trials"))
    n_same = n_pairs // 2
    n_diff = n_pairs - n_same

    def pick(pool, k):
        idx = rng.choice(len(pool), size=k, replace=k > len(pool))
        return [pool[i] for i in idx]

    trials = [TrialPair(1, a, b) for a, b in pick(same, n_same)]
    trials += [TrialPair(0, a, b) for a, b in pick(diff, n_diff)]
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


def write_trials(path, trials) -> None:
    try:
        Path(path).write_text(
            "".join(f"{t.label}\t{t.utterance_a}\t{t.utterance_b}\n" for t in trials),
            encoding="utf-8",
        )
    except OSError as exc:
        raise DataIOError(f"cannot write trials {path}: {exc}") from exc


def read_trials(path) -> list:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read trials {path}: {exc}") from exc
    trials = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3 or cols[0] not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: expected 'label(1|0)<TAB>utt_a<TAB>utt_b'")
        trials.append(TrialPair(int(cols[0]), cols[1], cols[2]))
    return trials
