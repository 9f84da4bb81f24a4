import filecmp
from collections import Counter

import numpy as np
import pytest

from mocovox import synthdata as sd
from mocovox.dsp import read_wav
from mocovox.errors import ConfigError, FormatError


def test_speaker_ranges(rng):
    for i in range(50):
        s = sd.gen_speaker(rng, f"s{i}")
        assert sd.F0_RANGE[0] <= s.f0 <= sd.F0_RANGE[1]
        assert list(s.resonances) == sorted(s.resonances)
        for c, (lo, hi) in zip(s.resonances, sd.RESONANCE_RANGES):
            assert lo <= c <= hi
        assert all(sd.BANDWIDTH_RANGE[0] <= b <= sd.BANDWIDTH_RANGE[1] for b in s.bandwidths)


def test_utterance_basic(rng):
    spec = sd.gen_speaker(rng)
    w = sd.synth_utterance(spec, 4.0, rng)
    assert len(w) == 64000
    assert abs(np.max(np.abs(w.samples)) - sd.PEAK) < 1e-12


def test_clean_utterance_pitch(rng):
    spec = sd.gen_speaker(rng)
    x = sd.synth_utterance(spec, 4.0, rng, style=sd.CLEAN).samples
    # fundamental shows up as the dominant autocorrelation lag in the pitch range
    ac = np.correlate(x[:8000], x[:8000], "full")[7999:]
    lo, hi = int(16000 / sd.F0_RANGE[1] / (1 + sd.F0_JITTER)), int(16000 / sd.F0_RANGE[0] * 1.1)
    lag = lo + int(np.argmax(ac[lo:hi]))
    f0 = 16000 / lag
    # allow an octave error on the autocorrelation peak
    assert any(abs(f0 * r - spec.f0) / spec.f0 < 0.06 for r in (0.5, 1.0, 2.0))


def test_duration_guard(rng):
    with pytest.raises(ConfigError):
        sd.synth_utterance(sd.gen_speaker(rng), 3.0, rng)


def test_corpus_layout(small_corpus):
    m = small_corpus
    assert len(m) == 40
    assert Counter(r.speaker_id for r in m) == {sd.speaker_id_of(i): 4 for i in range(10)}
    test_spk = m.split("test").speakers()
    assert len(test_spk) == 2
    assert not set(test_spk) & set(m.split("dev").speakers())
    for r in m:
        assert m.path_of(r.utterance_id).exists()
        assert r.duration == 4.0


def test_corpus_deterministic(tmp_path):
    a = sd.build_corpus(3, 2, tmp_path / "a", 5)
    b = sd.build_corpus(3, 2, tmp_path / "b", 5)
    for r in a:
        assert filecmp.cmp(a.path_of(r.utterance_id), b.path_of(r.utterance_id), shallow=False)
    assert (tmp_path / "a/manifest.tsv").read_bytes() == (tmp_path / "b/manifest.tsv").read_bytes()
    c = sd.build_corpus(3, 2, tmp_path / "c", 6)
    assert not np.array_equal(read_wav(c.path_of("spk000-u000")).samples,
                              read_wav(a.path_of("spk000-u000")).samples)


def test_corpus_guards(tmp_path):
    with pytest.raises(ConfigError):
        sd.build_corpus(1, 5, tmp_path, 0)
    with pytest.raises(ConfigError):
        sd.build_corpus(3, 1, tmp_path, 0)


def test_manifest_roundtrip(small_corpus):
    back = sd.Manifest.read(small_corpus.root)
    assert back.records == small_corpus.records


def test_manifest_bad_row(tmp_path):
    (tmp_path / "manifest.tsv").write_text("a\tb\n")
    with pytest.raises(FormatError):
        sd.Manifest.read(tmp_path)


def test_trials_balanced(small_corpus):
    test = small_corpus.split("test")
    trials = sd.build_trials(test, 40, 3)
    assert len(trials) == 40
    assert sum(t.label for t in trials) == 20
    for t in trials:
        same = test[t.utterance_a].speaker_id == test[t.utterance_b].speaker_id
        assert same == bool(t.label)
        assert t.utterance_a != t.utterance_b


def test_trials_deterministic_and_roundtrip(small_corpus, tmp_path):
    test = small_corpus.split("test")
    a, b = sd.build_trials(test, 30, 9), sd.build_trials(test, 30, 9)
    assert a == b
    sd.write_trials(tmp_path / "t.tsv", a)
    assert sd.read_trials(tmp_path / "t.tsv") == a


def test_trials_need_two_speakers(small_corpus):
    one = sd.Manifest([r for r in small_corpus if r.speaker_id == "spk000"])
    with pytest.raises(ConfigError):
        sd.build_trials(one, 10, 0)


def test_trials_bad_label(tmp_path):
    (tmp_path / "t.tsv").write_text("2\ta\tb\n")
    with pytest.raises(FormatError):
        sd.read_trials(tmp_path / "t.tsv")


def test_speaker_determinism_and_spread():
    a = sd.gen_speaker(np.random.default_rng(3), "x")
    assert a == sd.gen_speaker(np.random.default_rng(3), "x")
    specs = {(s.f0, s.resonances, s.bandwidths, s.gain_decay)
             for s in (sd.gen_speaker(np.random.default_rng(i), "x") for i in range(1000))}
    assert len(specs) == 1000


def test_spectral_peak_on_harmonic():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        spec = sd.gen_speaker(rng)
        x = sd.synth_utterance(spec, 4.0, rng).samples
        mag = np.abs(np.fft.rfft(x))
        freqs = np.fft.rfftfreq(len(x), 1 / 16000)
        fp = freqs[np.argmax(mag)]
        h = max(1, round(fp / spec.f0))
        assert abs(fp - h * spec.f0) <= sd.F0_JITTER * h * spec.f0 + freqs[1]


def test_same_speaker_closer_in_logmel(corpus):
    """Time-averaged log-mel: same-speaker pairs beat a third speaker in >= 90% of triples."""
    from mocovox.dsp import FeatureConfig, log_mel
    by_spk = {}
    for r in corpus:
        by_spk.setdefault(r.speaker_id, []).append(r.utterance_id)
    rng = np.random.default_rng(0)
    spks = sorted(by_spk)
    cache = {}

    def mean_feat(uid):
        if uid not in cache:
            cache[uid] = log_mel(read_wav(corpus.path_of(uid)), FeatureConfig()).values.mean(axis=0)
        return cache[uid]

    wins = 0
    for _ in range(200):
        s1, s2 = rng.choice(len(spks), 2, replace=False)
        a, b = rng.choice(by_spk[spks[s1]], 2, replace=False)
        c = rng.choice(by_spk[spks[s2]])
        wins += np.linalg.norm(mean_feat(a) - mean_feat(b)) < np.linalg.norm(mean_feat(a) - mean_feat(c))
    assert wins >= 180


def test_full_corpus_counts(corpus):
    assert len(corpus) == 640
    assert len(list(corpus.root.glob("wav/*/*.wav"))) == 640
    assert len(sd.Manifest.read(corpus.root)) == 640


def test_trials_200(small_corpus):
    trials = sd.build_trials(small_corpus.split("test"), 200, 1)
    assert sum(t.label for t in trials) == 100 and len(trials) == 200
