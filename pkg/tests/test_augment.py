import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mocovox import augment as A
from mocovox.dsp import Waveform
from mocovox.errors import ConfigError, DegenerateSignalError


def sine(n=16000, f=220.0, amp=0.5):
    return Waveform(amp * np.sin(2 * np.pi * f * np.arange(n) / 16000))


@settings(max_examples=50, deadline=None)
@given(snr=st.floats(-10, 40), seed=st.integers(0, 2**31))
def test_mix_noise_hits_snr(snr, seed):
    rng = np.random.default_rng(seed)
    clean = Waveform(rng.uniform(-1, 1, 4000))
    noise = Waveform(rng.standard_normal(5000) * rng.uniform(0.01, 3))
    out = A.mix_noise(clean, noise, snr)
    added = out.samples - clean.samples
    achieved = 20 * np.log10(A.rms(clean.samples) / A.rms(added))
    assert abs(achieved - snr) <= 1e-9 * max(1.0, abs(snr))


def test_mix_noise_errors():
    with pytest.raises(DegenerateSignalError):
        A.mix_noise(Waveform(np.zeros(10)), Waveform(np.ones(10)), 10)
    with pytest.raises(DegenerateSignalError):
        A.mix_noise(Waveform(np.ones(10)), Waveform(np.zeros(10)), 10)
    with pytest.raises(ConfigError):
        A.mix_noise(Waveform(np.ones(10)), Waveform(np.ones(5)), 10)


def test_identity_rir():
    x = sine()
    y = A.apply_rir(x, Waveform(np.array([1.0])))
    np.testing.assert_allclose(y.samples, x.samples, atol=1e-12)
    assert len(y) == len(x)


def test_rir_properties(rng):
    h = A.gen_rir(0.4, rng)
    assert len(h) == int(0.4 * 16000)
    assert abs(np.sum(h.samples ** 2) - 1) < 1e-12
    assert h.samples[0] == np.max(np.abs(h.samples[:1]))
    # energy in 50 ms slices follows the exponential envelope: -60 dB over rt60
    env = A.rir_envelope(0.4)
    assert abs(20 * np.log10(env[-1] / env[0]) + 60) < 0.1


def test_rir_reverb_preserves_length_and_peak(rng):
    x = sine()
    y = A.apply_rir(x, A.gen_rir(0.6, rng))
    assert len(y) == len(x)
    assert abs(np.max(np.abs(y.samples)) - np.max(np.abs(x.samples))) < 1e-12


def test_rt60_bounds(rng):
    with pytest.raises(ConfigError):
        A.gen_rir(0.01, rng)
    with pytest.raises(ConfigError):
        A.AugmentPolicy(rt60_range_s=(0.1, 3.0))


@pytest.mark.parametrize("kind", A.NOISE_KINDS)
def test_gen_noise(kind, rng):
    n = A.gen_noise(kind, 0.5, rng)
    assert len(n) == 8000
    assert abs(np.max(np.abs(n.samples)) - 1.0) < 1e-12


def test_gen_noise_unknown(rng):
    with pytest.raises(ConfigError):
        A.gen_noise("pink", 1.0, rng)


def test_policy_validation():
    with pytest.raises(ConfigError):
        A.AugmentPolicy(mode="all")
    with pytest.raises(ConfigError):
        A.AugmentPolicy(noise_prob=1.5)
    with pytest.raises(ConfigError):
        A.AugmentPolicy(snr_range_db=(20, 5))


def test_decisions_by_mode(rng):
    assert A.sample_decision(A.AugmentPolicy(), rng).apply_to == ()
    one = A.sample_decision(A.AugmentPolicy(mode="one_segment"), rng)
    assert one.apply_to == (1,)
    q = A.sample_decision(A.AugmentPolicy(mode="one_segment", side="query"), rng)
    assert q.apply_to == (0,)
    both = A.sample_decision(A.AugmentPolicy(mode="both_segments"), rng)
    assert both.apply_to == (0, 1) and set(both.choices) == {0, 1}


def test_noise_only_never_reverberates(rng):
    pol = A.AugmentPolicy(mode="both_segments", kind="noise_only")
    for _ in range(200):
        d = A.sample_decision(pol, rng)
        assert all(isinstance(c, A.NoiseChoice) for c in d.choices.values())


def test_decision_ranges(rng):
    pol = A.AugmentPolicy(mode="both_segments")
    for _ in range(500):
        for c in A.sample_decision(pol, rng).choices.values():
            if isinstance(c, A.NoiseChoice):
                assert 5 <= c.snr_db <= 20 and c.kind in A.NOISE_KINDS
            else:
                assert 0.2 <= c.rt60 <= 0.8


def test_augment_pair_touches_only_chosen(rng):
    bank = A.NoiseBank(0, clips_per_kind=1, clip_seconds=0.5)
    q, k = sine(4000), sine(4000, 330.0)
    d = A.sample_decision(A.AugmentPolicy(mode="one_segment"), rng)
    q2, k2 = A.augment_pair(q, k, d, rng, bank)
    assert q2 is q
    assert not np.array_equal(k2.samples, k.samples)


def test_noise_bank_draw_tiles(rng):
    bank = A.NoiseBank(1, clips_per_kind=2, clip_seconds=0.1)
    w = bank.draw("white", 5000, rng)
    assert len(w) == 5000


def test_snr_limits(rng):
    clean = Waveform(rng.uniform(-1, 1, 4000))
    noise = Waveform(rng.standard_normal(4000))
    hi = A.mix_noise(clean, noise, 100.0)
    assert A.rms(hi.samples - clean.samples) <= 1e-4 * A.rms(clean.samples)
    zero = A.mix_noise(clean, noise, 0.0)
    assert abs(A.rms(zero.samples - clean.samples) / A.rms(clean.samples) - 1) < 1e-9


def test_white_noise_stats_and_determinism():
    w = A.gen_noise("white", 1.0, np.random.default_rng(9))
    assert abs(w.samples.mean()) <= 0.02
    for kind in A.NOISE_KINDS:
        a = A.gen_noise(kind, 0.3, np.random.default_rng(4))
        b = A.gen_noise(kind, 0.3, np.random.default_rng(4))
        assert a.samples.tobytes() == b.samples.tobytes()


def _flatness(x):
    p = np.abs(np.fft.rfft(x)) ** 2 + 1e-20
    return np.exp(np.mean(np.log(p))) / np.mean(p)


def test_babble_less_flat_than_white():
    rng = np.random.default_rng(2)
    assert _flatness(A.gen_noise("babble_proxy", 1.0, rng).samples) < _flatness(
        A.gen_noise("white", 1.0, rng).samples)


def test_rir_envelope_and_centroid(rng):
    env = A.rir_envelope(0.5, n=8001)
    assert abs(env[8000] / env[0] - 1e-3) < 1e-12

    def centroid(h):
        e = h.samples ** 2
        return np.sum(np.arange(len(e)) * e) / np.sum(e)

    short = np.mean([centroid(A.gen_rir(0.2, np.random.default_rng(s))) for s in range(5)])
    long = np.mean([centroid(A.gen_rir(0.8, np.random.default_rng(s))) for s in range(5)])
    assert long > short


def test_delayed_impulse_rir(rng):
    x = Waveform(rng.uniform(-1, 1, 500))
    h = np.zeros(8)
    h[5] = 1.0
    y = A.apply_rir(x, Waveform(h)).samples
    shifted = np.concatenate([np.zeros(5), x.samples[:-5]])
    shifted *= np.max(np.abs(x.samples)) / np.max(np.abs(shifted))
    np.testing.assert_allclose(y, shifted, atol=1e-12)


def test_rir_matches_direct_convolution(rng):
    x, h = rng.uniform(-1, 1, 64), rng.standard_normal(8)
    direct = np.array([sum(x[n - m] * h[m] for m in range(8) if 0 <= n - m < 64) for n in range(64)])
    direct *= np.max(np.abs(x)) / np.max(np.abs(direct))
    y = A.apply_rir(Waveform(x), Waveform(h)).samples
    np.testing.assert_allclose(y, direct, rtol=0, atol=1e-12)


def test_mode_none_never_applies(rng):
    pol = A.AugmentPolicy(mode="none")
    assert all(A.sample_decision(pol, rng).apply_to == () for _ in range(1000))
