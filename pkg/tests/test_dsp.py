import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mocovox.dsp import (
    FeatureConfig,
    Waveform,
    chop_segment,
    hz_to_mel,
    log_mel,
    log_mel_batch,
    mel_breakpoints,
    mel_energies,
    mel_filterbank,
    mel_to_hz,
    power_frames,
    read_wav,
    write_wav,
)
from mocovox.errors import BoundsError, ConfigError, DataError

CFG = FeatureConfig()


def tone(freq, seconds=1.8, fs=16000, amp=0.5):
    t = np.arange(int(round(seconds * fs))) / fs
    return Waveform(amp * np.sin(2 * np.pi * freq * t), fs)


def test_defaults():
    assert (CFG.n_mels, CFG.win_samples, CFG.hop_samples, CFG.fft_size) == (40, 400, 160, 512)


class TestChop:
    def test_length(self):
        utt = Waveform(np.zeros(48000))
        seg = chop_segment(utt, 0, 1.8)
        assert len(seg) == 28800
        assert seg.sample_rate == 16000

    def test_full_length_identity(self, rng):
        utt = Waveform(rng.uniform(-1, 1, 32000))
        np.testing.assert_array_equal(chop_segment(utt, 0, 2.0).samples, utt.samples)

    def test_out_of_range(self):
        with pytest.raises(BoundsError, match="32000"):
            chop_segment(Waveform(np.zeros(32000)), 16000, 1.8)


class TestFilterbank:
    def test_rows_nonnegative_and_positive(self):
        fb = mel_filterbank(CFG)
        assert fb.shape == (40, 257)
        assert np.all(fb >= 0)
        assert np.all(fb.sum(axis=1) > 0)

    def test_single_filter_peaks_at_mel_midpoint(self):
        cfg = FeatureConfig(n_mels=1)
        fb = mel_filterbank(cfg)[0]
        mid_hz = mel_to_hz((hz_to_mel(cfg.fmin) + hz_to_mel(cfg.fmax)) / 2)
        freqs = np.arange(257) * 16000 / 512
        assert abs(freqs[np.argmax(fb)] - mid_hz) <= 16000 / 512

    def test_centres_increase(self):
        centres = mel_breakpoints(CFG)[1:-1]
        assert np.all(np.diff(centres) > 0)
        peaks = np.argmax(mel_filterbank(CFG), axis=1)
        assert np.all(np.diff(peaks) >= 0)

    def test_mel_roundtrip(self):
        f = np.linspace(0, 8000, 101)
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)

    def test_degenerate_config(self):
        with pytest.raises(ConfigError):
            FeatureConfig(fmin=4000, fmax=3000)
        with pytest.raises(ConfigError):
            FeatureConfig(fmax=9000)


class TestLogMel:
    def test_frame_count(self):
        out = log_mel(Waveform(np.zeros(28800)), CFG)
        assert out.values.shape == (178, 40)
        assert out.config_hash == CFG.config_hash

    def test_zero_signal_hits_floor(self):
        out = log_mel(Waveform(np.zeros(28800)), CFG).values
        assert np.all(out == np.log(1e-10))

    def test_short_segment(self):
        with pytest.raises(DataError):
            log_mel(Waveform(np.zeros(399)), CFG)

    def test_deterministic(self, rng):
        x = Waveform(rng.uniform(-1, 1, 28800))
        a, b = log_mel(x, CFG).values, log_mel(x, CFG).values
        assert a.tobytes() == b.tobytes()

    def test_lower_bound(self, rng):
        x = Waveform(rng.uniform(-1, 1, 8000) * np.repeat([0.0, 1e-9, 1.0, 0.0], 2000))
        assert np.all(log_mel(x, CFG).values >= np.log(CFG.log_floor))

    def test_tone_against_direct_dft(self):
        x = tone(1000.0).samples
        W, H, n_fft = CFG.win_samples, CFG.hop_samples, CFG.fft_size
        T = (len(x) - W) // H + 1
        # O(N^2) DFT matrix, independent of the FFT path
        k = np.arange(n_fft // 2 + 1)[:, None]
        n = np.arange(W)[None, :]
        dft = np.exp(-2j * np.pi * k * n / n_fft)
        win = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(W) / (W - 1))
        frames = np.stack([x[t * H:t * H + W] * win for t in range(T)])
        power = np.abs(frames @ dft.T) ** 2
        oracle = np.log(np.maximum(power @ mel_filterbank(CFG).T, 1e-10))
        got = log_mel(tone(1000.0), CFG).values
        np.testing.assert_allclose(got, oracle, rtol=0, atol=1e-9)

        pts = mel_breakpoints(CFG)
        passband = [i for i in range(40) if pts[i] < 1000.0 < pts[i + 2]]
        expected_bin = max(passband, key=lambda i: mel_filterbank(CFG)[i, 32])  # bin 32 = 1 kHz
        assert np.all(np.argmax(got, axis=1) == expected_bin)

    def test_energy_scales_quadratically(self, rng):
        x = rng.uniform(-1, 1, 16000)
        alpha = 3.7
        e1 = mel_energies(x, CFG)
        e2 = mel_energies(alpha * x, CFG)
        np.testing.assert_allclose(e2, alpha ** 2 * e1, rtol=1e-10)

    def test_batch_matches_single(self, rng):
        xs = rng.uniform(-1, 1, (3, 28800))
        batch = log_mel_batch(xs, CFG)
        for i in range(3):
            np.testing.assert_allclose(batch[i], log_mel(Waveform(xs[i]), CFG).values, atol=1e-12)

    def test_normalize_toggle(self, rng):
        cfg = FeatureConfig(normalize=True)
        out = log_mel(Waveform(rng.uniform(-1, 1, 28800)), cfg).values
        np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(W=st.integers(1, 512), H=st.integers(1, 400), extra=st.integers(0, 3000))
def test_frame_count_formula(W, H, extra):
    cfg = FeatureConfig(win_len=W / 16000, hop_len=H / 16000)
    N = W + extra
    frames = power_frames(np.zeros(N), cfg)
    assert frames.shape[0] == (N - W) // H + 1 == cfg.n_frames(N)


def test_waveform_rejects_nan():
    with pytest.raises(DataError):
        Waveform(np.array([0.0, np.nan]))


def test_wav_roundtrip(tmp_path, rng):
    x = Waveform(rng.uniform(-0.9, 0.9, 1600))
    write_wav(tmp_path / "a.wav", x)
    y = read_wav(tmp_path / "a.wav")
    assert y.sample_rate == 16000
    np.testing.assert_allclose(y.samples, x.samples, atol=1 / 32767)
