import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import lfilter

from mvbss.audio import (
    MultichannelSpectrogram,
    MultichannelWaveform,
    istft,
    read_wav,
    sqrt_hann,
    stft,
    write_wav,
)
from mvbss.errors import InvalidFraming, IoFailure, UnsupportedFormat

FS = 16000


def interior_error(x, y, N=1024):
    a, b = x[:, N:-N], y[:, N:-N]
    return np.linalg.norm(a - b) / np.linalg.norm(a)


def test_zeros():
    S = stft(MultichannelWaveform(np.zeros((2, 4000)), FS))
    assert S.values.shape == (513, 9, 2)
    assert not np.any(S.values)
    assert not np.any(istft(S).samples)


def test_shape_and_metadata():
    S = stft(MultichannelWaveform(np.ones((1, 5000)), FS), 256, 128)
    assert S.shape[0] == 129
    assert S.length == 5000 and S.sample_rate == FS
    assert S.shape[1] == 1 + -(-5000 // 128)


def test_sinusoid_bin_concentration():
    N, k = 1024, 37
    t = np.arange(4 * FS // 4)
    x = np.cos(2 * np.pi * k * t / N)
    S = stft(MultichannelWaveform(x, FS), N, N // 2).values[:, 2:-2, 0]
    p = np.abs(S) ** 2
    frac = p[k - 1 : k + 2].sum(axis=0) / p.sum(axis=0)
    assert frac.min() >= 0.99


def test_impulse_gives_window_dft():
    N, hop = 1024, 512
    x = np.zeros(8 * N)
    j = 5
    x[j * hop] = 1.0  # frame j is centered on sample j * hop
    S = stft(MultichannelWaveform(x, FS), N, hop).values[:, j, 0]
    # direct DFT of the windowed impulse sitting at frame offset N/2
    n = np.arange(N)
    frame = np.where(n == N // 2, 1.0, 0.0) * sqrt_hann(N)
    oracle = np.array([np.sum(frame * np.exp(-2j * np.pi * i * n / N)) for i in range(N // 2 + 1)])
    assert np.allclose(S, oracle, atol=1e-12)


def test_roundtrip_white_noise():
    x = np.random.default_rng(0).standard_normal((2, 2 * FS))
    y = istft(stft(MultichannelWaveform(x, FS))).samples
    assert y.shape == x.shape
    assert interior_error(x, y) < 1e-10


def test_roundtrip_ar2():
    # speech-like resonance: poles at radius 0.98, 500 Hz
    r, f = 0.98, 500.0
    a = [1.0, -2 * r * np.cos(2 * np.pi * f / FS), r * r]
    x = lfilter([1.0], a, np.random.default_rng(1).standard_normal(2 * FS))[None]
    y = istft(stft(MultichannelWaveform(x, FS))).samples
    assert interior_error(x, y) < 1e-10


@given(st.sampled_from([(256, 128), (512, 256), (1024, 512), (512, 128)]), st.integers(0, 2000))
@settings(max_examples=20, deadline=None)
def test_roundtrip_framings(framing, extra):
    N, hop = framing
    x = np.random.default_rng(extra).standard_normal((1, 3 * N + extra))
    y = istft(stft(MultichannelWaveform(x, FS), N, hop)).samples
    assert interior_error(x, y, N) < 1e-10


def test_parseval_per_frame():
    N, hop = 512, 256
    x = np.random.default_rng(2).standard_normal(10 * N)
    S = stft(MultichannelWaveform(x, FS), N, hop).values[:, :, 0]
    j = 6
    frame = x[j * hop - N // 2 : j * hop + N // 2] * sqrt_hann(N)
    fold = np.full(N // 2 + 1, 2.0)
    fold[0] = fold[-1] = 1.0
    spec_energy = np.sum(fold * np.abs(S[:, j]) ** 2) / N
    assert abs(spec_energy - np.sum(frame**2)) < 1e-8 * np.sum(frame**2)


def test_invalid_framing():
    w = MultichannelWaveform(np.zeros(4096), FS)
    with pytest.raises(InvalidFraming):
        stft(w, 1024, 300)
    with pytest.raises(InvalidFraming):
        stft(MultichannelWaveform(np.zeros(100), FS), 1024, 512)


def test_spectrogram_bin_mismatch():
    with pytest.raises(InvalidFraming):
        MultichannelSpectrogram(np.zeros((10, 3, 1)), 1024, 512, FS, 2048)


def test_waveform_rejects_nan():
    with pytest.raises(ValueError):
        MultichannelWaveform(np.array([[0.0, np.nan]]), FS)


def test_wav_float32_bit_identical(tmp_path):
    x = np.random.default_rng(3).uniform(-1, 1, (3, 1000)).astype(np.float32).astype(float)
    write_wav(tmp_path / "a.wav", MultichannelWaveform(x, FS), 32)
    w = read_wav(tmp_path / "a.wav")
    assert w.sample_rate == FS
    assert np.array_equal(w.samples, x)


def test_wav_pcm16_quantization(tmp_path):
    t = np.arange(FS) / FS
    x = np.sin(2 * np.pi * 440 * t) * (32767 / 32768)
    write_wav(tmp_path / "b.wav", MultichannelWaveform(x, FS), 16)
    w = read_wav(tmp_path / "b.wav")
    assert np.max(np.abs(w.samples - x)) <= 1 / 32768


def test_wav_malformed(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"RIFX\x00\x00\x00\x00garbage")
    with pytest.raises(UnsupportedFormat):
        read_wav(p)


def test_wav_missing(tmp_path):
    with pytest.raises(IoFailure):
        read_wav(tmp_path / "missing.wav")


def test_wav_bad_bit_depth(tmp_path):
    with pytest.raises(UnsupportedFormat):
        write_wav(tmp_path / "c.wav", MultichannelWaveform(np.zeros(10), FS), 24)
