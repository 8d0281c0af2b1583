import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from hft.audio import (LOG_FLOOR, N_FFT, PAD_VALUE, LogMelSpectrogram, Waveform, features,
                       frame_with_margins, log_mel, make_chunks, mel_filterbank, power_spectrogram,
                       resample)


def test_resample_identity():
    x = np.random.default_rng(0).normal(size=1000)
    out = resample(Waveform(x, 16000), 16000)
    np.testing.assert_array_equal(out.samples, x)


def test_resample_preserves_dc():
    out = resample(Waveform(np.full(44100, 0.3), 44100), 16000)
    assert out.sample_rate == 16000
    assert len(out.samples) == 16000
    centre = out.samples[2000:-2000]
    assert np.max(np.abs(centre - 0.3)) < 1e-3


def test_resample_sine_matches_analytic():
    t_in = np.arange(44100) / 44100
    out = resample(Waveform(np.sin(2 * np.pi * 440 * t_in), 44100), 16000)
    t_out = np.arange(len(out.samples)) / 16000
    err = np.abs(out.samples - np.sin(2 * np.pi * 440 * t_out))[2000:-2000]
    assert err.max() < 1e-2


def test_resample_removes_content_above_new_nyquist():
    t_in = np.arange(48000) / 48000
    out = resample(Waveform(np.sin(2 * np.pi * 12000 * t_in), 48000), 16000)
    assert np.abs(out.samples[2000:-2000]).max() < 1e-2


def test_resample_empty_waveform():
    with pytest.raises(ValueError, match="empty waveform"):
        resample(Waveform(np.zeros(0), 44100), 16000)


def test_waveform_downmixes_by_mean():
    w = Waveform(np.array([[1.0, 3.0], [0.0, -2.0]]), 8000)
    np.testing.assert_array_equal(w.samples, [2.0, -1.0])


def test_waveform_rejects_non_finite():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), 16000)


def _htk_mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def _htk_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def test_mel_filterbank_matches_scalar_oracle():
    fb = mel_filterbank(1025, 256, 16000)
    assert fb.shape == (1025, 256)
    lo, hi = _htk_mel(0.0), _htk_mel(8000.0)
    pts = [_htk_hz(lo + (hi - lo) * i / 257) for i in range(258)]
    for m in range(0, 256, 17):
        left, centre, right = pts[m], pts[m + 1], pts[m + 2]
        for k in range(0, 1025, 3):
            f = 8000.0 * k / 1024
            expected = max(0.0, min((f - left) / (centre - left), (right - f) / (right - centre)))
            assert fb[k, m] == pytest.approx(expected, abs=1e-9)


def test_power_spectrogram_matches_torch_stft():
    x = np.random.default_rng(0).normal(size=5000)
    ours = power_spectrogram(x)
    ref = torch.stft(torch.tensor(x), n_fft=2048, hop_length=256, win_length=2048,
                     window=torch.hann_window(2048, periodic=True, dtype=torch.float64),
                     center=True, pad_mode="constant", return_complex=True)
    ref = (ref.abs() ** 2).numpy().T
    assert ours.shape == ref.shape == (5000 // 256 + 1, N_FFT // 2 + 1)
    np.testing.assert_allclose(ours, ref, rtol=1e-9, atol=1e-9)


def test_log_mel_of_silence_hits_floor():
    s = log_mel(Waveform(np.zeros(16000), 16000))
    assert s.data.shape == (63, 256)
    assert (s.data == np.float32(math.log(LOG_FLOOR))).all()


@given(st.integers(1, 3000))
def test_log_mel_frame_count(n):
    s = log_mel(Waveform(np.zeros(n), 16000), n_mels=8)
    assert s.n_frames == n // 256 + 1


def test_log_mel_requires_16k():
    with pytest.raises(ValueError):
        log_mel(Waveform(np.zeros(100), 22050))


def test_log_mel_is_deterministic():
    w = Waveform(np.random.default_rng(1).normal(size=4000), 16000)
    assert log_mel(w).data.tobytes() == log_mel(w).data.tobytes()


@given(st.floats(1.01, 20.0))
def test_log_mel_energy_monotone(g):
    x = np.random.default_rng(2).normal(size=3000) * 0.1
    a = log_mel(Waveform(x, 16000), n_mels=16).data
    b = log_mel(Waveform(g * x, 16000), n_mels=16).data
    assert (b >= a).all()


def test_features_resamples_and_downmixes():
    stereo = np.random.default_rng(0).normal(size=(44100, 2)) * 0.1
    s = features(Waveform(stereo, 44100), n_mels=16)
    assert s.n_frames == 16000 // 256 + 1


def test_frame_with_margins_shape_and_padding():
    s = LogMelSpectrogram(np.random.default_rng(0).normal(size=(100, 256)).astype(np.float32))
    fi = frame_with_margins(s, 32)
    assert fi.data.shape == (100, 256, 65)
    assert (fi.data[0, :, :32] == np.float32(PAD_VALUE)).all()
    assert (fi.data[99, :, 33:] == np.float32(PAD_VALUE)).all()
    np.testing.assert_array_equal(fi.data[40, :, 0], s.data[8])


def test_frame_with_zero_margin():
    s = LogMelSpectrogram(np.arange(12, dtype=np.float32).reshape(4, 3))
    np.testing.assert_array_equal(frame_with_margins(s, 0).data[:, :, 0], s.data)


@given(st.integers(1, 40), st.integers(0, 6))
def test_frame_with_margins_centre_is_frame(t, m):
    s = LogMelSpectrogram(np.random.default_rng(t).normal(size=(t, 5)).astype(np.float32))
    fi = frame_with_margins(s, m)
    np.testing.assert_array_equal(fi.data[:, :, m], s.data)
    for i in range(t):
        for j in range(2 * m + 1):
            src = i - m + j
            expected = s.data[src] if 0 <= src < t else np.full(5, PAD_VALUE, np.float32)
            np.testing.assert_array_equal(fi.data[i, :, j], expected)


def _framed(t, f=3, m=1):
    return frame_with_margins(LogMelSpectrogram(np.arange(t * f, dtype=np.float32).reshape(t, f)), m)


@pytest.mark.parametrize("t,starts,valid", [(256, [0, 128], [128, 128]), (130, [0, 128], [128, 2]),
                                            (1, [0], [1])])
def test_make_chunks_examples(t, starts, valid):
    chunks = make_chunks(_framed(t), 128)
    assert [c.start_frame for c in chunks] == starts
    assert [c.n_valid for c in chunks] == valid
    assert all(c.data.shape[0] == 128 for c in chunks)
    assert (chunks[-1].data[chunks[-1].n_valid:] == 0).all()


@given(st.integers(1, 60), st.integers(1, 16))
def test_make_chunks_cover_input(t, n):
    fi = _framed(t)
    chunks = make_chunks(fi, n)
    joined = np.concatenate([c.data[:c.n_valid] for c in chunks])
    np.testing.assert_array_equal(joined, fi.data)
