"""Waveform to chunked log-mel windows.

16 kHz mono, Hann window of 2048 samples, 2048-point FFT, 256-sample hop
(16 ms), centred frames with zero padding, HTK mel filterbank without area
normalisation, natural log with a 1e-10 floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000
N_FFT = 2048
WIN_LENGTH = 2048
HOP_LENGTH = 256
HOP_SECONDS = HOP_LENGTH / SAMPLE_RATE
N_MELS = 256
LOG_FLOOR = 1e-10
PAD_VALUE = math.log(LOG_FLOOR)

# resampler filter: half-length in zero crossings of the low-pass sinc
RESAMPLE_ZERO_CROSSINGS = 64
RESAMPLE_KAISER_BETA = 8.6


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 2:
            s = downmix(s)
        if s.ndim != 1:
            raise ValueError(f"waveform must be 1-D or (samples, channels), got shape {s.shape}")
        if not np.isfinite(s).all():
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = s
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class LogMelSpectrogram:
    data: np.ndarray  # (T, F)
    hop_seconds: float = HOP_SECONDS

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]


@dataclass
class FramedInput:
    data: np.ndarray  # (T, F, 2M+1)
    margin: int


@dataclass
class Chunk:
    data: np.ndarray  # (N, F, 2M+1)
    start_frame: int
    n_valid: int


def downmix(samples: np.ndarray) -> np.ndarray:
    """Average channels of a (samples, channels) array."""
    samples = np.asarray(samples, dtype=np.float64)
    return samples.mean(axis=1) if samples.ndim == 2 else samples


def resample(w: Waveform, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Polyphase resampling with a Kaiser-windowed sinc low-pass."""
    if len(w.samples) == 0:
        raise ValueError("empty waveform")
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if w.sample_rate == target_rate:
        return Waveform(w.samples.copy(), target_rate)
    ratio = Fraction(target_rate, w.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    factor = max(up, down)
    taps = signal.firwin(2 * RESAMPLE_ZERO_CROSSINGS * factor + 1, 1.0 / factor,
                         window=("kaiser", RESAMPLE_KAISER_BETA))
    out = signal.resample_poly(w.samples, up, down, window=taps)
    return Waveform(out, target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_freqs: int = N_FFT // 2 + 1, n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE,
                   f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular HTK filters, shape (n_freqs, n_mels), peak height 1."""
    f_max = sample_rate / 2 if f_max is None else f_max
    all_freqs = np.linspace(0, sample_rate // 2, n_freqs)
    f_pts = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    f_diff = np.diff(f_pts)
    slopes = f_pts[None, :] - all_freqs[:, None]
    down = -slopes[:, :-2] / f_diff[:-1]
    up = slopes[:, 2:] / f_diff[1:]
    return np.maximum(0.0, np.minimum(down, up))


def hann_window(n: int) -> np.ndarray:
    # periodic form, as used for spectral analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def power_spectrogram(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP_LENGTH) -> np.ndarray:
    """Centred STFT power, shape (T, n_fft/2+1), T = len // hop + 1."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 1:
        raise ValueError("need at least one sample")
    pad = n_fft // 2
    padded = np.pad(samples, (pad, pad), mode="constant")
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop]
    spec = np.fft.rfft(frames * hann_window(n_fft), n=n_fft, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


_FB_CACHE: dict[tuple[int, int], np.ndarray] = {}


def log_mel(w: Waveform, n_mels: int = N_MELS) -> LogMelSpectrogram:
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"log_mel expects {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    if len(w.samples) < 1:
        raise ValueError("need at least one sample")
    key = (N_FFT // 2 + 1, n_mels)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(*key)
    mel = power_spectrogram(w.samples) @ _FB_CACHE[key]
    return LogMelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32))


def frame_with_margins(s: LogMelSpectrogram, margin: int) -> FramedInput:
    """Window of frames [t-M, t+M] for every t; outside frames are silence."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    data = s.data
    t, f = data.shape
    padded = np.full((t + 2 * margin, f), PAD_VALUE, dtype=data.dtype)
    padded[margin:margin + t] = data
    win = np.lib.stride_tricks.sliding_window_view(padded, 2 * margin + 1, axis=0)  # (T, F, W)
    return FramedInput(np.ascontiguousarray(win), margin)


def make_chunks(fi: FramedInput, n_frames: int) -> list[Chunk]:
    if n_frames < 1:
        raise ValueError("chunk length must be >= 1")
    data = fi.data
    total = data.shape[0]
    chunks = []
    for start in range(0, max(total, 1), n_frames):
        part = data[start:start + n_frames]
        valid = part.shape[0]
        if valid < n_frames:
            pad = np.zeros((n_frames - valid,) + data.shape[1:], dtype=data.dtype)
            part = np.concatenate([part, pad], axis=0)
        chunks.append(Chunk(part, start, valid))
    return chunks


def features(w: Waveform, n_mels: int = N_MELS) -> LogMelSpectrogram:
    """Downmixed, resampled log-mel spectrogram of any waveform."""
    if len(w.samples) == 0:
        raise ValueError("empty waveform")
    if w.sample_rate != SAMPLE_RATE:
        w = resample(w, SAMPLE_RATE)
    return log_mel(w, n_mels)
