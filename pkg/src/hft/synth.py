"""Synthetic piano-like clips with exact note labels."""

from __future__ import annotations

import numpy as np

from .audio import SAMPLE_RATE, Waveform
from .notes import PITCH_MAX, PITCH_MIN, NoteEvent, sort_notes

N_HARMONICS = 4
DECAY_SECONDS = 0.5
ATTACK_SECONDS = 0.002
RELEASE_SECONDS = 0.01
NOISE_DB = -40.0
PEAK_GAIN = 0.25


def midi_to_hz(pitch) -> np.ndarray:
    return 440.0 * 2.0 ** ((np.asarray(pitch, dtype=np.float64) - 69) / 12.0)


def render_notes(notes, n_samples: int, rng: np.random.Generator | None = None,
                 sample_rate: int = SAMPLE_RATE, noise_db: float = NOISE_DB) -> np.ndarray:
    out = np.zeros(n_samples)
    nyquist = sample_rate / 2
    for n in notes:
        start = int(round(n.onset * sample_rate))
        stop = min(int(round(n.offset * sample_rate)), n_samples)
        if stop <= start:
            continue
        t = np.arange(stop - start) / sample_rate
        env = np.exp(-t / DECAY_SECONDS)
        env *= np.minimum(1.0, t / ATTACK_SECONDS)
        env *= np.clip((t[-1] - t) / RELEASE_SECONDS, 0.0, 1.0)
        f0 = float(midi_to_hz(n.pitch))
        tone = np.zeros_like(t)
        for h in range(1, N_HARMONICS + 1):
            if h * f0 < nyquist:
                tone += np.sin(2 * np.pi * h * f0 * t) / h
        out[start:stop] += PEAK_GAIN * (n.velocity / 127.0) * env * tone
    if rng is not None and noise_db is not None:
        out += rng.normal(0.0, 10.0 ** (noise_db / 20.0), n_samples)
    return out


def random_notes(rng: np.random.Generator, clip_seconds: float, n_notes: int,
                 pitch_range=(PITCH_MIN, PITCH_MAX), duration_range=(0.2, 1.0),
                 velocity_range=(30, 110), max_polyphony: int | None = None,
                 min_gap: float = 0.1, edge: float = 0.1, max_tries: int = 1000) -> list[NoteEvent]:
    """Notes that never overlap on the same pitch (nor exceed ``max_polyphony``)."""
    lo_p, hi_p = pitch_range
    notes: list[NoteEvent] = []
    tries = 0
    while len(notes) < n_notes and tries < max_tries:
        tries += 1
        dur = rng.uniform(*duration_range)
        latest = clip_seconds - edge - dur
        if latest <= edge:
            break
        onset = round(float(rng.uniform(edge, latest)), 4)
        offset = round(onset + dur, 4)
        pitch = int(rng.integers(lo_p, hi_p + 1))
        vel = int(rng.integers(velocity_range[0], velocity_range[1] + 1))
        clash = False
        active = 0
        for n in notes:
            overlap = n.onset < offset + min_gap and onset < n.offset + min_gap
            if overlap and n.pitch == pitch:
                clash = True
                break
            if overlap:
                active += 1
        if clash or (max_polyphony is not None and active >= max_polyphony):
            continue
        notes.append(NoteEvent(onset=onset, pitch=pitch, offset=offset, velocity=vel))
    return sort_notes(notes)


def make_synthetic_dataset(seed: int, n_clips: int, clip_seconds: float, notes_per_clip: int = 10,
                           pitch_range=(PITCH_MIN, PITCH_MAX), max_polyphony: int | None = None,
                           noise_db: float = NOISE_DB) -> list[tuple[Waveform, list[NoteEvent]]]:
    """Deterministic (waveform, notes) pairs at 16 kHz."""
    rng = np.random.default_rng(seed)
    n_samples = int(round(clip_seconds * SAMPLE_RATE))
    out = []
    for _ in range(n_clips):
        notes = random_notes(rng, clip_seconds, notes_per_clip, pitch_range,
                             max_polyphony=max_polyphony) if notes_per_clip else []
        audio = render_notes(notes, n_samples, rng, noise_db=noise_db)
        out.append((Waveform(audio, SAMPLE_RATE), notes))
    return out
