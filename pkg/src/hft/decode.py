"""Grid posteriors to note events.

Per pitch: onset peaks (>= 0.5) refined with their two neighbours give the
note starts; velocity is the argmax class at the onset frame (class 0
drops the note); the offset is the earlier of the first refined offset
peak after the onset and the first frame after the onset whose frame
posterior falls below 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import HOP_SECONDS
from .notes import PITCH_MIN, NoteEvent, sort_notes

THRESHOLD = 0.5
MIN_ONSET_GAP = 2  # frames, measured between refined peak positions


@dataclass
class RefinedEvent:
    pitch_index: int
    frame: int
    delta: float
    peak: float
    hop_s: float = HOP_SECONDS

    @property
    def time(self) -> float:
        return (self.frame + self.delta) * self.hop_s


def find_local_maxima(seq, thresh: float = THRESHOLD) -> list[int]:
    """Frames where ``seq`` peaks at or above ``thresh``.

    A peak is a run of equal values higher than the value before the run
    and the value after it (0 past either end). The run's first frame is
    reported, so a tie goes to the earlier frame.
    """
    s = np.asarray(seq, dtype=np.float64)
    n = s.size
    if n == 0:
        return []
    starts = np.flatnonzero(np.concatenate([[True], s[1:] != s[:-1]]))
    ends = np.concatenate([starts[1:], [n]])
    before = np.where(starts > 0, s[starts - 1], 0.0)
    after = np.where(ends < n, s[np.minimum(ends, n - 1)], 0.0)
    v = s[starts]
    return starts[(v >= thresh) & (v > before) & (v > after)].tolist()


def refine_peak_time(a: float, b: float, c: float) -> float:
    """Sub-frame offset of a peak from its neighbours, in [-0.5, 0.5].

    Fits a symmetric triangle: the steeper side fixes the slope and the
    apex is where the two edges meet.
    """
    if c > a:
        den = 2.0 * (b - a)
    elif a > c:
        den = 2.0 * (b - c)
    else:
        return 0.0
    if den <= 0:
        return 0.0
    return float(np.clip((c - a) / den, -0.5, 0.5))


def _refined_peaks(seq: np.ndarray, thresh: float, pitch_index: int, hop_s: float) -> list[RefinedEvent]:
    out = []
    n = len(seq)
    for t in find_local_maxima(seq, thresh):
        a = seq[t - 1] if t > 0 else 0.0
        c = seq[t + 1] if t + 1 < n else 0.0
        out.append(RefinedEvent(pitch_index, t, refine_peak_time(a, seq[t], c), float(seq[t]), hop_s))
    return out


def _merge_close(events: list[RefinedEvent]) -> list[RefinedEvent]:
    # Highest peak first (earlier frame on ties); a peak within MIN_ONSET_GAP
    # of one already kept is dropped. Raising the threshold only removes
    # the tail of this order, so it can never add notes.
    kept: list[RefinedEvent] = []
    for ev in sorted(events, key=lambda e: (-e.peak, e.frame)):
        pos = ev.frame + ev.delta
        if all(abs(pos - (k.frame + k.delta)) >= MIN_ONSET_GAP for k in kept):
            kept.append(ev)
    return sorted(kept, key=lambda e: e.frame)


def decode_pitch(frame: np.ndarray, onset: np.ndarray, offset: np.ndarray, velocity: np.ndarray,
                 pitch: int, hop_s: float = HOP_SECONDS, thresh: float = THRESHOLD,
                 pitch_index: int = 0) -> list[NoteEvent]:
    """Decode one pitch row. ``velocity`` holds class ids per frame."""
    n = len(onset)
    end_time = n * hop_s
    onsets = _merge_close(_refined_peaks(onset, thresh, pitch_index, hop_s))
    offsets = _refined_peaks(offset, thresh, pitch_index, hop_s)
    notes = []
    for i, on in enumerate(onsets):
        vel = int(velocity[on.frame])
        if vel == 0:
            continue
        limit = onsets[i + 1].time if i + 1 < len(onsets) else end_time
        candidates = []
        off_peak = next((o.time for o in offsets if o.time > on.time), None)
        if off_peak is not None:
            candidates.append(off_peak)
        below = np.flatnonzero(frame[on.frame + 1:] < thresh)
        if below.size:
            candidates.append((on.frame + 1 + below[0]) * hop_s)
        off = min(candidates) if candidates else limit
        off = min(off, limit)
        if off > on.time:
            notes.append(NoteEvent(onset=on.time, pitch=pitch, offset=off, velocity=min(vel, 127)))
    return notes


def decode_notes(frame, onset, offset, velocity, hop_s: float = HOP_SECONDS,
                 thresh: float = THRESHOLD, pitch_min: int = PITCH_MIN) -> list[NoteEvent]:
    """Decode (T, P) grids into notes.

    ``velocity`` is either (T, P) class ids or (T, P, 128) logits.
    """
    frame, onset, offset = (np.asarray(g, dtype=np.float64) for g in (frame, onset, offset))
    velocity = np.asarray(velocity)
    if velocity.ndim == 3:
        velocity = velocity.argmax(axis=-1)
    if not (frame.shape == onset.shape == offset.shape == velocity.shape):
        raise ValueError("decode_notes: grid shapes differ")
    notes = []
    for p in range(frame.shape[1]):
        notes += decode_pitch(frame[:, p], onset[:, p], offset[:, p], velocity[:, p],
                              pitch_min + p, hop_s, thresh, p)
    return sort_notes(notes)
