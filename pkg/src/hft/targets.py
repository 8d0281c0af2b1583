"""Reference notes to frame/onset/offset/velocity training grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import HOP_SECONDS
from .notes import N_PIANO_KEYS, PITCH_MIN

SHARPNESS = 3
VELOCITY_GATE = 0.5


@dataclass
class TargetGrids:
    frame: np.ndarray  # (T, P) in {0, 1}
    onset: np.ndarray  # (T, P) soft
    offset: np.ndarray  # (T, P) soft
    velocity: np.ndarray  # (T, P) int, 0 where no onset

    def __getitem__(self, sl) -> "TargetGrids":
        return TargetGrids(self.frame[sl], self.onset[sl], self.offset[sl], self.velocity[sl])

    @property
    def n_frames(self) -> int:
        return self.frame.shape[0]


def _triangle(times: np.ndarray, centre: float, width: float) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(times - centre) / width)


def notes_to_targets(notes, n_frames: int, hop_s: float = HOP_SECONDS, sharpness: int = SHARPNESS,
                     pitch_min: int = PITCH_MIN, n_pitches: int = N_PIANO_KEYS) -> TargetGrids:
    """Rasterise notes onto a (n_frames, n_pitches) grid.

    Onset and offset targets are triangles of half-width ``sharpness`` frames
    centred on the exact (sub-frame) event time. Velocity is only labelled
    where the onset target reaches 0.5.
    """
    frame = np.zeros((n_frames, n_pitches), dtype=np.float32)
    onset = np.zeros_like(frame)
    offset = np.zeros_like(frame)
    velocity = np.zeros((n_frames, n_pitches), dtype=np.int64)
    # distance to the nearest onset, used to pick the velocity when triangles overlap
    vel_dist = np.full((n_frames, n_pitches), np.inf)
    times = np.arange(n_frames) * hop_s
    width = sharpness * hop_s
    for note in notes:
        p = note.pitch - pitch_min
        if not 0 <= p < n_pitches:
            raise ValueError(f"pitch {note.pitch} outside {pitch_min}-{pitch_min + n_pitches - 1}")
        frame[(times >= note.onset) & (times < note.offset), p] = 1.0
        on = _triangle(times, note.onset, width)
        onset[:, p] = np.maximum(onset[:, p], on)
        offset[:, p] = np.maximum(offset[:, p], _triangle(times, note.offset, width))
        dist = np.abs(times - note.onset)
        take = (on >= VELOCITY_GATE) & (dist < vel_dist[:, p])
        velocity[take, p] = note.velocity
        vel_dist[take, p] = dist[take]
    return TargetGrids(frame, onset, offset, velocity)
