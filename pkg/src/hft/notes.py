from __future__ import annotations

from dataclasses import dataclass

PITCH_MIN = 21
PITCH_MAX = 108
N_PIANO_KEYS = PITCH_MAX - PITCH_MIN + 1


@dataclass(frozen=True, order=True)
class NoteEvent:
    """A transcribed or reference note. Times are seconds, velocity is MIDI 0-127."""

    onset: float
    pitch: int
    offset: float
    velocity: int

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside MIDI range")
        if not 0 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside 0-127")
        if not self.offset > self.onset:
            raise ValueError(f"offset {self.offset} must be after onset {self.onset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    def to_dict(self) -> dict:
        return {"pitch": self.pitch, "onset": self.onset, "offset": self.offset,
                "velocity": self.velocity}

    @classmethod
    def from_dict(cls, d: dict) -> "NoteEvent":
        return cls(onset=float(d["onset"]), pitch=int(d["pitch"]), offset=float(d["offset"]),
                   velocity=int(d["velocity"]))


def sort_notes(notes) -> list[NoteEvent]:
    return sorted(notes, key=lambda n: (n.onset, n.pitch))
