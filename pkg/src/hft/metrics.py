"""Frame and note-level precision / recall / F1.

Note matching mirrors the usual transcription-evaluation defaults: pitch
must agree, onsets within 50 ms, offsets (when used) within
max(50 ms, 20% of the reference duration), velocities (when used) within
0.1 after min-max normalising the reference velocities and fitting a
least-squares line from estimated to reference velocity. Matching is a
maximum-cardinality bipartite matching on the admissibility graph, ties
going to the pairing with the smallest total onset distance.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .audio import HOP_SECONDS
from .notes import PITCH_MIN, N_PIANO_KEYS

ONSET_TOLERANCE = 0.05
OFFSET_RATIO = 0.2
OFFSET_MIN_TOLERANCE = 0.05
VELOCITY_TOLERANCE = 0.1
_DECIMALS = 7

MODES = ("onset", "offset", "velocity")
FAMILIES = ("frame", "note", "note_offset", "note_offset_velocity")


@dataclass
class PRF:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    @classmethod
    def from_counts(cls, tp: int, n_est: int, n_ref: int) -> "PRF":
        p = tp / n_est if n_est else 0.0
        r = tp / n_ref if n_ref else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)


def frame_prf(est, ref) -> PRF:
    est = np.asarray(est).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if est.shape != ref.shape:
        raise ValueError(f"frame_prf: shapes {est.shape} and {ref.shape} differ")
    tp = int((est & ref).sum())
    return PRF.from_counts(tp, int(est.sum()), int(ref.sum()))


def notes_to_roll(notes, n_frames: int, hop_s: float = HOP_SECONDS, pitch_min: int = PITCH_MIN,
                  n_pitches: int = N_PIANO_KEYS) -> np.ndarray:
    roll = np.zeros((n_frames, n_pitches), dtype=bool)
    times = np.arange(n_frames) * hop_s
    for n in notes:
        p = n.pitch - pitch_min
        if 0 <= p < n_pitches:
            roll[(times >= n.onset) & (times < n.offset), p] = True
    return roll


def _arrays(notes):
    notes = list(notes)
    on = np.array([n.onset for n in notes], dtype=np.float64)
    off = np.array([n.offset for n in notes], dtype=np.float64)
    pitch = np.array([n.pitch for n in notes], dtype=np.int64)
    vel = np.array([n.velocity for n in notes], dtype=np.float64)
    return on, off, pitch, vel


def admissibility(est, ref, mode: str = "onset", velocity_fit: tuple[float, float] | None = None) -> np.ndarray:
    """Boolean (n_ref, n_est) matrix of admissible pairs."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    r_on, r_off, r_p, r_v = _arrays(ref)
    e_on, e_off, e_p, e_v = _arrays(est)
    ok = r_p[:, None] == e_p[None, :]
    ok &= np.round(np.abs(r_on[:, None] - e_on[None, :]), _DECIMALS) <= ONSET_TOLERANCE
    if mode in ("offset", "velocity"):
        tol = np.maximum(OFFSET_RATIO * (r_off - r_on), OFFSET_MIN_TOLERANCE)
        ok &= np.round(np.abs(r_off[:, None] - e_off[None, :]), _DECIMALS) <= tol[:, None]
    if mode == "velocity":
        slope, intercept = velocity_fit if velocity_fit is not None else (0.0, 0.0)
        r_norm = _normalise_ref_velocity(r_v)
        ok &= np.abs(slope * e_v[None, :] + intercept - r_norm[:, None]) < VELOCITY_TOLERANCE
    return ok


def _normalise_ref_velocity(v: np.ndarray) -> np.ndarray:
    if v.size == 0:
        return v
    lo = v.min()
    return (v - lo) / max(1.0, v.max() - lo)


def max_bipartite_matching(adj: np.ndarray, cost: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Maximum-cardinality matching of rows to columns.

    Among maximum matchings the one with the least total ``cost`` is
    returned, so the pairing does not depend on note order.
    """
    adj = np.asarray(adj, dtype=bool)
    if not adj.any():
        return []
    cost = np.zeros(adj.shape) if cost is None else np.asarray(cost, dtype=np.float64)
    # any real edge is cheaper than every non-edge combined, so the
    # assignment uses as many real edges as possible
    big = 1.0 + cost[adj].sum() + adj.size
    rows, cols = linear_sum_assignment(np.where(adj, cost, big))
    return sorted((int(i), int(j)) for i, j in zip(rows, cols) if adj[i, j])


def velocity_fit(est, ref, matching) -> tuple[float, float]:
    """Least-squares slope/intercept mapping matched est velocities to normalised ref."""
    if not matching:
        return 0.0, 0.0
    _, _, _, r_v = _arrays(ref)
    _, _, _, e_v = _arrays(est)
    r_norm = _normalise_ref_velocity(r_v)
    idx = np.array(matching)
    a = np.vstack([e_v[idx[:, 1]], np.ones(len(idx))]).T
    slope, intercept = np.linalg.lstsq(a, r_norm[idx[:, 0]], rcond=None)[0]
    return float(slope), float(intercept)


def match_notes(est, ref, mode: str = "onset") -> list[tuple[int, int]]:
    """Matched (ref index, est index) pairs.

    For the velocity mode the velocity line is fitted on the offset-mode
    matching, then the matching is recomputed with the velocity constraint.
    """
    est, ref = list(est), list(ref)
    if not est or not ref:
        return []
    cost = np.abs(_arrays(ref)[0][:, None] - _arrays(est)[0][None, :])
    if mode != "velocity":
        return max_bipartite_matching(admissibility(est, ref, mode), cost)
    base = max_bipartite_matching(admissibility(est, ref, "offset"), cost)
    if not base:
        return []
    fit = velocity_fit(est, ref, base)
    return max_bipartite_matching(admissibility(est, ref, "velocity", fit), cost)


def note_prf(est, ref, mode: str = "onset") -> PRF:
    est, ref = list(est), list(ref)
    return PRF.from_counts(len(match_notes(est, ref, mode)), len(est), len(ref))


@dataclass
class RecordingScores:
    frame: PRF
    note: PRF
    note_offset: PRF
    note_offset_velocity: PRF
    name: str = ""

    def f1_mean(self) -> float:
        return float(np.mean([getattr(self, f).f1 for f in FAMILIES]))


@dataclass
class EvalReport:
    recordings: list[RecordingScores] = field(default_factory=list)

    @property
    def mean(self) -> dict[str, PRF]:
        out = {}
        for fam in FAMILIES:
            vals = [asdict(getattr(r, fam)) for r in self.recordings]
            out[fam] = PRF(**{k: float(np.mean([v[k] for v in vals])) if vals else 0.0
                              for k in ("precision", "recall", "f1")})
        return out

    def mean_f1(self) -> float:
        """Average of the four mean F1 scores, used for model selection."""
        return float(np.mean([p.f1 for p in self.mean.values()]))

    def to_dict(self) -> dict:
        return {"recordings": [asdict(r) for r in self.recordings],
                "mean": {k: asdict(v) for k, v in self.mean.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        recs = []
        for r in d["recordings"]:
            recs.append(RecordingScores(name=r.get("name", ""),
                                        **{fam: PRF(**r[fam]) for fam in FAMILIES}))
        return cls(recs)

    @classmethod
    def from_json(cls, s: str) -> "EvalReport":
        return cls.from_dict(json.loads(s))

    def table(self) -> str:
        head1 = f"{'':<14}" + "".join(f"{t:^24}" for t in
                                      ("Frame", "Note", "Note w/ Offset", "Note w/ Off&Vel"))
        head2 = f"{'Recording':<14}" + "    P(%)   R(%)  F1(%)  " * 4
        lines = [head1, head2.rstrip()]

        def row(label, prfs):
            cells = "".join(f" {p.precision * 100:6.2f} {p.recall * 100:6.2f} {p.f1 * 100:6.2f}   "
                            for p in prfs)
            return f"{label[:14]:<14}{cells}".rstrip()

        for i, r in enumerate(self.recordings):
            lines.append(row(r.name or f"#{i}", [getattr(r, f) for f in FAMILIES]))
        lines.append(row("mean", [self.mean[f] for f in FAMILIES]))
        return "\n".join(lines)


def evaluate_recording(est, ref, hop_s: float = HOP_SECONDS, n_frames: int | None = None,
                       pitch_min: int = PITCH_MIN, n_pitches: int = N_PIANO_KEYS,
                       est_roll=None, name: str = "") -> RecordingScores:
    """Score one recording. ``est_roll`` overrides the estimated frame roll."""
    est, ref = list(est), list(ref)
    if n_frames is None:
        end = max([n.offset for n in est + ref], default=0.0)
        n_frames = int(np.ceil(end / hop_s)) + 1
    ref_roll = notes_to_roll(ref, n_frames, hop_s, pitch_min, n_pitches)
    if est_roll is None:
        est_roll = notes_to_roll(est, n_frames, hop_s, pitch_min, n_pitches)
    return RecordingScores(
        frame=frame_prf(est_roll, ref_roll),
        note=note_prf(est, ref, "onset"),
        note_offset=note_prf(est, ref, "offset"),
        note_offset_velocity=note_prf(est, ref, "velocity"),
        name=name,
    )


def evaluate_recordings(pairs, names=None, threads: int = 1, **kwargs) -> EvalReport:
    """Per-recording scores for (est, ref) pairs plus their mean."""
    pairs = list(pairs)
    names = names or [f"#{i}" for i in range(len(pairs))]

    def one(item):
        name, (est, ref) = item
        return evaluate_recording(est, ref, name=name, **kwargs)

    items = list(zip(names, pairs))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return EvalReport(list(pool.map(one, items)))
    return EvalReport([one(item) for item in items])
