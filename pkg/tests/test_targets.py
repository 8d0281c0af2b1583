import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hft.audio import HOP_SECONDS
from hft.decode import decode_notes
from hft.notes import NoteEvent
from hft.targets import notes_to_targets

from oracles import separated_notes

HOP = HOP_SECONDS


def test_onset_triangle_on_frame():
    k = 10
    tg = notes_to_targets([NoteEvent(k * HOP, 60, 40 * HOP, 80)], 50)
    col = tg.onset[:, 60 - 21]
    expected = {k: 1.0, k - 1: 2 / 3, k + 1: 2 / 3, k - 2: 1 / 3, k + 2: 1 / 3, k - 3: 0.0, k + 3: 0.0}
    for t, v in expected.items():
        assert col[t] == pytest.approx(v, abs=1e-6)
    assert np.count_nonzero(col) == 5


def test_offset_triangle_between_frames():
    # offset at 20.5 frames: linear decay gives 1 - 0.5/3 on both neighbours
    tg = notes_to_targets([NoteEvent(2 * HOP, 60, 20.5 * HOP, 80)], 40)
    col = tg.offset[:, 39]
    for t, d in [(20, 0.5), (21, 0.5), (19, 1.5), (22, 1.5), (18, 2.5), (23, 2.5)]:
        assert col[t] == pytest.approx(1 - d / 3, abs=1e-6)
    assert col[17] == 0 and col[24] == 0


def test_empty_notes_give_zero_grids():
    tg = notes_to_targets([], 30)
    for g in (tg.frame, tg.onset, tg.offset, tg.velocity):
        assert g.shape == (30, 88) and not g.any()


def test_velocity_gated_by_onset_target():
    tg = notes_to_targets([NoteEvent(10.2 * HOP, 70, 30 * HOP, 61)], 40)
    p = 70 - 21
    on, vel = tg.onset[:, p], tg.velocity[:, p]
    assert (vel[on >= 0.5] == 61).all()
    assert (vel[on < 0.5] == 0).all()
    assert set(np.flatnonzero(vel)) == {9, 10, 11}
    assert not np.delete(tg.velocity, p, axis=1).any()


def test_frame_span_is_half_open():
    tg = notes_to_targets([NoteEvent(5 * HOP, 60, 9 * HOP, 10)], 20)
    np.testing.assert_array_equal(np.flatnonzero(tg.frame[:, 39]), [5, 6, 7, 8])


def test_pitch_out_of_range():
    with pytest.raises(ValueError, match="pitch 20"):
        notes_to_targets([NoteEvent(0.0, 20, 0.1, 10)], 10)
    with pytest.raises(ValueError):
        notes_to_targets([NoteEvent(0.0, 66, 0.1, 10)], 10, pitch_min=60, n_pitches=5)


def test_overlapping_same_pitch_combine_by_max():
    a, b = NoteEvent(10 * HOP, 60, 30 * HOP, 40), NoteEvent(12 * HOP, 60, 40 * HOP, 90)
    tg = notes_to_targets([a, b], 50)
    sa, sb = notes_to_targets([a], 50), notes_to_targets([b], 50)
    np.testing.assert_array_equal(tg.onset, np.maximum(sa.onset, sb.onset))
    # frame 11 is equidistant; 10 is nearer a, 12 nearer b
    assert tg.velocity[10, 39] == 40 and tg.velocity[12, 39] == 90


def test_round_trip_through_decoder():
    notes, n_frames = separated_notes(np.random.default_rng(0), 40)
    assert len(notes) >= 20
    tg = notes_to_targets(notes, n_frames)
    out = decode_notes(tg.frame, tg.onset, tg.offset, tg.velocity)
    assert len(out) == len(notes)
    ref = sorted(notes, key=lambda n: (n.pitch, n.onset))
    est = sorted(out, key=lambda n: (n.pitch, n.onset))
    for r, e in zip(ref, est):
        assert (r.pitch, r.velocity) == (e.pitch, e.velocity)
        assert abs(r.onset - e.onset) <= 0.008
        assert abs(r.offset - e.offset) <= 0.008


@given(st.integers(0, 10_000))
def test_grid_value_sets(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(5, 40))
    note = NoteEvent(k * HOP, 50, (k + int(rng.integers(10, 40))) * HOP, 30)
    tg = notes_to_targets([note], 100)
    assert set(np.unique(tg.frame)) <= {0.0, 1.0}
    # onset on a frame: exactly {0, 1/3, 2/3, 1}
    assert len(np.unique(tg.onset)) <= 2 * 3 + 1
    np.testing.assert_allclose(sorted(set(np.round(tg.onset[:, 29], 6))), [0, 1 / 3, 2 / 3, 1], atol=1e-6)
    # off-frame times still give at most 2J+1 distinct values per note
    frac = NoteEvent((k + rng.uniform()) * HOP, 50, (k + 20.3) * HOP, 30)
    tg = notes_to_targets([frac], 100)
    assert len(np.unique(tg.onset[:, 29])) <= 2 * 3 + 1
    assert len(np.unique(tg.offset[:, 29])) <= 2 * 3 + 1
