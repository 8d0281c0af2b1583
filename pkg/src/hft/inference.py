"""Chunked inference, stitching, transcription and the per-position error profile."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .audio import HOP_SECONDS, Waveform, features, frame_with_margins
from .decode import decode_notes
from .model import HFTModel
from .notes import NoteEvent
from .targets import TargetGrids

STRIDE_MODES = ("full", "half")

# bumped by every feature extraction that goes through prepare_features
feature_calls = 0


class Predictor(Protocol):
    n_frames: int

    def __call__(self, batch: np.ndarray) -> dict[str, np.ndarray]: ...


@dataclass
class StitchedGrids:
    frame: np.ndarray  # (T, P)
    onset: np.ndarray
    offset: np.ndarray
    velocity: np.ndarray  # (T, P) argmax classes

    @property
    def n_frames(self) -> int:
        return self.frame.shape[0]


class ModelPredictor:
    """Wraps a model so a (B, N, F, W) batch maps to grids of its final output."""

    def __init__(self, model: HFTModel):
        self.model = model
        self.n_frames = model.cfg.n_frames

    def __call__(self, batch: np.ndarray) -> dict[str, np.ndarray]:
        with T.no_grad():
            out = self.model.forward(batch, train=False).final
        return {"frame": out.frame.data, "onset": out.onset.data, "offset": out.offset.data,
                "velocity": out.velocity_logits.data.argmax(axis=-1)}


def as_predictor(model) -> Predictor:
    return ModelPredictor(model) if isinstance(model, HFTModel) else model


def _chunk_starts(total: int, n: int, stride: int) -> list[int]:
    if total <= n:
        return [0]
    count = -(-(total - n) // stride) + 1
    return [k * stride for k in range(count)]


def _gather_chunk(framed: np.ndarray, start: int, n: int) -> np.ndarray:
    part = framed[start:start + n]
    if part.shape[0] < n:
        part = np.concatenate([part, np.zeros((n - part.shape[0],) + part.shape[1:], part.dtype)])
    return part


def _run_chunks(predict: Predictor, framed: np.ndarray, starts: Sequence[int], batch_size: int,
                threads: int | None) -> list[dict[str, np.ndarray]]:
    n = predict.n_frames
    groups = [starts[i:i + batch_size] for i in range(0, len(starts), batch_size)]

    def run(group):
        res = predict(np.stack([_gather_chunk(framed, s, n) for s in group]))
        return [{k: v[j] for k, v in res.items()} for j in range(len(group))]

    threads = threads or os.cpu_count() or 1
    if threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, groups))
    else:
        results = [run(g) for g in groups]
    return [r for group in results for r in group]


def _empty_grids(total: int, sample: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros((total,) + v.shape[1:], dtype=v.dtype) for k, v in sample.items()}


def _stitch(outputs, plan, total: int) -> StitchedGrids:
    """``plan`` holds (chunk index, first kept position, end kept position, chunk start)."""
    grids = _empty_grids(total, outputs[0])
    written = np.zeros(total, dtype=np.int64)
    for k, lo, hi, start in plan:
        for name, arr in outputs[k].items():
            grids[name][start + lo:start + hi] = arr[lo:hi]
        written[start + lo:start + hi] += 1
    if not (written == 1).all():
        raise AssertionError("stitching left frames unwritten or written twice")
    return StitchedGrids(grids["frame"], grids["onset"], grids["offset"], grids["velocity"])


def full_stride_plan(total: int, n: int) -> list[tuple[int, int, int, int]]:
    """(chunk, keep_lo, keep_hi, start) covering [0, total) with stride n."""
    starts = _chunk_starts(total, n, n)
    return [(k, 0, min(n, total - s), s) for k, s in enumerate(starts)]


def half_stride_plan(total: int, n: int) -> list[tuple[int, int, int, int]]:
    """Stride n/2; chunk k keeps positions [n/4, 3n/4) except at the ends."""
    if n % 4:
        raise ValueError(f"half-stride inference needs N divisible by 4, got {n}")
    if total <= n:
        return [(0, 0, total, 0)]
    half, quarter = n // 2, n // 4
    starts = _chunk_starts(total, n, half)
    last = len(starts) - 1
    plan = []
    for k, s in enumerate(starts):
        lo = 0 if k == 0 else quarter
        hi = min(n, total - s) if k == last else 3 * quarter
        plan.append((k, lo, hi, s))
    return plan


def _infer(model, framed: np.ndarray, plan, batch_size: int, threads: int | None) -> StitchedGrids:
    predict = as_predictor(model)
    total = framed.shape[0]
    starts = [p[3] for p in plan]
    outputs = _run_chunks(predict, framed, starts, batch_size, threads)
    return _stitch(outputs, plan, total)


def infer_full_stride(model, framed: np.ndarray, batch_size: int = 8, threads: int | None = 1) -> StitchedGrids:
    n = as_predictor(model).n_frames
    return _infer(model, framed, full_stride_plan(framed.shape[0], n), batch_size, threads)


def infer_half_stride(model, framed: np.ndarray, batch_size: int = 8, threads: int | None = 1) -> StitchedGrids:
    n = as_predictor(model).n_frames
    return _infer(model, framed, half_stride_plan(framed.shape[0], n), batch_size, threads)


def infer(model, framed: np.ndarray, stride_mode: str = "half", **kwargs) -> StitchedGrids:
    if stride_mode == "full":
        return infer_full_stride(model, framed, **kwargs)
    if stride_mode == "half":
        return infer_half_stride(model, framed, **kwargs)
    raise ValueError(f"stride mode must be one of {STRIDE_MODES}")


def prepare_features(w: Waveform, n_bins: int, margin: int) -> np.ndarray:
    """Resample, log-mel and margin framing: (T, F, 2M+1)."""
    global feature_calls
    feature_calls += 1
    return frame_with_margins(features(w, n_mels=n_bins), margin).data


def transcribe_features(model: HFTModel, framed: np.ndarray, stride_mode: str = "half",
                        threads: int | None = 1, return_grids: bool = False):
    grids = infer(model, framed, stride_mode, threads=threads)
    notes = decode_notes(grids.frame, grids.onset, grids.offset, grids.velocity,
                         HOP_SECONDS, pitch_min=model.cfg.pitch_min)
    return (notes, grids) if return_grids else notes


def transcribe(w: Waveform, model: HFTModel, stride_mode: str = "half",
               threads: int | None = 1) -> list[NoteEvent]:
    framed = prepare_features(w, model.cfg.n_bins, model.cfg.margin)
    return transcribe_features(model, framed, stride_mode, threads)


# --------------------------------------------------------------------------
# per-position error profile

PROFILE_HEADS = ("frame", "onset", "offset", "velocity")


@dataclass
class PositionErrorProfile:
    frame: np.ndarray  # (N,)
    onset: np.ndarray
    offset: np.ndarray
    velocity: np.ndarray

    def to_csv(self) -> str:
        lines = ["# velocity error uses class/127 for both prediction and label",
                 "position,frame,onset,offset,velocity"]
        for n in range(len(self.frame)):
            lines.append(f"{n},{self.frame[n]:.8g},{self.onset[n]:.8g},"
                         f"{self.offset[n]:.8g},{self.velocity[n]:.8g}")
        return "\n".join(lines) + "\n"


def position_error_profile(model, dataset: Sequence[tuple[np.ndarray, TargetGrids]],
                           predictions: Callable | None = None, n_frames: int | None = None,
                           batch_size: int = 8) -> PositionErrorProfile:
    """Mean squared error by position within full-stride chunks.

    ``dataset`` holds (framed features, targets) per recording. Only valid
    (non-padded) frames contribute. ``predictions`` may replace the model:
    it receives (recording index, chunk start, targets slice) and returns a
    grid dict, which lets tests feed the targets back in.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    predict = as_predictor(model) if model is not None else None
    n = n_frames or (predict.n_frames if predict is not None else None)
    if n is None:
        raise ValueError("chunk length unknown: pass a model or n_frames")
    sq = {h: np.zeros(n) for h in PROFILE_HEADS}
    count = np.zeros(n)
    for rec, (framed, targets) in enumerate(dataset):
        total = framed.shape[0]
        starts = _chunk_starts(total, n, n)
        if predictions is None:
            outs = _run_chunks(predict, framed, starts, batch_size, 1)
        else:
            outs = [predictions(rec, s, targets[s:s + n]) for s in starts]
        for s, out in zip(starts, outs):
            valid = min(n, total - s)
            tg = targets[s:s + valid]
            ref = {"frame": tg.frame, "onset": tg.onset, "offset": tg.offset,
                   "velocity": tg.velocity / 127.0}
            for h in PROFILE_HEADS:
                pred = np.asarray(out[h][:valid], dtype=np.float64)
                if h == "velocity":
                    pred = pred / 127.0
                sq[h][:valid] += ((pred - ref[h]) ** 2).mean(axis=1)
            count[:valid] += 1
    safe = np.maximum(count, 1)
    return PositionErrorProfile(*(sq[h] / safe for h in PROFILE_HEADS))

