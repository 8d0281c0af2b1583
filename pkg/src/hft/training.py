"""Losses, optimiser, schedule and the training loop."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .audio import Waveform, features, frame_with_margins
from .model import N_VELOCITY, GridOutput, HFTModel, ModelOutput
from .notes import NoteEvent
from .targets import TargetGrids, notes_to_targets
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    alpha_1st: float = 1.0
    alpha_2nd: float = 1.0
    epochs: int = 50
    max_steps: int | None = None
    seed: int = 0
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    plateau_threshold: float = 1e-4
    plateau_min_lr: float = 0.0
    plateau_monitor: str = "f1"  # "f1" (validation note F1, maximised) or "loss" (epoch training loss, minimised)
    stride_mode: str = "full"  # used for validation transcription
    train_stride: int | None = None  # chunk hop over training clips, default N

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive")
        if self.alpha_1st < 0 or self.alpha_2nd < 0:
            raise ValueError("loss coefficients must be >= 0")
        if self.plateau_monitor not in ("f1", "loss"):
            raise ValueError("plateau_monitor must be 'f1' or 'loss'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# losses


def bce_sum(y, y_hat: Tensor) -> Tensor:
    return T.bce_sum(y, y_hat)


def cce_velocity_sum(y, logits: Tensor) -> Tensor:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= N_VELOCITY):
        raise ValueError(f"velocity class ids must lie in [0, {N_VELOCITY})")
    return T.cross_entropy_sum(logits, y)


@dataclass
class HierarchyLoss:
    frame: Tensor
    onset: Tensor
    offset: Tensor
    velocity: Tensor

    @property
    def total(self) -> Tensor:
        return self.frame + self.onset + self.offset + self.velocity

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("frame", "onset", "offset", "velocity")}


def hierarchy_terms(out: GridOutput, targets: TargetGrids) -> HierarchyLoss:
    return HierarchyLoss(
        bce_sum(targets.frame, out.frame),
        bce_sum(targets.onset, out.onset),
        bce_sum(targets.offset, out.offset),
        cce_velocity_sum(targets.velocity, out.velocity_logits),
    )


def hierarchy_loss(out: GridOutput, targets: TargetGrids) -> Tensor:
    return hierarchy_terms(out, targets).total


@dataclass
class LossBreakdown:
    first: HierarchyLoss
    second: HierarchyLoss | None
    l_1st: Tensor
    l_2nd: Tensor | None
    l_all: Tensor

    def to_dict(self) -> dict:
        d = {"L_1st": float(self.l_1st.data), "L_all": float(self.l_all.data),
             "first": self.first.values()}
        if self.second is not None:
            d["L_2nd"] = float(self.l_2nd.data)
            d["second"] = self.second.values()
        return d


def total_loss(out: ModelOutput, targets: TargetGrids, alpha_1st: float = 1.0,
               alpha_2nd: float = 1.0) -> LossBreakdown:
    first = hierarchy_terms(out.output_1st, targets)
    l1 = first.total
    if out.output_2nd is None:
        return LossBreakdown(first, None, l1, None, T.mul(l1, alpha_1st))
    second = hierarchy_terms(out.output_2nd, targets)
    l2 = second.total
    return LossBreakdown(first, second, l1, l2, T.mul(l1, alpha_1st) + T.mul(l2, alpha_2nd))


# --------------------------------------------------------------------------
# optimisation


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> dict[str, np.ndarray]:
    norm = global_norm(grads.values())
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, applied to ``weights`` in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        w = weights[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, weight {w.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(w.dtype)
    return state


@dataclass
class PlateauScheduler:
    """Reduce the learning rate when a monitored metric stops improving.

    Relative threshold, counts evaluations without improvement, reduces once
    the count exceeds ``patience``, no cooldown.
    """

    lr: float
    factor: float = 0.1
    patience: int = 10
    threshold: float = 1e-4
    min_lr: float = 0.0
    mode: str = "max"
    eps: float = 1e-8
    best: float | None = None
    num_bad: int = 0

    def _improved(self, metric: float) -> bool:
        if self.best is None:
            return True
        if self.mode == "max":
            return metric > self.best * (1.0 + self.threshold)
        return metric < self.best * (1.0 - self.threshold)

    def step(self, metric: float) -> float:
        if self._improved(metric):
            self.best = metric
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.num_bad > self.patience:
            new_lr = max(self.lr * self.factor, self.min_lr)
            if self.lr - new_lr > self.eps:
                self.lr = new_lr
            self.num_bad = 0
        return self.lr


def plateau_schedule(state: PlateauScheduler, validation_f1: float) -> float:
    return state.step(validation_f1)


# --------------------------------------------------------------------------
# data


@dataclass
class TrainingClip:
    framed: np.ndarray  # (T, F, 2M+1)
    targets: TargetGrids
    notes: list[NoteEvent]
    name: str = ""

    @property
    def n_frames(self) -> int:
        return self.framed.shape[0]


def prepare_clip(w: Waveform, notes: Sequence[NoteEvent], model_cfg, name: str = "") -> TrainingClip:
    spec = features(w, n_mels=model_cfg.n_bins)
    framed = frame_with_margins(spec, model_cfg.margin).data
    targets = notes_to_targets(notes, spec.n_frames, pitch_min=model_cfg.pitch_min,
                               n_pitches=model_cfg.n_pitches)
    return TrainingClip(framed, targets, list(notes), name)


@dataclass
class ChunkBatchSource:
    """All training chunks of a clip set, as stacked arrays."""

    inputs: np.ndarray  # (K, N, F, W)
    frame: np.ndarray
    onset: np.ndarray
    offset: np.ndarray
    velocity: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def batch(self, idx) -> tuple[np.ndarray, TargetGrids]:
        return self.inputs[idx], TargetGrids(self.frame[idx], self.onset[idx], self.offset[idx],
                                             self.velocity[idx])


def build_chunks(clips: Sequence[TrainingClip], n_frames: int, stride: int | None = None) -> ChunkBatchSource:
    stride = stride or n_frames
    xs, fr, on, off, vel = [], [], [], [], []
    for clip in clips:
        total = clip.n_frames
        for start in range(0, max(total - n_frames, 0) + stride, stride):
            if start >= total:
                break
            sl = slice(start, start + n_frames)
            x = clip.framed[sl]
            tg = clip.targets[sl]
            pad = n_frames - x.shape[0]
            if pad:
                x = np.concatenate([x, np.zeros((pad,) + x.shape[1:], x.dtype)])
                tg = TargetGrids(*(np.concatenate([a, np.zeros((pad,) + a.shape[1:], a.dtype)])
                                   for a in (tg.frame, tg.onset, tg.offset, tg.velocity)))
            xs.append(x)
            fr.append(tg.frame)
            on.append(tg.onset)
            off.append(tg.offset)
            vel.append(tg.velocity)
    if not xs:
        raise ValueError("empty dataset")
    return ChunkBatchSource(np.stack(xs), np.stack(fr), np.stack(on), np.stack(off), np.stack(vel))


# --------------------------------------------------------------------------
# loop


@dataclass
class FitResult:
    model: HFTModel  # best weights by validation score
    log: list[dict]
    best_epoch: int
    best_score: float
    steps: int


def train_step(model: HFTModel, x: np.ndarray, targets: TargetGrids, state: AdamState, lr: float,
               cfg: TrainConfig, rng: np.random.Generator) -> LossBreakdown:
    for p in model.parameters():
        p.grad = None
    out = model.forward(x, train=True, rng=rng)
    losses = total_loss(out, targets, cfg.alpha_1st, cfg.alpha_2nd)
    # sums over each chunk's grid, averaged over the batch
    T.backward(T.mul(losses.l_all, 1.0 / x.shape[0]))
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for n, p in model.named_parameters()}
    grads = clip_grad_norm(grads, cfg.clip_norm)
    adam_step({n: p.data for n, p in model.named_parameters()}, grads, state, lr, cfg.betas, cfg.eps)
    return losses


def validate(model: HFTModel, clips: Sequence[TrainingClip], stride_mode: str = "full"):
    from .inference import transcribe_features
    from .metrics import evaluate_recordings

    pairs, rolls = [], []
    for clip in clips:
        notes, grids = transcribe_features(model, clip.framed, stride_mode, return_grids=True)
        pairs.append((notes, clip.notes))
        rolls.append(grids.frame >= 0.5)
    report = evaluate_recordings(pairs, names=[c.name for c in clips])
    # Frame metric on the model's own grid, not re-rendered from notes
    from .metrics import frame_prf
    for rec, roll, clip in zip(report.recordings, rolls, clips):
        rec.frame = frame_prf(roll, clip.targets.frame >= 0.5)
    return report


def fit(model: HFTModel, train_clips: Sequence[TrainingClip], cfg: TrainConfig,
        valid_clips: Sequence[TrainingClip] | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Mini-batch Adam over chunks with per-epoch validation and best-model retention."""
    if not train_clips:
        raise ValueError("empty dataset")
    valid_clips = list(valid_clips) if valid_clips is not None else list(train_clips)
    data = build_chunks(train_clips, model.cfg.n_frames, cfg.train_stride)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold,
                             cfg.plateau_min_lr, "max" if cfg.plateau_monitor == "f1" else "min")
    log: list[dict] = []
    best = (-math.inf, 0, copy.deepcopy(model.weights))
    steps = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(data))
        sums: dict[str, float] = {}
        n_batches = 0
        for i in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            x, tg = data.batch(order[i:i + cfg.batch_size])
            losses = train_step(model, x, tg, state, sched.lr, cfg, rng)
            steps += 1
            n_batches += 1
            for k, v in (("L_1st", losses.l_1st), ("L_2nd", losses.l_2nd), ("L_all", losses.l_all)):
                if v is not None:
                    sums[k] = sums.get(k, 0.0) + float(v.data) / x.shape[0]
        if n_batches == 0:
            break
        with T.no_grad():
            report = validate(model, valid_clips, cfg.stride_mode)
        score = report.mean_f1()
        lr_used = sched.lr
        sched.step(report.mean["note"].f1 if cfg.plateau_monitor == "f1" else sums["L_all"] / n_batches)
        record = {"epoch": epoch, "steps": steps, "lr": lr_used,
                  **{k: v / n_batches for k, v in sums.items()},
                  "f1": {k: v.f1 for k, v in report.mean.items()}, "score": score,
                  "seconds": round(time.perf_counter() - t0, 3)}
        log.append(record)
        logger.info("epoch %d steps %d loss %.4f score %.4f", epoch, steps, record["L_all"], score)
        if on_epoch is not None:
            on_epoch(record)
        if score > best[0]:
            best = (score, epoch, copy.deepcopy(model.weights))
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    best_model = HFTModel(model.cfg, best[2])
    return FitResult(best_model, log, best[1], best[0], steps)


ALPHA_PAIRS = ((1.8, 0.2), (1.4, 0.6), (1.0, 1.0), (0.6, 1.4), (0.2, 1.8), (0.0, 2.0))


def alpha_sweep(make_model: Callable[[], HFTModel], train_clips, cfg: TrainConfig, valid_clips=None,
                pairs: Sequence[tuple[float, float]] = ALPHA_PAIRS) -> dict[tuple[float, float], list[dict]]:
    """Train one model per loss-coefficient pair and collect the epoch logs."""
    out = {}
    for a1, a2 in pairs:
        run_cfg = dataclasses.replace(cfg, alpha_1st=a1, alpha_2nd=a2)
        out[(a1, a2)] = fit(make_model(), train_clips, run_cfg, valid_clips).log
    return out
