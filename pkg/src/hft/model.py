"""Two-level hierarchical frequency-time Transformer.

Hierarchy 1 embeds every (frame, bin) window with a small 1-D convolution,
runs self-attention across frequency bins (each frame on its own), and
converts the bin axis to the pitch axis, either with a cross-attending
decoder whose queries are learned pitch embeddings or with a plain linear
map. Hierarchy 2 runs self-attention across time for each pitch.

Shapes inside the model carry an explicit batch axis: chunks are
(B, N, F, 2M+1) and grids (B, N, P).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("1-F-D-T", "1-F-D-N", "1-F-L-T", "2-F-D-T")
N_VELOCITY = 128
GRID_HEADS = ("frame", "onset", "offset")


@dataclass
class ModelConfig:
    n_frames: int = 128  # N
    margin: int = 32  # M
    n_bins: int = 256  # F
    n_pitches: int = 88  # P
    conv_channels: int = 4  # C
    conv_kernel: int = 5  # K
    d_model: int = 256  # Z
    d_ff: int = 512
    n_heads: int = 4
    n_layers: int = 3
    dropout: float = 0.1
    variant: str = "1-F-D-T"
    pitch_min: int = 21

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_frames", "n_bins", "n_pitches", "conv_channels", "conv_kernel",
                     "d_model", "d_ff", "n_heads", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.conv_kernel > self.window:
            raise ValueError("conv_kernel longer than the margin window")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant == "2-F-D-T":
            raise NotImplementedError(
                "variant 2-F-D-T is unsupported: its 2-D convolution block is not defined")
        if not 0 <= self.pitch_min <= 127 - self.n_pitches + 1:
            raise ValueError("pitch range falls outside MIDI 0-127")

    @property
    def window(self) -> int:
        return 2 * self.margin + 1

    @property
    def conv_len(self) -> int:
        return self.window - self.conv_kernel + 1

    @property
    def has_second(self) -> bool:
        return self.variant != "1-F-D-N"

    @property
    def decoder_converter(self) -> bool:
        return self.variant.split("-")[2] == "D"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def micro_config(**overrides) -> ModelConfig:
    """The tiny configuration used for gradient checks and the overfit run."""
    base = dict(n_frames=4, margin=2, n_bins=8, n_pitches=5, conv_channels=4, conv_kernel=5,
                d_model=8, d_ff=16, n_heads=2, n_layers=1)
    base.update(overrides)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# parameter layout


def _attn_shapes(prefix: str, z: int) -> list[tuple[str, tuple[int, ...], str]]:
    out = []
    for proj in ("q", "k", "v", "o"):
        out.append((f"{prefix}.{proj}.weight", (z, z), "linear"))
        out.append((f"{prefix}.{proj}.bias", (z,), "zeros"))
    return out


def _ff_shapes(prefix: str, z: int, ff: int):
    return [(f"{prefix}.ff1.weight", (z, ff), "linear"), (f"{prefix}.ff1.bias", (ff,), "zeros"),
            (f"{prefix}.ff2.weight", (ff, z), "linear"), (f"{prefix}.ff2.bias", (z,), "zeros")]


def _norm_shapes(prefix: str, z: int):
    return [(f"{prefix}.weight", (z,), "ones"), (f"{prefix}.bias", (z,), "zeros")]


def _encoder_shapes(prefix: str, cfg: ModelConfig):
    z, out = cfg.d_model, []
    for i in range(cfg.n_layers):
        p = f"{prefix}.{i}"
        out += _attn_shapes(f"{p}.attn", z) + _norm_shapes(f"{p}.norm1", z)
        out += _ff_shapes(p, z, cfg.d_ff) + _norm_shapes(f"{p}.norm2", z)
    return out


def _decoder_shapes(prefix: str, cfg: ModelConfig):
    z, out = cfg.d_model, []
    for i in range(cfg.n_layers):
        p = f"{prefix}.{i}"
        out += _attn_shapes(f"{p}.self_attn", z) + _norm_shapes(f"{p}.norm1", z)
        out += _attn_shapes(f"{p}.cross_attn", z) + _norm_shapes(f"{p}.norm2", z)
        out += _ff_shapes(p, z, cfg.d_ff) + _norm_shapes(f"{p}.norm3", z)
    return out


def _head_shapes(prefix: str, z: int):
    out = []
    for h in GRID_HEADS:
        out += [(f"{prefix}.{h}.weight", (z, 1), "linear"), (f"{prefix}.{h}.bias", (1,), "zeros")]
    out += [(f"{prefix}.velocity.weight", (z, N_VELOCITY), "linear"),
            (f"{prefix}.velocity.bias", (N_VELOCITY,), "zeros")]
    return out


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter, in serialization order."""
    z, c, k = cfg.d_model, cfg.conv_channels, cfg.conv_kernel
    shapes = [
        ("conv.weight", (c, 1, k), "linear"),
        ("conv.bias", (c,), "zeros"),
        ("embed.weight", (c * cfg.conv_len, z), "linear"),
        ("embed.bias", (z,), "zeros"),
        ("pos.freq", (cfg.n_bins, z), "pos"),
    ]
    shapes += _encoder_shapes("freq_enc", cfg)
    if cfg.decoder_converter:
        shapes.append(("pos.pitch", (cfg.n_pitches, z), "pos"))
        shapes += _decoder_shapes("converter", cfg)
    else:
        shapes += [("converter.weight", (cfg.n_bins, cfg.n_pitches), "linear"),
                   ("converter.bias", (cfg.n_pitches,), "zeros")]
    shapes += _head_shapes("head1", z)
    if cfg.has_second:
        shapes.append(("pos.time", (cfg.n_frames, z), "pos"))
        shapes += _encoder_shapes("time_enc", cfg)
        shapes += _head_shapes("head2", z)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s, _ in parameter_shapes(cfg))


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh weights: uniform(+-1/sqrt(fan_in)) for matrices, N(0, 0.02) positions."""
    rng = np.random.default_rng(seed)
    weights: dict[str, Tensor] = {}
    for name, shape, kind in parameter_shapes(cfg):
        if kind == "linear":
            fan_in = int(np.prod(shape[1:])) if name == "conv.weight" else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind == "pos":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        weights[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return weights


# --------------------------------------------------------------------------
# forward pass


@dataclass
class GridOutput:
    """Posteriors for one hierarchy: (B, N, P) sigmoids and (B, N, P, 128) logits."""

    frame: Tensor
    onset: Tensor
    offset: Tensor
    velocity_logits: Tensor

    def arrays(self) -> dict[str, np.ndarray]:
        return {"frame": self.frame.data, "onset": self.onset.data,
                "offset": self.offset.data, "velocity_logits": self.velocity_logits.data}


@dataclass
class ModelOutput:
    output_1st: GridOutput
    output_2nd: GridOutput | None = None

    @property
    def final(self) -> GridOutput:
        return self.output_2nd if self.output_2nd is not None else self.output_1st


@dataclass
class HFTModel:
    cfg: ModelConfig
    weights: dict[str, Tensor] = field(default_factory=dict)
    # most recent attention maps, kept only when record_attention is set
    record_attention: bool = False
    attention_maps: list[np.ndarray] = field(default_factory=list, repr=False)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "HFTModel":
        return cls(cfg, init_model(cfg, seed, dtype))

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.weights.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.weights.items())

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([w.data.ravel() for w in self.weights.values()])

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]

    # -- building blocks ---------------------------------------------------

    def _linear(self, x, prefix):
        return T.linear(x, self[f"{prefix}.weight"], self[f"{prefix}.bias"])

    def _norm(self, x, prefix):
        return T.layer_norm(x, self[f"{prefix}.weight"], self[f"{prefix}.bias"])

    def _attention(self, q_in: Tensor, kv_in: Tensor, prefix: str) -> Tensor:
        """Multi-head attention; inputs are (S, L, Z), no masking."""
        s, lq, z = q_in.shape
        lk = kv_in.shape[1]
        h = self.cfg.n_heads
        d = z // h

        def split(x, length):
            return T.transpose(T.reshape(x, (s, length, h, d)), (0, 2, 1, 3))

        q = split(self._linear(q_in, f"{prefix}.q"), lq)
        k = split(self._linear(kv_in, f"{prefix}.k"), lk)
        v = split(self._linear(kv_in, f"{prefix}.v"), lk)
        scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(d))
        probs = T.softmax(scores, axis=-1)
        if self.record_attention:
            self.attention_maps.append(probs.data)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (s, lq, z))
        return self._linear(ctx, f"{prefix}.o")

    def _feed_forward(self, x, prefix):
        return self._linear(T.relu(self._linear(x, f"{prefix}.ff1")), f"{prefix}.ff2")

    def _encoder_layer(self, x, prefix, train, rng):
        p = self.cfg.dropout
        x = self._norm(T.add(x, T.dropout(self._attention(x, x, f"{prefix}.attn"), p, train, rng)),
                       f"{prefix}.norm1")
        x = self._norm(T.add(x, T.dropout(self._feed_forward(x, prefix), p, train, rng)),
                       f"{prefix}.norm2")
        return x

    def _decoder_layer(self, x, mem, prefix, train, rng):
        p = self.cfg.dropout
        x = self._norm(T.add(x, T.dropout(self._attention(x, x, f"{prefix}.self_attn"), p, train, rng)),
                       f"{prefix}.norm1")
        x = self._norm(T.add(x, T.dropout(self._attention(x, mem, f"{prefix}.cross_attn"), p, train, rng)),
                       f"{prefix}.norm2")
        x = self._norm(T.add(x, T.dropout(self._feed_forward(x, prefix), p, train, rng)),
                       f"{prefix}.norm3")
        return x

    # -- stages ------------------------------------------------------------

    def conv_embed(self, chunk) -> Tensor:
        """(B, N, F, 2M+1) -> (B, N, F, Z) via conv -> ReLU -> flatten -> linear."""
        cfg = self.cfg
        x = T.as_tensor(chunk)
        if x.dtype != self.dtype:
            x = T.Tensor(x.data.astype(self.dtype))
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        b, n, f, w = x.shape
        if (f, w) != (cfg.n_bins, cfg.window):
            raise ValueError(f"conv_embed: chunk frames of shape {(f, w)}, "
                             f"expected {(cfg.n_bins, cfg.window)}")
        rows = T.reshape(x, (b * n * f, 1, w))
        h = T.relu(T.conv1d(rows, self["conv.weight"], self["conv.bias"]))
        h = T.reshape(h, (b, n, f, cfg.conv_channels * cfg.conv_len))
        return self._linear(h, "embed")

    def freq_encode(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        """Self-attention over the bin axis, each frame independently."""
        b, n, f, z = x.shape
        x = T.add(x, self["pos.freq"])
        x = T.reshape(x, (b * n, f, z))
        for i in range(self.cfg.n_layers):
            x = self._encoder_layer(x, f"freq_enc.{i}", train, rng)
        return T.reshape(x, (b, n, f, z))

    def convert(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        """(B, N, F, Z) -> (B, N, P, Z)."""
        cfg = self.cfg
        b, n, f, z = x.shape
        p = cfg.n_pitches
        if not cfg.decoder_converter:
            y = T.transpose(x, (0, 1, 3, 2))  # (B, N, Z, F)
            y = T.linear(y, self["converter.weight"], self["converter.bias"])
            return T.transpose(y, (0, 1, 3, 2))
        mem = T.reshape(x, (b * n, f, z))
        q = T.add(T.Tensor(np.zeros((b * n, p, z), dtype=self.dtype)), self["pos.pitch"])
        for i in range(cfg.n_layers):
            q = self._decoder_layer(q, mem, f"converter.{i}", train, rng)
        return T.reshape(q, (b, n, p, z))

    def heads(self, x: Tensor, hierarchy: int) -> GridOutput:
        b, n, p, _ = x.shape
        prefix = f"head{hierarchy}"
        out = {}
        for h in GRID_HEADS:
            out[h] = T.sigmoid(T.reshape(self._linear(x, f"{prefix}.{h}"), (b, n, p)))
        vel = self._linear(x, f"{prefix}.velocity")
        return GridOutput(out["frame"], out["onset"], out["offset"], vel)

    def time_encode(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        """Self-attention over the frame axis, each pitch independently."""
        if not self.cfg.has_second:
            raise ValueError("variant has no second hierarchy")
        b, n, p, z = x.shape
        if n != self.cfg.n_frames:
            raise ValueError(f"time_encode: {n} frames, config expects {self.cfg.n_frames}")
        y = T.transpose(x, (0, 2, 1, 3))  # (B, P, N, Z)
        y = T.add(y, self["pos.time"])
        y = T.reshape(y, (b * p, n, z))
        for i in range(self.cfg.n_layers):
            y = self._encoder_layer(y, f"time_enc.{i}", train, rng)
        return T.transpose(T.reshape(y, (b, p, n, z)), (0, 2, 1, 3))

    def forward(self, chunk, train: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        if train and self.cfg.dropout > 0 and rng is None:
            raise ValueError("training forward pass with dropout needs an rng")
        self.attention_maps.clear()
        emb = self.conv_embed(chunk)
        if emb.shape[1] != self.cfg.n_frames:
            raise ValueError(f"chunk has {emb.shape[1]} frames, config expects {self.cfg.n_frames}")
        enc = self.freq_encode(emb, train, rng)
        conv = self.convert(enc, train, rng)
        out1 = self.heads(conv, 1)
        if not self.cfg.has_second:
            return ModelOutput(out1, None)
        out2 = self.heads(self.time_encode(conv, train, rng), 2)
        return ModelOutput(out1, out2)

    __call__ = forward
