"""File formats: WAV in, JSON/MIDI notes, checkpoints and run configs.

All binary integers are little-endian except inside Standard MIDI Files,
which are big-endian by definition.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .audio import Waveform
from .model import HFTModel, ModelConfig, parameter_shapes
from .notes import NoteEvent, sort_notes
from .tensor import Tensor
from .training import TrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HFTC"
CHECKPOINT_VERSION = 1
FEATURE_MAGIC = b"HFTF"

MIDI_TPQ = 500
MIDI_TEMPO = 500_000  # microseconds per quarter note, 120 bpm


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# audio


def read_wav(path) -> Waveform:
    """PCM 16-bit or IEEE float32 WAV, any channel count, downmixed to mono."""
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_wav(w: Waveform, path, float32: bool = False) -> None:
    if float32:
        wavfile.write(str(path), w.sample_rate, w.samples.astype(np.float32))
    else:
        pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
        wavfile.write(str(path), w.sample_rate, pcm)


def write_features(data: np.ndarray, path) -> None:
    """Dump a (T, F) matrix as float32 after a 16-byte HFTF header."""
    t, f = data.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", t, f, 0))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file")
    t, f, _ = struct.unpack("<III", raw[4:16])
    return np.frombuffer(raw[16:], dtype="<f4").reshape(t, f).copy()


# --------------------------------------------------------------------------
# notes


def _note_format(path, fmt: str | None) -> str:
    if fmt:
        return fmt
    ext = Path(path).suffix.lower()
    return "midi" if ext in (".mid", ".midi") else "json"


def write_notes(notes, path, fmt: str | None = None) -> None:
    fmt = _note_format(path, fmt)
    notes = sort_notes(notes)
    if fmt == "json":
        Path(path).write_text(json.dumps([n.to_dict() for n in notes], indent=1))
    elif fmt == "midi":
        Path(path).write_bytes(notes_to_midi(notes))
    else:
        raise ValueError(f"unknown note format {fmt!r}")


def read_notes(path, fmt: str | None = None) -> list[NoteEvent]:
    fmt = _note_format(path, fmt)
    if fmt == "midi":
        return midi_to_notes(Path(path).read_bytes())
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "notes" in data:
        data = data["notes"]
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON array of notes")
    return [NoteEvent.from_dict(d) for d in data]


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def notes_to_midi(notes, tpq: int = MIDI_TPQ, tempo: int = MIDI_TEMPO) -> bytes:
    """Format-0 SMF with one tempo event and note-on/note-off pairs.

    Times are rounded to the nearest tick (1 ms at the defaults). A
    velocity of 0 cannot be sent as a note-on and is written as 1.
    """
    ticks_per_s = tpq * 1_000_000 / tempo
    events = []
    for n in notes:
        on = int(round(n.onset * ticks_per_s))
        off = max(int(round(n.offset * ticks_per_s)), on + 1)
        # note-offs sort before note-ons at the same tick
        events.append((off, 0, bytes([0x80, n.pitch, 0])))
        events.append((on, 1, bytes([0x90, n.pitch, max(1, n.velocity)])))
    events.sort(key=lambda e: (e[0], e[1]))
    track = bytearray(b"\x00\xff\x51\x03" + tempo.to_bytes(3, "big"))
    now = 0
    for tick, _, msg in events:
        track += _varlen(tick - now) + msg
        now = tick
    track += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, tpq)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)


def _read_varlen(buf: bytes, pos: int) -> tuple[int, int]:
    value = 0
    while True:
        b = buf[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos


def _parse_track(data: bytes):
    """Yield (tick, kind, payload) for note and tempo events of one track."""
    pos, tick, status = 0, 0, None
    while pos < len(data):
        delta, pos = _read_varlen(data, pos)
        tick += delta
        b = data[pos]
        if b == 0xFF:
            mtype = data[pos + 1]
            length, pos = _read_varlen(data, pos + 2)
            if mtype == 0x51 and length == 3:
                yield tick, "tempo", int.from_bytes(data[pos:pos + 3], "big")
            if mtype == 0x2F:
                return
            pos += length
            continue
        if b in (0xF0, 0xF7):
            length, pos = _read_varlen(data, pos + 1)
            pos += length
            continue
        if b & 0x80:
            status = b
            pos += 1
        elif status is None:
            raise FormatError("running status without a preceding status byte")
        kind = status & 0xF0
        nbytes = 1 if kind in (0xC0, 0xD0) else 2
        args = data[pos:pos + nbytes]
        pos += nbytes
        chan = status & 0x0F
        if kind == 0x90 and args[1] > 0:
            yield tick, "on", (chan, args[0], args[1])
        elif kind == 0x80 or (kind == 0x90 and args[1] == 0):
            yield tick, "off", (chan, args[0])


def midi_to_notes(raw: bytes) -> list[NoteEvent]:
    """Notes from a format 0/1 SMF, honouring the tempo map.

    A note-on with velocity 0 ends a note. Overlapping notes on one
    channel and pitch are closed first-in, first-out.
    """
    if raw[:4] != b"MThd" or len(raw) < 14:
        raise FormatError("not a Standard MIDI File")
    try:
        return _midi_to_notes(raw)
    except (IndexError, struct.error):
        raise FormatError("truncated MIDI data") from None


def _midi_to_notes(raw: bytes) -> list[NoteEvent]:
    hlen, fmt, ntracks, division = struct.unpack(">IHHH", raw[4:14])
    if fmt not in (0, 1):
        raise FormatError(f"MIDI format {fmt} not supported")
    if division & 0x8000:
        raise FormatError("SMPTE time division not supported")
    pos = 8 + hlen
    tracks = []
    while pos + 8 <= len(raw) and len(tracks) < ntracks:
        ctype, clen = raw[pos:pos + 4], struct.unpack(">I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + clen]
        pos += 8 + clen
        if ctype != b"MTrk":
            logger.warning("skipping unknown MIDI chunk %r", ctype)
            continue
        tracks.append(list(_parse_track(body)))

    tempos = sorted((t, v) for tr in tracks for t, k, v in tr if k == "tempo")
    if not tempos or tempos[0][0] != 0:
        tempos.insert(0, (0, MIDI_TEMPO))

    def seconds(tick: int) -> float:
        s, last_tick, tempo = 0.0, 0, tempos[0][1]
        for t, v in tempos[1:]:
            if t >= tick:
                break
            s += (t - last_tick) * tempo / (division * 1e6)
            last_tick, tempo = t, v
        return s + (tick - last_tick) * tempo / (division * 1e6)

    notes = []
    for tr in tracks:
        active: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for tick, kind, payload in tr:
            if kind == "on":
                chan, pitch, vel = payload
                active.setdefault((chan, pitch), []).append((tick, vel))
            elif kind == "off":
                stack = active.get(payload)
                if stack:
                    on_tick, vel = stack.pop(0)
                    on_s, off_s = seconds(on_tick), seconds(tick)
                    if off_s > on_s:
                        notes.append(NoteEvent(onset=on_s, pitch=payload[1], offset=off_s, velocity=vel))
    return sort_notes(notes)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: HFTModel, path) -> None:
    """Write ``HFTC``, u32 version, u32 length + config JSON, then per tensor
    u32 length + name, u32 rank, rank x u32 dims and float32 data."""
    cfg_json = json.dumps(model.cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)) + cfg_json)
        for name, t in model.named_parameters():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> HFTModel:
    """Model from a checkpoint; every tensor's name and shape is checked against the stored config."""
    raw = Path(path).read_bytes()
    try:
        return _load_checkpoint(raw, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint ({e})") from None


def _load_checkpoint(raw: bytes, path) -> HFTModel:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", raw[8:12])
    cfg = ModelConfig.from_dict(json.loads(raw[12:12 + clen]))
    pos = 12 + clen
    expected = {name: shape for name, shape, _ in parameter_shapes(cfg)}
    weights: dict[str, Tensor] = {}
    while pos < len(raw):
        (nlen,) = struct.unpack("<I", raw[pos:pos + 4])
        name = raw[pos + 4:pos + 4 + nlen].decode()
        pos += 4 + nlen
        (rank,) = struct.unpack("<I", raw[pos:pos + 4])
        shape = struct.unpack(f"<{rank}I", raw[pos + 4:pos + 4 + 4 * rank])
        pos += 4 + 4 * rank
        size = int(np.prod(shape)) * 4
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated data for {name!r}")
        if name not in expected:
            raise FormatError(f"{path}: unexpected parameter {name!r}")
        if tuple(shape) != tuple(expected[name]):
            raise FormatError(f"{path}: parameter {name!r} has shape {shape}, "
                              f"config expects {expected[name]}")
        if name in weights:
            raise FormatError(f"{path}: duplicate parameter {name!r}")
        arr = np.frombuffer(raw[pos:pos + size], dtype="<f4").astype(np.float32).reshape(shape)
        pos += size
        weights[name] = Tensor(arr.copy(), requires_grad=True)
    missing = [n for n in expected if n not in weights]
    if missing:
        raise FormatError(f"{path}: missing parameters {missing[:5]}")
    return HFTModel(cfg, {n: weights[n] for n in expected})


# --------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict = field(default_factory=dict)


def load_config(path) -> RunConfig:
    """Read a JSON or TOML run config.

    Recognised top-level tables: ``model``, ``train`` and ``data``. Missing
    keys take the built-in defaults; unknown keys are rejected.
    """
    p = Path(path)
    try:
        if p.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            with open(p, "rb") as fh:
                raw = tomllib.load(fh)
        else:
            raw = json.loads(p.read_text())
    except ValueError as e:  # includes TOMLDecodeError
        raise FormatError(f"{path}: {e}") from None
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: config must be a mapping")
    unknown = set(raw) - {"model", "train", "data"}
    if unknown:
        raise FormatError(f"{path}: unknown config sections {sorted(unknown)}")
    bad = set(raw.get("model", {})) - {f.name for f in dataclasses.fields(ModelConfig)}
    if bad:
        raise FormatError(f"{path}: unknown model options {sorted(bad)}")
    try:
        model = ModelConfig.from_dict(raw.get("model", {}))
        train = TrainConfig.from_dict(raw.get("train", {}))
    except (TypeError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from None
    if train.stride_mode == "half" and model.n_frames % 4:
        raise FormatError(f"{path}: half-stride inference needs n_frames divisible by 4, "
                          f"got {model.n_frames}")
    return RunConfig(model, train, dict(raw.get("data", {})))

