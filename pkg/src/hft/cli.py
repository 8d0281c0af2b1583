"""Command-line entry point: ``hft <subcommand> ...``.

Results go to stdout (JSON, CSV or files named by ``--output``); progress
and diagnostics go to stderr. Exit codes: 0 success, 1 usage error,
2 runtime error. ``HFT_LOG`` sets the logging level (default WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

logger = logging.getLogger("hft")

NOTE_SUFFIXES = (".json", ".mid", ".midi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _threads(value: int | None) -> int:
    return value or os.cpu_count() or 1


# --------------------------------------------------------------------------
# data discovery


def _notes_for(wav: Path) -> Path | None:
    for ext in NOTE_SUFFIXES:
        cand = wav.with_suffix(ext)
        if cand.exists():
            return cand
    return None


def paired_files(directory) -> list[tuple[Path, Path]]:
    """(wav, notes) pairs sharing a stem inside ``directory``."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    pairs = []
    for wav in sorted(d.glob("*.wav")):
        notes = _notes_for(wav)
        if notes is None:
            logger.warning("no note file next to %s, skipped", wav)
            continue
        pairs.append((wav, notes))
    if not pairs:
        raise ValueError(f"{d}: no wav/notes pairs found")
    return pairs


def _load_clips(pairs, model_cfg):
    from .io import read_notes, read_wav
    from .training import prepare_clip

    return [prepare_clip(read_wav(w), read_notes(n), model_cfg, w.stem) for w, n in pairs]


def _synthetic_clips(synth: dict, model_cfg, seed: int):
    from .synth import make_synthetic_dataset
    from .training import prepare_clip

    synth = dict(synth)
    lo = model_cfg.pitch_min
    synth.setdefault("pitch_range", (lo, lo + model_cfg.n_pitches - 1))
    synth.setdefault("seed", seed)
    synth.setdefault("n_clips", 8)
    synth.setdefault("clip_seconds", 10.0)
    synth["pitch_range"] = tuple(synth["pitch_range"])
    data = make_synthetic_dataset(**synth)
    return [prepare_clip(w, n, model_cfg, f"synth{i}") for i, (w, n) in enumerate(data)]


# --------------------------------------------------------------------------
# subcommands


def cmd_features(args) -> int:
    from .audio import features
    from .io import read_wav, write_features

    spec = features(read_wav(args.input), n_mels=args.n_bins)
    write_features(spec.data, args.output)
    logger.info("wrote %d x %d features to %s", spec.n_frames, spec.n_bins, args.output)
    print(json.dumps({"frames": spec.n_frames, "bins": spec.n_bins, "output": str(args.output)}))
    return 0


def cmd_transcribe(args) -> int:
    from .inference import transcribe
    from .io import load_checkpoint, read_wav, write_notes

    model = load_checkpoint(args.checkpoint)
    notes = transcribe(read_wav(args.input), model, args.stride, threads=_threads(args.threads))
    logger.info("%d notes", len(notes))
    if args.output:
        write_notes(notes, args.output)
    else:
        print(json.dumps([n.to_dict() for n in notes], indent=1))
    return 0


def _note_sets(ref: Path, est: Path):
    from .io import read_notes

    if ref.is_dir() != est.is_dir():
        raise ValueError("--ref and --est must both be files or both be directories")
    if not ref.is_dir():
        return [ref.stem], [(read_notes(est), read_notes(ref))]
    names, pairs = [], []
    for r in sorted(p for p in ref.iterdir() if p.suffix.lower() in NOTE_SUFFIXES):
        e = next((est / (r.stem + ext) for ext in NOTE_SUFFIXES if (est / (r.stem + ext)).exists()), None)
        if e is None:
            logger.warning("no estimate for %s, skipped", r.name)
            continue
        names.append(r.stem)
        pairs.append((read_notes(e), read_notes(r)))
    if not pairs:
        raise ValueError("no matching reference/estimate files")
    return names, pairs


def cmd_eval(args) -> int:
    from .metrics import evaluate_recordings

    names, pairs = _note_sets(Path(args.ref), Path(args.est))
    report = evaluate_recordings(pairs, names=names, threads=_threads(args.threads))
    print(report.to_json())
    print(report.table(), file=sys.stderr)
    return 0


def cmd_diagnose(args) -> int:
    from .inference import position_error_profile
    from .io import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    if args.data:
        pairs = paired_files(args.data)
    else:
        if not args.input or len(args.input) != len(args.ref or []):
            raise UsageError("diagnose needs --data DIR or matching --input/--ref pairs")
        pairs = list(zip(map(Path, args.input), map(Path, args.ref)))
    clips = _load_clips(pairs, model.cfg)
    profile = position_error_profile(model, [(c.framed, c.targets) for c in clips])
    csv = profile.to_csv()
    if args.output:
        Path(args.output).write_text(csv)
    else:
        sys.stdout.write(csv)
    return 0


def cmd_train(args) -> int:
    from .io import load_config, save_checkpoint
    from .model import HFTModel, ModelConfig
    from .training import TrainConfig, fit

    if args.config:
        run = load_config(args.config)
        model_cfg, train_cfg, data = run.model, run.train, run.data
    else:
        model_cfg, train_cfg, data = ModelConfig(), TrainConfig(), {}
    overrides = {k: v for k, v in (("seed", args.seed), ("lr", args.lr), ("batch_size", args.batch_size),
                                   ("epochs", args.epochs), ("max_steps", args.max_steps),
                                   ("stride_mode", args.stride)) if v is not None}
    train_cfg = dataclasses.replace(train_cfg, **overrides)

    train_dir = args.train_dir or data.get("train_dir")
    valid_dir = args.valid_dir or data.get("valid_dir")
    if train_dir:
        train_clips = _load_clips(paired_files(train_dir), model_cfg)
    else:
        train_clips = _synthetic_clips(data.get("synthetic", {}), model_cfg, train_cfg.seed)
    valid_clips = _load_clips(paired_files(valid_dir), model_cfg) if valid_dir else None

    log_fh = open(args.log, "w") if args.log else None

    def on_epoch(record):
        line = {k: v for k, v in record.items() if k != "seconds"}
        print(json.dumps(line, sort_keys=True), flush=True)
        logger.info("epoch %d took %.1fs", record["epoch"], record["seconds"])
        if log_fh:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()

    try:
        model = HFTModel.create(model_cfg, seed=train_cfg.seed)
        result = fit(model, train_clips, train_cfg, valid_clips, on_epoch=on_epoch)
    finally:
        if log_fh:
            log_fh.close()
    if args.output:
        save_checkpoint(result.model, args.output)
    print(json.dumps({"best_epoch": result.best_epoch, "best_score": result.best_score,
                      "steps": result.steps, "checkpoint": args.output}, sort_keys=True))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hft", description="Piano transcription with a hierarchical frequency-time transformer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")
        sp.add_argument("--seed", type=int, default=None, help="seed for every random choice")

    s = sub.add_parser("transcribe", help="audio to notes")
    s.add_argument("--input", required=True, help="WAV file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--stride", choices=("full", "half"), default="half")
    s.add_argument("--output", help=".mid/.midi or .json path (default: JSON on stdout)")
    common(s)
    s.set_defaults(func=cmd_transcribe)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="JSON or TOML run config")
    s.add_argument("--train-dir", help="directory of WAV files with same-stem note files")
    s.add_argument("--valid-dir", help="validation directory (default: the training clips)")
    s.add_argument("--output", help="checkpoint path for the best model")
    s.add_argument("--log", help="JSON-lines epoch log file")
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--stride", choices=("full", "half"), help="validation stride")
    common(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score estimated notes against references")
    s.add_argument("--ref", required=True, help="note file or directory")
    s.add_argument("--est", required=True, help="note file or directory")
    common(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("diagnose", help="per-position error profile as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="directory of WAV files with same-stem note files")
    s.add_argument("--input", action="append", help="WAV file (repeatable)")
    s.add_argument("--ref", action="append", help="note file for the matching --input")
    s.add_argument("--output", help="CSV path (default: stdout)")
    common(s)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("features", help="dump the log-mel matrix")
    s.add_argument("--input", required=True, help="WAV file")
    s.add_argument("--output", required=True, help="HFTF output path")
    s.add_argument("--n-bins", type=int, default=256)
    common(s)
    s.set_defaults(func=cmd_features)
    return p


def _setup_logging() -> None:
    level = os.environ.get("HFT_LOG", "WARNING").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def run(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except KeyboardInterrupt:
        return 2
    except Exception as e:
        logger.debug("failure", exc_info=True)
        print(f"hft: error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
