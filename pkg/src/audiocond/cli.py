"""Command-line interface: extract / train / generate / evaluate.

Exit codes: 0 success, 2 user or input error, 3 numeric failure.
Values resolve as defaults < --config file < explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dataio
from .checkpoint import load_checkpoint, save_checkpoint
from .conditioners import (
    extract_dynamics,
    extract_melody,
    extract_rhythm,
    DynamicsCondition,
    MelodyCondition,
    RhythmCondition,
)
from .errors import DivergenceError, InvalidInputError, UserInputError
from .guidance import GuidanceScales
from .metrics import (
    MELODY_CHANCE_LEVEL,
    beat_times_from_audio,
    dynamics_correlation,
    melody_accuracy,
    rhythm_f1,
    smoothness_value,
)
from .model import Ablations, ModelConfig, build_model
from .pipeline import generate
from .tensorio import read_cond, write_cond
from .training import ADAPTER_CHOICES, AdapterTrainer, prepare_clips


@dataclass
class RunConfig:
    """Serializable run settings; flags win over config-file values."""

    task: str = "generate"
    steps: int = 50
    seed: int = 0
    lambda_text: float = 7.0
    lambda_attr: float = 2.0
    lambda_audio: float = 1.0
    mode: str = "plain"
    seconds: float = 4.0
    keep: list[str] = field(default_factory=list)
    attr_span: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))


def _parse_span(text: str) -> tuple[float, float]:
    try:
        start, end = text.split(":")
        span = (float(start), float(end))
    except ValueError as e:
        raise UserInputError(f"bad span {text!r}, expected start:end seconds") from e
    if span[0] < 0 or span[1] <= span[0]:
        raise UserInputError(f"bad span {text!r}: need 0 <= start < end")
    return span


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


# --- extract ------------------------------------------------------------------


def cmd_extract(args) -> int:
    paths = []
    if os.path.isdir(args.inp):
        paths = sorted(
            os.path.join(args.inp, f) for f in os.listdir(args.inp) if f.lower().endswith(".wav")
        )
    elif os.path.exists(args.inp):
        paths = [args.inp]
    else:
        raise InvalidInputError(f"input not found: {args.inp}")
    if not paths:
        raise InvalidInputError(f"no WAV files under {args.inp}")
    os.makedirs(args.out, exist_ok=True)
    for path in paths:
        audio = dataio.load_audio(path)[0]
        stem = _stem(path)
        mel = extract_melody(audio)
        write_cond(os.path.join(args.out, f"{stem}.melody.cond"), mel.frames, "melody", mel.frame_rate)
        dyn = extract_dynamics(audio)
        write_cond(os.path.join(args.out, f"{stem}.dynamics.cond"), dyn.curve, "dynamics", dyn.frame_rate)
        if args.rhythm_provider == "file":
            rhy = extract_rhythm(provider="file", path=args.rhythm_file)
        else:
            rhy = extract_rhythm(audio)
        write_cond(os.path.join(args.out, f"{stem}.rhythm.cond"), rhy.probs, "rhythm", rhy.frame_rate)
        print(f"extracted {stem}: melody/dynamics/rhythm -> {args.out}")
    return 0


# --- train --------------------------------------------------------------------


def cmd_train(args) -> int:
    records = dataio.read_manifest(args.manifest)
    records = [r for r in records if r.split == "train"] or records
    resume_meta = None
    if args.resume:
        model, codec, resume_meta, extras = load_checkpoint(args.resume)
        cfg = model.cfg
    else:
        cfg = ModelConfig(ablations=Ablations.from_flags(args.ablate))
        model, codec = build_model(cfg, seed=args.seed)
    clips = prepare_clips(records, cfg, codec, clip_seconds=args.clip_seconds, adapter=args.adapter)
    trainer = AdapterTrainer(
        model,
        clips,
        args.adapter,
        seed=args.seed,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        cond_dropout=not args.no_cond_dropout,
        random_masking=not args.no_random_masking,
    )
    if resume_meta is not None:
        trainer.restore_state(extras, resume_meta["trainer"])

    def save(path):
        opt_tensors, trainer_meta = trainer.export_state()
        save_checkpoint(
            path,
            model,
            codec,
            meta={
                "adapter": args.adapter,
                "trainer": trainer_meta,
                "train_args": {
                    "lr": args.lr,
                    "weight_decay": args.weight_decay,
                    "batch_size": args.batch_size,
                    "clip_seconds": args.clip_seconds,
                    "seed": args.seed,
                    "ablate": args.ablate,
                },
            },
            extra_tensors=opt_tensors,
        )

    try:
        for step in range(args.steps):
            loss = trainer.step()
            if (step + 1) % max(1, args.steps // 10) == 0:
                print(f"step {trainer.step_count}: loss {loss:.4f}")
    except DivergenceError:
        save(args.out + ".diverged")
        raise
    save(args.out)
    with open(args.out + ".losses.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(trainer.losses, start=1):
            writer.writerow([i, f"{loss:.6f}"])
    print(f"saved checkpoint {args.out} ({trainer.step_count} steps)")
    return 0


# --- generate -----------------------------------------------------------------


def _load_condition(path, cls, attr_name):
    arr, header = read_cond(path)
    return cls(**{attr_name: arr, "frame_rate": float(header.get("frame_rate", 0.0))})


def cmd_generate(args) -> int:
    run = RunConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            run = RunConfig.from_json(f.read())
    for name in ("task", "steps", "seed", "lambda_text", "lambda_attr", "lambda_audio",
                 "mode", "seconds"):
        value = getattr(args, name)
        if value is not None:
            setattr(run, name, value)
    if args.keep:
        run.keep = args.keep
    if args.attr_span:
        run.attr_span = args.attr_span

    model, codec, meta, _ = load_checkpoint(args.ckpt)
    reference = None
    if args.reference:
        reference = dataio.load_audio(args.reference)[0]
    elif run.task in ("inpaint", "outpaint"):
        raise InvalidInputError(f"task {run.task!r} requires --reference")
    melody = _load_condition(args.melody, MelodyCondition, "frames") if args.melody else None
    dynamics = _load_condition(args.dynamics, DynamicsCondition, "curve") if args.dynamics else None
    rhythm = _load_condition(args.rhythm, RhythmCondition, "probs") if args.rhythm else None

    result = generate(
        model,
        codec,
        caption=args.caption,
        task=run.task,
        seconds=None if reference is not None else run.seconds,
        reference_audio=reference,
        keep_spans=[_parse_span(s) for s in run.keep] or None,
        attr_spans=[_parse_span(s) for s in run.attr_span] or None,
        melody=melody,
        dynamics=dynamics,
        rhythm=rhythm,
        scales=GuidanceScales(run.lambda_text, run.lambda_attr, run.lambda_audio),
        steps=run.steps,
        seed=run.seed,
        mode="naive_masking" if run.mode == "naive-masking" else run.mode,
        dump_attention=bool(args.dump_attention),
    )
    dataio.save_wav(args.out, result.audio)
    print(f"wrote {args.out} ({len(result.audio) / dataio.TARGET_RATE:.2f}s)")
    if args.dump_attention:
        os.makedirs(args.dump_attention, exist_ok=True)
        for amap in result.attention_maps or []:
            name = f"attn_{amap.kind}_layer{amap.layer_index}_head{amap.head_index}.cond"
            write_cond(os.path.join(args.dump_attention, name), amap.weights, "attention")
        print(f"wrote {len(result.attention_maps or [])} attention maps to {args.dump_attention}")
    return 0


# --- evaluate -----------------------------------------------------------------


def cmd_evaluate(args) -> int:
    def wavs(d):
        if not os.path.isdir(d):
            raise InvalidInputError(f"not a directory: {d}")
        return {_stem(f): os.path.join(d, f) for f in os.listdir(d) if f.lower().endswith(".wav")}

    refs, gens = wavs(args.references), wavs(args.generated)
    orphans = sorted(set(refs) ^ set(gens))
    if not refs or orphans:
        raise InvalidInputError(f"unpaired clips: {orphans or 'no input files'}")

    report = {"clips": {}, "means": {}, "notes": {"melody_chance_level": MELODY_CHANCE_LEVEL}}
    for stem in sorted(refs):
        ref = dataio.load_audio(refs[stem])[0]
        gen = dataio.load_audio(gens[stem])[0]
        row = {
            "melody_accuracy": melody_accuracy(ref, gen),
            "dynamics_correlation": dynamics_correlation(gen, extract_dynamics(ref)),
            "rhythm_f1": rhythm_f1(beat_times_from_audio(ref), gen),
        }
        if args.boundary is not None:
            row["smoothness_value"] = smoothness_value(gen, args.boundary)
        report["clips"][stem] = row
    keys = next(iter(report["clips"].values())).keys()
    for k in keys:
        report["means"][k] = float(np.mean([c[k] for c in report["clips"].values()]))
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["clip", *keys])
            for stem, row in sorted(report["clips"].items()):
                writer.writerow([stem, *[f"{row[k]:.6f}" for k in keys]])
    print(json.dumps(report["means"], indent=2, sort_keys=True))
    print(f"wrote {args.out}")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="audiocond", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("extract", help="extract melody/dynamics/rhythm conditions from WAVs")
    ex.add_argument("--in", dest="inp", required=True, help="input WAV file or directory")
    ex.add_argument("--out", required=True, help="output directory for .cond files")
    ex.add_argument("--rhythm-provider", choices=("builtin", "file"), default="builtin")
    ex.add_argument("--rhythm-file", help="precomputed rhythm .cond (provider=file)")
    ex.set_defaults(func=cmd_extract)

    tr = sub.add_parser("train", help="fine-tune one adapter pipeline on a manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--adapter", choices=ADAPTER_CHOICES, required=True)
    tr.add_argument("--steps", type=int, default=1000)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--batch-size", type=int, default=8)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--weight-decay", type=float, default=1e-2)
    tr.add_argument("--clip-seconds", type=float, default=4.0)
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--no-cond-dropout", action="store_true",
                    help="disable the 30%%/50%% condition dropout (overfit runs)")
    tr.add_argument("--no-random-masking", action="store_true",
                    help="disable random 10-90%% condition masking (overfit runs)")
    tr.add_argument("--ablate", action="append", default=[],
                    choices=["no-rope", "no-extractor", "no-cnn", "double-heads",
                             "literal-eq9", "no-value-rotation"])
    tr.set_defaults(func=cmd_train)

    ge = sub.add_parser("generate", help="sample audio from a checkpoint")
    ge.add_argument("--ckpt", required=True)
    ge.add_argument("--caption", default="")
    ge.add_argument("--out", required=True, help="output WAV path")
    ge.add_argument("--task", choices=("generate", "inpaint", "outpaint"), default=None)
    ge.add_argument("--reference", help="reference WAV for inpaint/outpaint/naive-masking")
    ge.add_argument("--keep", action="append", default=[], help="kept span start:end seconds (repeatable)")
    ge.add_argument("--attr-span", action="append", default=[], help="attribute-visible span start:end (repeatable)")
    ge.add_argument("--melody", help=".cond melody condition")
    ge.add_argument("--dynamics", help=".cond dynamics condition")
    ge.add_argument("--rhythm", help=".cond rhythm condition")
    ge.add_argument("--seconds", type=float, default=None)
    ge.add_argument("--steps", type=int, default=None)
    ge.add_argument("--seed", type=int, default=None)
    ge.add_argument("--lambda-text", type=float, default=None)
    ge.add_argument("--lambda-attr", type=float, default=None)
    ge.add_argument("--lambda-audio", type=float, default=None)
    ge.add_argument("--mode", choices=("plain", "naive-masking"), default=None)
    ge.add_argument("--dump-attention", help="directory for attention-map .cond files")
    ge.add_argument("--config", help="RunConfig JSON file (flags win on conflict)")
    ge.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", help="objective metrics over (reference, generated) pairs")
    ev.add_argument("--references", required=True)
    ev.add_argument("--generated", required=True)
    ev.add_argument("--out", required=True, help="JSON report path")
    ev.add_argument("--csv", help="optional per-clip CSV")
    ev.add_argument("--boundary", type=float, help="smoothness boundary in seconds")
    ev.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UserInputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
