"""Command line entry point: simulate, prepare-teachers, train, evaluate,
selfcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error. Every
command is deterministic given its flags and seed; CTXSEP_SEED overrides
the configured training seed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .audio import load_manifest, load_wav, save_manifest, synth_toy_corpus
from .features import log_mel
from .teacher import KIND_CODES, TeacherFeatures, mock_teacher, write_ctxf

TEACHER_DIRNAME = "teachers"


def _teacher_relpath(utt_id: str, kind: str, source_idx: int) -> str:
    return f"{TEACHER_DIRNAME}/{utt_id}_{kind}_{source_idx}.ctxf"


def cmd_simulate(args) -> int:
    manifest = synth_toy_corpus(args.num, args.dur, args.seed, args.out)
    print(manifest)
    return 0


def cmd_prepare_teachers(args) -> int:
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    manifest_path = Path(args.manifest)
    root = manifest_path.parent
    entries = load_manifest(manifest_path)
    (root / TEACHER_DIRNAME).mkdir(exist_ok=True)

    written = 0
    missing: list[str] = []
    for entry in entries:
        for i, src_rel in enumerate(entry.sources):
            mel = None
            for kind in kinds:
                rel = _teacher_relpath(entry.id, kind, i)
                if args.mock:
                    if mel is None:
                        mel = log_mel(load_wav(root / src_rel))
                    if kind == "mel":
                        tf = TeacherFeatures(entry.id, "mel", mel)
                    else:
                        tf = mock_teacher(mel, kind, dim_out=args.dim,
                                          seed=args.seed, utterance_id=entry.id)
                    write_ctxf(tf, root / rel)
                    written += 1
                elif not (root / rel).exists():
                    missing.append(rel)
                entry.teachers[f"{kind}_{i}"] = rel
    if missing:
        raise FileNotFoundError(
            "missing teacher files (run the extractor first or pass --mock): "
            + ", ".join(missing))

    tmp = manifest_path.with_suffix(".jsonl.tmp")
    save_manifest(tmp, entries)
    os.replace(tmp, manifest_path)
    action = "wrote" if args.mock else "linked"
    print(f"{action} {written if args.mock else len(entries) * len(kinds) * 2} "
          f"teacher entries for {len(entries)} utterances")
    return 0


def cmd_train(args) -> int:
    from . import config as config_mod
    from . import trainer

    try:
        run = config_mod.load_run_config(args.config)
        stage = args.stage or run.train.stage
        train_cfg = replace(run.train, stage=stage)
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    run_dict = config_mod.run_dict(run.model, train_cfg, run.data)
    if stage == "group":
        result = trainer.train_group(train_cfg, run.model, run.data.manifest,
                                     run.data.out_dir, run_dict=run_dict)
    else:
        result = trainer.train_segregate(train_cfg, run.model, run.data.manifest,
                                         run.data.out_dir, run_dict=run_dict)
    print(f"checkpoint {result.ckpt_path}")
    print(f"best epoch {result.best_epoch}, dev loss {result.best_dev_loss:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_manifest

    report = evaluate_manifest(args.manifest, args.ckpt, out_dir=args.out)
    print(json.dumps(report.aggregate if report.aggregate is not None else {"n": 0}))
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    corrupt = bool(os.environ.get("CTXSEP_SELFCHECK_CORRUPT"))
    return 0 if run_selfcheck(corrupt=corrupt) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxsep",
        description="Context-aware two-stage speech separation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a two-speaker toy corpus")
    p.add_argument("--num", type=int, required=True, help="number of mixtures")
    p.add_argument("--dur", type=float, required=True, help="duration per utterance, seconds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("prepare-teachers",
                       help="materialize teacher features as CTXF files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kinds", required=True,
                   help="comma-separated subset of mel,phoneme,word")
    p.add_argument("--mock", action="store_true",
                   help="use the frozen mock teacher instead of external CTXF files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=64, help="mock teacher output dim")
    p.set_defaults(func=cmd_prepare_teachers)

    p = sub.add_parser("train", help="run one training stage from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", choices=["group", "segregate"],
                   help="override the configured stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default=None, help="directory for report.jsonl/aggregate.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selfcheck", help="run the built-in verification battery")
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "simulate":
        if args.num <= 0:
            parser.error("--num must be a positive integer")
        if args.dur <= 0:
            parser.error("--dur must be positive")
    if args.command == "prepare-teachers":
        kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
        bad = [k for k in kinds if k not in KIND_CODES]
        if bad or not kinds:
            parser.error(f"--kinds must name a subset of {sorted(KIND_CODES)}, got {args.kinds!r}")

    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
