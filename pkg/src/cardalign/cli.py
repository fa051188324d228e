"""Command-line orchestration of the experiment pipeline.

Stages: synth, pretrain-ecg, train-cmr, align, train-heads, eval, ablate-vit,
plus `config print-defaults`. Each stage reads one config (defaults, then an
optional JSON file, then --set overrides), runs, and writes its artifacts
plus a frozen config under --out.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from cardalign import config as C
from cardalign import pipeline


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cardalign",
                                     description="dual-phase ECG-CMR contrastive learning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (partial; merged over defaults)")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides config seed)")
        p.add_argument("--threads", type=int, help="worker thread limit; 1 = bitwise-reproducible")
        p.add_argument("--precision", choices=["f64", "f32"], help="floating point mode")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. align.tau=0.05")

    p = sub.add_parser("synth", help="generate the synthetic paired cohort")
    common(p)
    p.add_argument("--n", type=int, help="number of subjects")

    p = sub.add_parser("pretrain-ecg", help="masked-autoencoder pretraining of the ECG encoder")
    common(p)

    p = sub.add_parser("train-cmr", help="supervised phenotype training of one volume encoder")
    common(p)
    p.add_argument("--phase", choices=["ed", "es"], required=True)

    p = sub.add_parser("align", help="contrastive cross-modal alignment")
    common(p)
    p.add_argument("--mode", choices=["none", "ed_only", "dual_phase"])

    p = sub.add_parser("train-heads", help="train task heads for one embedding source")
    common(p)
    p.add_argument("--source", choices=["none", "ed_only", "dual_phase"], required=True)

    p = sub.add_parser("eval", help="task-by-source results table and uplift summary")
    common(p)

    p = sub.add_parser("ablate-vit", help="capacity-ladder probe table")
    common(p)

    p = sub.add_parser("config", help="configuration utilities")
    p.add_argument("action", choices=["print-defaults"])
    return parser


def _resolve_config(args) -> C.RunConfig:
    if args.config:
        data = json.loads(open(args.config).read())
    else:
        data = {}
    for override in args.set:
        if "=" not in override:
            raise ValueError(f"--set expects KEY=VALUE, got {override!r}")
        key, value = override.split("=", 1)
        C.set_by_path(data, key, value)
    cfg = C.from_dict(data)
    replacements = {}
    if args.out is not None:
        replacements["out_dir"] = args.out
    if args.seed is not None:
        replacements["seed"] = args.seed
        replacements["cohort"] = dataclasses.replace(cfg.cohort, master_seed=args.seed)
    if args.threads is not None:
        replacements["threads"] = args.threads
    if args.precision is not None:
        replacements["precision"] = args.precision
    if getattr(args, "n", None) is not None:
        base = replacements.get("cohort", cfg.cohort)
        replacements["cohort"] = dataclasses.replace(base, n_subjects=args.n)
    return dataclasses.replace(cfg, **replacements) if replacements else cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "config":
        print(C.to_json(C.RunConfig()))
        return 0
    try:
        cfg = _resolve_config(args)
        if args.command == "synth":
            path = pipeline.run_synth(cfg)
        elif args.command == "pretrain-ecg":
            path = pipeline.run_pretrain_ecg(cfg)
        elif args.command == "train-cmr":
            path = pipeline.run_train_cmr(cfg, args.phase)
        elif args.command == "align":
            path = pipeline.run_align(cfg, args.mode)
        elif args.command == "train-heads":
            path = pipeline.run_train_heads(cfg, args.source)
        elif args.command == "eval":
            path = pipeline.run_eval(cfg)
        elif args.command == "ablate-vit":
            path = pipeline.run_ablate(cfg)
        else:  # pragma: no cover
            raise ValueError(f"unknown command {args.command}")
    except (pipeline.PipelineError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
