"""Command-line entry point: ``voxrecon <verb> [--config PATH] [--seed N] [--out DIR] [--mode MODE]``.

Exit codes: 0 success, 2 configuration error, 3 missing artifact, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness as H
from .checkpoint import CheckpointError
from .synth import DatasetError
from .tensor import NonFiniteError, VXDFormatError
from .training import TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _u64(text: str) -> int:
    val = int(text, 0)
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits, got {text}")
    return val


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults if omitted)")
    common.add_argument("--seed", type=_u64, help="override the experiment seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--mode", choices=list(H.ABLATION_MODES), help="ablation mode")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="voxrecon", description="Synthetic voxel-to-image reconstruction toolkit.")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("synth", parents=[common], help="build the synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("which", choices=list(H.MODEL_NAMES) + ["all"])
    t.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    sub.add_parser("reconstruct", parents=[common], help="reconstruct the test set")
    sub.add_parser("evaluate", parents=[common], help="score reconstructions")
    sub.add_parser("ablate", parents=[common], help="run all five ablation modes")
    i = sub.add_parser("interpret", parents=[common], help="voxel contribution map")
    i.add_argument("which", nargs="?", default="structural", choices=list(H.FIRST_LAYER))
    i.add_argument("--checkpoint", help="checkpoint path (defaults to the run's)")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--instances", type=int, default=20)
    return p


def run(args) -> int:
    cfg = H.load_config(args.config, args.seed, args.out, args.mode)
    if args.verb == "synth":
        path = H.cmd_synth(cfg)
        print(f"dataset written: {path}")
    elif args.verb == "train":
        for which in H.MODEL_NAMES if args.which == "all" else [args.which]:
            path = H.cmd_train(cfg, which, resume=args.resume)
            print(f"{which} checkpoint: {path}")
    elif args.verb == "reconstruct":
        path = H.cmd_reconstruct(cfg)
        print(f"{cfg.mode}: reconstructions in {path}")
    elif args.verb == "evaluate":
        report = H.cmd_evaluate(cfg)
        print(H.markdown_table([report]), end="")
    elif args.verb == "ablate":
        for mode, note in H.ABLATION_NOTES.items():
            print(f"# {mode}: {note}")
        reports = H.cmd_ablate(cfg)
        print(H.markdown_table(reports), end="")
    elif args.verb == "interpret":
        path = H.cmd_interpret(cfg, args.which, args.checkpoint)
        print(f"contribution map: {path}")
    elif args.verb == "gradcheck":
        worst = H.cmd_gradcheck(cfg, args.instances)
        failed = [k for k, v in worst.items() if not v < 1e-4]
        for k, v in worst.items():
            print(f"{'ok  ' if v < 1e-4 else 'FAIL'} {k:20s} {v:.2e}")
        if failed:
            print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
            return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (H.MissingArtifactError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (H.ConfigError, DatasetError, CheckpointError, VXDFormatError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
