"""``med2n`` command-line driver.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import PROFILES, load_config
from .errors import Med2nError
from .evaluator import STRATEGIES

log = logging.getLogger("med2n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, help="seed for data generation and every training stage")
    p.add_argument("--out", default="runs/default", help="workspace directory (default: %(default)s)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                   help="override one config key, e.g. --set train.weights.lambda1=0.3")
    p.add_argument("--profile", choices=sorted(PROFILES), help="named starting configuration")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="med2n", description="Multi-expert domain decomposition few-shot toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _common(p)
        return p

    add("gen-data", "render the synthetic benchmark to <out>/data")
    add("pretrain", "supervised pretraining on the source training classes")
    p = add("train-teacher", "episodic training of one domain teacher")
    p.add_argument("--domain", required=True, choices=["source", "target"])
    add("train-student", "distill both teachers into the gated student")
    add("train-mbase", "merged-data baseline")
    p = add("eval", "evaluate a checkpoint on novel target and source test classes")
    p.add_argument("--strategy", default="all", choices=[*STRATEGIES, "all"])
    p.add_argument("--checkpoint", default="student", help="checkpoint name in <out>/checkpoints")
    p = add("gate-stats", "per-block source/target filter counts")
    p.add_argument("--checkpoint", default="student")
    p = add("activation-dump", "export activation maps of one source and one target filter")
    p.add_argument("--image", help=".npy file holding one [3 x H x W] image")
    p.add_argument("--index", type=int, default=0, help="image index within --split (default: %(default)s)")
    p.add_argument("--split", default="target_test")
    p.add_argument("--filter-domain", default="both", choices=["source", "target", "both"])
    p.add_argument("--checkpoint", default="student")
    p = add("pipeline", "run every stage, then evaluation and reports")
    p.add_argument("--no-activation", action="store_true")
    return parser


def dispatch(args) -> object:
    cfg = load_config(args.config, args.overrides, args.profile, args.seed)
    ws = pipeline.Workspace(args.out)
    cmd = args.command
    if cmd == "gen-data":
        return str(pipeline.run_gen_data(cfg, ws))
    if cmd == "pretrain":
        pipeline.run_pretrain(cfg, ws)
        return str(ws.checkpoint("pretrain"))
    if cmd == "train-teacher":
        pipeline.run_teacher(cfg, ws, args.domain)
        return str(ws.checkpoint(pipeline.TEACHER_NAMES[args.domain]))
    if cmd == "train-student":
        pipeline.run_student(cfg, ws)
        return str(ws.checkpoint("student"))
    if cmd == "train-mbase":
        pipeline.run_mbase(cfg, ws)
        return str(ws.checkpoint("m_base"))
    if cmd == "eval":
        doc = pipeline.run_eval(cfg, ws, args.strategy, args.checkpoint)
        return [{k: r[k] for k in ("split", "strategy", "mean_accuracy", "ci95")} for r in doc["reports"]]
    if cmd == "gate-stats":
        return pipeline.run_gate_stats(cfg, ws, args.checkpoint)["blocks"]
    if cmd == "activation-dump":
        image = args.image
        return pipeline.run_activation_dump(cfg, ws, args.index, image, args.filter_domain, args.split,
                                            args.checkpoint)
    if cmd == "pipeline":
        return pipeline.run_pipeline(cfg, ws, activation=not args.no_activation)
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = dispatch(args)
    except Med2nError as exc:
        print(f"med2n: error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
