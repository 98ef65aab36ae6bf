"""Command-line entry point: ``xaidetect <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import experiment as ex

COMMANDS = ("gen-data", "train-detector", "attack", "train-adv", "eval", "transfer", "roc", "bench", "repro")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_MISMATCH = 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags given here override its fields")
    common.add_argument("--seed", type=int, help="root seed (default 0)")
    common.add_argument("--out", help="run directory (default runs/default)")
    common.add_argument("--attack", help="restrict to one attack: pgd, fgsm, apgd, nes, square, "
                                         "adaptive_std, adaptive_xai")
    common.add_argument("--xai", help="restrict to one XAI method: saliency, ixg, ig, gbp")
    common.add_argument("--regime", help="restrict to one fine-tuning regime: full, head")
    common.add_argument("--arch", help="restrict to one deepfake detector: A or B")
    common.add_argument("--black-xai", action="store_true",
                        help="report the black-map ablation columns alongside accuracy")
    common.add_argument("--allow-hash-mismatch", action="store_true",
                        help="use artifacts whose config hash or corpus fingerprint differ from this run")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="xaidetect",
                                 description="XAI-conditioned adversarial-attack detection for deepfake detectors")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "gen-data": "generate the synthetic corpus and its split",
        "train-detector": "train the deepfake detectors",
        "attack": "build attacked twins of the fake clips",
        "train-adv": "train adversarial detectors per XAI method and regime",
        "eval": "evaluate adversarial detectors, including adaptive attacks",
        "transfer": "evaluate detectors across deepfake architectures",
        "roc": "write ROC tables and figures from evaluation scores",
        "bench": "time the full cascade with and without XAI",
        "repro": "run every stage and write the summary tables",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return ap


def _config(args) -> ex.RunConfig:
    over = {k: v for k, v in {
        "seed": args.seed, "out": args.out, "attack": args.attack, "xai": args.xai,
        "regime": args.regime, "arch": args.arch,
    }.items() if v is not None}
    if args.black_xai:
        over["black_xai"] = True
    if args.config:
        return ex.RunConfig.load(args.config, over)
    return ex.RunConfig.from_dict(over)


def _dispatch(run: ex.Run, command: str):
    if command == "gen-data":
        c = ex.gen_data(run)
        return {"videos": len(c), "fingerprint": c.fingerprint()}
    if command == "train-detector":
        return ex.train_detectors(run)
    if command == "attack":
        return ex.run_attacks(run)
    if command == "train-adv":
        return ex.train_adv(run)
    if command == "eval":
        reps = ex.evaluate(run)
        # the black-map ablation is always stored; --black-xai also prints it
        keys = ("accuracy", "accuracy_black", "delta") if run.cfg.black_xai else ("accuracy",)
        return {k: {a: {c: r[c] for c in keys if c in r} for a, r in rep.rows.items()}
                for k, rep in reps.items()}
    if command == "transfer":
        reps = ex.transfer(run)
        return {k: {a: r["accuracy"] for a, r in rep.rows.items()} for k, rep in reps.items()}
    if command == "roc":
        return ex.roc(run)
    if command == "bench":
        res = ex.bench(run)
        return {k: round(v["overhead_pct"], 1) for k, v in res["table"].items()}
    if command == "repro":
        ex.repro(run)
        return (run.root / "reports" / "summary.md").read_text()
    raise AssertionError(command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ex.ConfigError as e:
        print(f"xaidetect: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    run = ex.Run(cfg, allow_mismatch=args.allow_hash_mismatch)
    t0 = time.perf_counter()
    try:
        result = _dispatch(run, args.command)
    except ex.MissingArtifact as e:
        print(f"xaidetect {args.command}: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ex.HashMismatch as e:
        print(f"xaidetect {args.command}: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    if isinstance(result, str):
        print(result, end="")
    else:
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    print(f"[{args.command}] done in {time.perf_counter() - t0:.1f}s, run dir {run.root}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
