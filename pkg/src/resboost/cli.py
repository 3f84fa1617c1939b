"""Command line entry point.

Verbs map onto pipeline stages. Each one reads the config (for data and
settings) plus whatever earlier stages left in the bundle directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resboost",
                                description="Residual boosting of a frozen scorer with guarded experts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def staged(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="pipeline JSON config")
        s.add_argument("--bundle", help="bundle directory (default: config output_dir)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--workers", type=int, help="parallel chain workers")
        return s

    staged("train-legacy", "fit or load the frozen model; writes legacy.json and schema.json")
    staged("regions", "mine hard regions; writes regions.json")
    staged("evolve", "run one chain per region; writes experts/ and chains/")
    staged("aggregate", "train the gate; writes aggregate.json")
    staged("eval", "compare legacy and final on validation; writes eval.* and scores.csv")
    staged("pipeline", "run every stage in order")
    pr = sub.add_parser("predict", help="score a CSV with a saved bundle")
    pr.add_argument("--bundle", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--output", required=True)
    return p


def _run_stage(args) -> None:
    from . import orchestrator as O

    try:
        cfg = O.load_config(args.config, seed=args.seed, workers=args.workers)
    except O.ConfigError as err:
        raise O.StageError("config", str(err)) from None
    out = Path(args.bundle or cfg.output_dir)
    if args.verb == "pipeline":
        res = O.run_pipeline(cfg, out)
        print(Path(out / "eval.txt").read_text(encoding="utf-8"), end="")
        print(f"bundle written to {res.out} in {res.seconds:.1f}s")
        return
    out.mkdir(parents=True, exist_ok=True)
    inp = O.load_inputs(cfg)
    if args.verb == "train-legacy":
        O.write_json(out / "config.json", {}, cfg)
        O.run_legacy(cfg, inp, out)
        return
    frozen = O.load_legacy(out)
    if args.verb == "regions":
        regions, _ = O.run_regions(cfg, inp, frozen, out)
        for r in regions:
            print(f"region {r.id}: {r.describe()}  C={r.priority:.4f} n={r.coverage}")
        return
    if args.verb == "evolve":
        regions, plans = O.load_regions(cfg, inp, out)
        experts = O.run_evolve(cfg, inp, frozen, regions, plans, out)
        for e in experts:
            print(f"expert {e.region_id}: {'null' if e.is_null else 'accepted'}")
        return
    experts = O.load_all_experts(inp, out)
    if args.verb == "aggregate":
        gate = O.run_aggregate(cfg, inp, frozen, experts, out)
        print(f"fallback_flag={gate.fallback} {gate.gate_val}")
        return
    gate = O.load_gate(out)
    O.run_eval(cfg, inp, frozen, experts, gate, out)
    print((out / "eval.txt").read_text(encoding="utf-8"), end="")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.verb == "predict":
        # the scoring path stays free of optimizer and provider imports
        from .serve import predict

        try:
            n = predict(args.bundle, args.input, args.output)
        except Exception as err:
            print(f"[predict] {type(err).__name__}: {err}", file=sys.stderr)
            return 1
        print(f"scored {n} rows -> {args.output}")
        return 0
    from .orchestrator import StageError

    try:
        _run_stage(args)
    except StageError as err:
        print(str(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
