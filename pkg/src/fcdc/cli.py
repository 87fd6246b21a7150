"""Command-line entry point.

Every command prints a JSON result on stdout and exits 0, or prints
``{"error": ..., "type": ...}`` on stderr and exits nonzero.
Set FCDC_LOG_LEVEL (DEBUG, INFO, WARNING) to control log output on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import runner
from .contrastive import ContrastiveConfig
from .data import SyntheticSpec, generate_synthetic, load_spec, save_jsonl
from .gradcheck import run_gradcheck

EXIT_FAILED_CHECK = 1
EXIT_ERROR = 2


def _gen_data(args) -> dict:
    spec = load_spec(args.spec) if args.spec else SyntheticSpec()
    corpus = generate_synthetic(spec)
    save_jsonl(corpus, args.out)
    return {"documents": len(corpus), "coarse": corpus.num_coarse, "fine": corpus.num_fine, "out": args.out}


def _load_config(path) -> runner.ExperimentConfig:
    return runner.ExperimentConfig.from_json(path) if path else runner.ExperimentConfig()


def _train(args) -> dict:
    cfg = _load_config(args.config)
    report, *_ = runner.train(cfg, args.out)
    return {"config_hash": report.config_hash, "final": report.final, "out": args.out}


def _eval(args) -> dict:
    return runner.evaluate_checkpoint(args.checkpoint, args.data, k=args.k, seed_kmeans=args.seed_kmeans)


def _sweep(args) -> dict:
    cfg = _load_config(args.config)
    values = [float(v) if args.axis == "weight_ratio" else int(v) for v in args.values.split(",")]
    rows = runner.sweep(cfg, args.axis, values, args.out)
    print(runner.format_table(rows, args.axis), file=sys.stderr)
    return {"axis": args.axis, "rows": rows}


def _export(args) -> dict:
    params, _, corpus = runner.load_for_eval(args.checkpoint, args.data)
    n = runner.export_embeddings(params, corpus, args.out)
    return {"lines": n, "out": args.out}


def _gradcheck(args) -> dict:
    overrides = json.loads(Path(args.config).read_text()) if args.config else {}
    fields = ContrastiveConfig.__dataclass_fields__
    unknown = set(overrides) - set(fields) - {"seeds", "tolerance"}
    if unknown:
        raise ValueError(f"unknown gradcheck config keys: {sorted(unknown)}")
    cfg = ContrastiveConfig(**{k: v for k, v in overrides.items() if k in fields})
    tolerance = args.tolerance if args.tolerance is not None else overrides.get("tolerance", 1e-4)
    results = run_gradcheck(range(overrides.get("seeds", 3)), tolerance, cfg)
    failed = [r.name for r in results if not r.passed]
    return {"passed": not failed, "failed": failed, "tolerance": tolerance,
            "checks": [asdict(r) for r in results]}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcdc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic hierarchical corpus as JSONL")
    s.add_argument("--spec", help="JSON synthetic spec (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_gen_data)

    s = sub.add_parser("train", help="train and evaluate one configuration")
    s.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a corpus file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int, help="cluster count (defaults to the number of fine labels)")
    s.add_argument("--seed-kmeans", type=int)
    s.set_defaults(fn=_eval)

    s = sub.add_parser("sweep", help="train one run per value of a swept setting")
    s.add_argument("--config")
    s.add_argument("--axis", required=True, choices=runner.SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out", help="directory for per-cell artifacts and the results table")
    s.set_defaults(fn=_sweep)

    s = sub.add_parser("export-embeddings", help="write shallow and deep features per document as JSONL")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_export)

    s = sub.add_parser("gradcheck", help="finite-difference and gradient-law checks")
    s.add_argument("--config", help="JSON with contrastive settings plus optional 'seeds' and 'tolerance'")
    s.add_argument("--tolerance", type=float)
    s.set_defaults(fn=_gradcheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FCDC_LOG_LEVEL", "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        result = args.fn(args)
    except Exception as e:  # surfaced as a machine-readable error object
        print(json.dumps({"error": str(e), "type": type(e).__name__, "command": args.command}), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(result, indent=2, default=float))
    if result.get("passed") is False:
        return EXIT_FAILED_CHECK
    return 0


if __name__ == "__main__":
    sys.exit(main())
