"""Fine-clustering quality as a function of beta = alpha_diff / alpha_same."""

import argparse

from fcdc.runner import ExperimentConfig, format_table, sweep

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    p.add_argument("--values", default="0.5,1.0,1.4,2.0")
    p.add_argument("--out", default="runs/ratio_sweep")
    args = p.parse_args()
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    rows = sweep(cfg, "weight_ratio", [float(v) for v in args.values.split(",")], args.out)
    print(format_table(rows, "weight_ratio"), end="")
