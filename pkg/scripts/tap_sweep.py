"""Fine-clustering quality as a function of the tap layer on a 4-layer encoder."""

import argparse

from fcdc.runner import ExperimentConfig, format_table, sweep

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    p.add_argument("--values", default="1,2,3")
    p.add_argument("--out", default="runs/tap_sweep")
    args = p.parse_args()
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    rows = sweep(cfg, "tap_layer", [int(v) for v in args.values.split(",")], args.out)
    print(format_table(rows, "tap_layer"), end="")
