"""Run all four strategies on a small universe and print the table.

SinH trains one heavy model per scenario, MeH fine-tunes the shared model,
MeL distills the fine-tuned model into the hand-designed light model and
Ours distills it into a searched one.  The default config takes about
three minutes; pass ``--config configs/tiny.yaml`` for a smoke run.

    python3 demos/strategy_comparison.py --out /tmp/compare
"""

import argparse
from dataclasses import replace

from longtail import config, pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = config.load_config(args.config) if args.config else pipeline.ExperimentConfig()
    cfg = replace(cfg, seeds=(args.seed,))
    report = pipeline.run_experiment(cfg, args.out)
    print(report.render_table())
    avg = {s: v["auc"] for s, v in report.averages().items()}
    if {"MeH", "Ours"} <= avg.keys():
        print(f"\nOurs - MeH: {avg['Ours'] - avg['MeH']:+.4f} AUC")


if __name__ == "__main__":
    main()
