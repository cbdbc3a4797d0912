"""Search a light model for one scenario under a FLOPs budget.

The FLOPs penalty is off by default so only the budget shapes the result.
A heavy attention model is trained on the scenario and used as the teacher.
The supernet search runs once; the derived genotype is then extracted for a
few budgets, so the printout shows how the architecture shrinks as the
bound tightens.

    python3 demos/budgeted_search.py --scenario 2
"""

import argparse
from dataclasses import replace

from longtail import budgetnas as bn
from longtail import flopsmeter as fm
from longtail import nets
from longtail.pipeline import ExperimentConfig
from longtail.synthgen import generate_scenarios


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--lam-ratio", type=float, default=0.0, help="FLOPs penalty weight; 0 leaves only the hard budget")
    args = ap.parse_args()

    cfg = ExperimentConfig()
    ds = generate_scenarios(cfg.universe, args.seed)[args.scenario]
    print(f"scenario {args.scenario}: {ds.counts()}")

    heavy = cfg.arch_for(cfg.heavy)
    teacher = nets.train_model(nets.build_model(heavy, args.seed), ds.part("train"), replace(cfg.train, seed=args.seed))
    test = ds.part("test")
    print(f"teacher AUC {nets.auc(nets.predict(teacher, test), test.labels):.4f}, encoder FLOPs {teacher.flops()['encoder']}")

    base, space = cfg.arch_for(cfg.light), cfg.space()
    nas = replace(cfg.nas, epochs=args.epochs, warmup_epochs=args.epochs // 2, lam_ratio=args.lam_ratio, seed=args.seed)
    state = bn.run_search(space, base, ds.part("train"), nas, teacher)

    lo, hi = fm.space_min_flops(space, base.seq_len), fm.space_max_flops(space, base.seq_len)
    for frac in (1.0, 0.5, 0.25, 0.1):
        budget = max(lo, int(frac * hi))
        g = bn.derive_genotype(state.aw, space, budget, base.seq_len)
        art = bn.train_light(g, ds.part("train"), teacher, replace(cfg.light_train, seed=args.seed), base, nas.delta, budget)
        score = nets.auc(nets.predict(art, test), test.labels)
        print(f"budget {budget:>7d}  flops {fm.genotype_flops(g, base.seq_len).total:>7d}  AUC {score:.4f}  {g.describe()}")


if __name__ == "__main__":
    main()
