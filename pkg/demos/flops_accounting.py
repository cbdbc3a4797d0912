"""Count FLOPs for the hand-designed models and the searched space.

Prints the per-part breakdown of the heavy and light encoders, the cheapest
and most expensive genotype of the search space, and how the cost of a
single op changes with kernel size and sequence length.

    python3 demos/flops_accounting.py
"""

import argparse

import numpy as np

from longtail import flopsmeter as fm
from longtail import nets
from longtail.space import Genotype, OpSpec, SpaceSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seq-len", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    for name, arch in [("heavy", nets.heavy_arch("attention")), ("light", nets.light_arch("attention"))]:
        parts = fm.arch_flops(arch)
        print(f"{name:6s}", "  ".join(f"{k}={v}" for k, v in parts.items()))

    space = SpaceSpec(n_layers=3, channels=15)
    lo, hi = fm.space_min_flops(space, args.seq_len), fm.space_max_flops(space, args.seq_len)
    print(f"\nsearch space: {space.n_genotypes()} genotypes, encoder FLOPs in [{lo}, {hi}]")
    print("most expensive:", fm.space_max_genotype(space, args.seq_len).describe())

    rng = np.random.default_rng(args.seed)
    g = Genotype.from_decisions(space, [rng.integers(s) for s in space.decision_sizes()])
    rep = fm.genotype_flops(g, args.seq_len, space)
    print(f"\nrandom genotype {g.describe()}")
    print("  ", rep.to_dict())

    # a pointwise conv is a dense layer applied at every position
    print("\nconv1d cost by kernel size, 15 channels:")
    for k in (1, 3, 5, 7):
        row = [fm.op_flops(OpSpec("conv1d", k, 1, 15, 15), T) for T in (8, 16, 32)]
        print(f"  k={k}: " + "  ".join(f"T={T}:{f:>7d}" for T, f in zip((8, 16, 32), row)))


if __name__ == "__main__":
    main()
