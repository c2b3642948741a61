"""Relative alignment error against the number of lookahead draws."""

import argparse

from abms import evaluation as ev


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--M", type=int, nargs="+", default=[1, 3, 5])
    p.add_argument("--w-max", type=float, default=0.3)
    args = p.parse_args()

    wins = 0
    for seed in range(args.seeds):
        rel = ev.saturation_study(seed, args.M, args.w_max)
        print(f"seed {seed}: " + "  ".join(f"M={M}: {v:.4f}" for M, v in rel.items()))
        if {1, 3, 5} <= set(rel):
            wins += (rel[1] - rel[3]) > (rel[3] - rel[5])
    print(f"seeds where 1->3 gains more than 3->5: {wins}/{args.seeds}")


if __name__ == "__main__":
    main()
