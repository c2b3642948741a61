"""Style-marginal distortion at matched content alignment, over several seeds."""

import argparse
import json

import numpy as np

from abms import evaluation as ev


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--chains", type=int, default=200)
    p.add_argument("--M", type=int, default=3)
    p.add_argument("--out", default=None, help="optional JSON-lines output")
    args = p.parse_args()

    results = []
    for seed in range(args.seeds):
        r = ev.interference_study(seed, M=args.M, chains=args.chains)
        results.append(r)
        print(f"seed {seed}: level {r.target_alignment:.3f}  "
              + "  ".join(f"{m}: align {r.alignment[m]:.3f} w {r.scale[m]:.3f} ED {r.style_energy[m]:.5f}"
                          for m in r.style_energy)
              + ("" if r.matched else "  (unmatched)"))
    diffs = np.array([r.style_energy["abms"] - r.style_energy["dsg"] for r in results])
    print(f"median ED difference (abms - dsg): {np.median(diffs):+.2e}")
    print(f"one-sided Wilcoxon p: {ev.interference_test(results):.3f}")
    if args.out:
        with open(args.out, "w") as fh:
            for r in results:
                fh.write(json.dumps(r.__dict__, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
