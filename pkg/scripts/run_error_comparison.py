"""Paired estimator-error comparison and bound diagnostics across the schedule."""

import argparse

import numpy as np

from abms import lab
from abms.conditions import PseudoHuber, squared_distance
from abms.diffusion import NoiseSchedule
from abms.prior import ExactDenoiser, PerturbedDenoiser, canonical_prior


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--prior", default="gmm2d_2")
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--M", type=int, default=16)
    p.add_argument("--n-xt", type=int, default=1000)
    p.add_argument("--perturb", type=float, default=0.0, help="score perturbation magnitude")
    p.add_argument("--kernel", choices=["model", "exact"], default="model")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    prior = canonical_prior(args.prior, 0)
    sched = NoiseSchedule.linear(args.T)
    den = ExactDenoiser(prior, sched)
    if args.perturb > 0:
        den = PerturbedDenoiser(den, args.perturb, args.seed)
    conds = {"squared_distance": squared_distance(prior.means[0]), "pseudo_huber": PseudoHuber(prior.means[0], 0.5)}
    print(f"{'f':<18}{'t':>5}{'DPS':>10}{'ABMS':>10}{'p':>10}  verdict   {'UB gap':>9}{'step1 viol':>11}")
    for name, f in conds.items():
        if prior.n > 3 and f.quadratic_form() is None:
            continue
        for t in lab.decile_steps(args.T):
            if t < 2:
                continue
            r = lab.error_comparison_check(prior, sched, f, t, M=args.M, N_xt=args.n_xt, denoiser=den,
                                       seed=args.seed, kernel=args.kernel, N_inner=2000)
            # reconstruction errors are pure round-off with the exact denoiser
            viol = f"{r.recon_violation_rate:.3f}" if args.perturb > 0 else "-"
            p_txt = "nan" if np.isnan(r.p_value) else f"{r.p_value:.1e}"
            print(f"{name:<18}{t:>5}{r.dps_error:>10.4f}{r.abms_error:>10.4f}{p_txt:>10}  {r.verdict:<9}"
                  f"{r.ub_gap:>9.4f}{viol:>11}")


if __name__ == "__main__":
    main()
