"""Command line entry point: ``abms <command> [--config ...] [--seed ...] [--out ...]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import lab
from .conditions import GaussianWell, PseudoHuber, squared_distance
from .config import RunConfig
from .diffusion import NoiseSchedule, tweedie_x0_hat
from .gradcheck import run_gradcheck
from .prior import CANONICAL_PRIORS, CANONICAL_SEEDS, ExactDenoiser, canonical_prior


class HardAssertion(Exception):
    """A correctness check that must never fail; maps to a nonzero exit code."""


def _write(out: Path, name: str, text: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)
    print(f"wrote {out / name}")


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# -- commands ---------------------------------------------------------------------

def cmd_sample(args):
    cfg = _config(args)
    prior, schedule = cfg.prior.build(), cfg.schedule.build()
    guidance = cfg.guidance
    if guidance is not None and args.threads:
        guidance.workers = args.threads
    task = cfg.task.build(prior, cfg.chains, cfg.seed)
    res = ev.run_chains(ExactDenoiser(prior, schedule), guidance, task, cfg.seed, cfg.chains, trace=args.trace)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["chain"] + [f"x{i}" for i in range(prior.n)])
    for i, row in enumerate(res.x0):
        w.writerow([i] + [repr(float(v)) for v in row])
    out = Path(args.out)
    _write(out, "samples.csv", buf.getvalue())
    losses = np.asarray(task(res.x0))
    summary = {"config": cfg.to_dict(), "alignment": float(losses.mean()),
               "alignment_se": float(losses.std(ddof=1) / np.sqrt(len(losses))) if len(losses) > 1 else None,
               "guided_steps": res.guided_steps}
    _write(out, "summary.jsonl", _jsonl([summary]))
    if args.trace:
        rows = []
        for rec in res.trace:
            d = rec.to_json()
            d.pop("wall_time")
            rows.append(d)
        _write(out, "trace.jsonl", _jsonl(rows))


def cmd_sweep(args):
    cfg = _config(args)
    instances = None
    if cfg.instances:
        instances = [ev.Instance(*key.split("/")[:1], int(key.split("/")[1]), key.split("/")[2]) for key in cfg.instances]
    report = ev.dual_focus_sweep(cfg.methods, cfg.scales, cfg.M_list, instances, cfg.chains, cfg.seed,
                                 cfg.schedule.T, threads=args.threads or 1)
    out = Path(args.out)
    _write(out, "sweep.csv", report.to_csv())
    _write(out, "sweep.jsonl", report.to_jsonl())
    failed = [c for c in report.cells if c.status != "ok"]
    for c in failed:
        print(f"cell {c.instance} {c.method} M={c.M} w={c.scale}: {c.status}", file=sys.stderr)
    _emit_frontiers(report, out)


def _emit_frontiers(report, out: Path):
    per, majority = ev.frontier_dominance(report)
    rows = [{"instance": k, "columns": v} for k, v in per.items()]
    rows.append({"instance": "majority", "columns": majority})
    _write(out, "frontier.jsonl", _jsonl(rows))
    for inst in per:
        _write(out / "plots", inst.replace("/", "_") + ".svg", ev.frontier_svg(report, inst))
    if majority:
        print(f"columns where abms(M=3) is not dominated by dsg: {sum(majority)}/{len(majority)}")


def cmd_report(args):
    path = Path(args.out) / "sweep.jsonl"
    report = ev.SweepReport.from_jsonl(path.read_text())
    _emit_frontiers(report, Path(args.out))


def _consistency(seed: int):
    """Tweedie map vs. closed-form posterior mean; weight normalization."""
    rng = np.random.default_rng([seed, 0x2])
    worst_mean = worst_w = 0.0
    schedule = NoiseSchedule.linear(1000)
    for i in range(100):
        prior = canonical_prior(CANONICAL_PRIORS[i % 3], CANONICAL_SEEDS[i % 3])
        t = int(rng.integers(1, schedule.T + 1))
        xt = lab.sample_marginal(prior, t, schedule, rng, 1)[0]
        post = prior.posterior(xt, schedule.alpha_bar[t])
        x0 = tweedie_x0_hat(xt, t, ExactDenoiser(prior, schedule), schedule)
        m = post.mean()
        worst_mean = max(worst_mean, float(np.linalg.norm(x0 - m) / max(np.linalg.norm(m), 1.0)))
        worst_w = max(worst_w, abs(float(post.weights.sum()) - 1.0))
    return worst_mean, worst_w


def registered_conditions(prior):
    c = prior.means[0]
    return {
        "squared_distance": squared_distance(c),
        "pseudo_huber": PseudoHuber(c, 0.5),
        "gaussian_well": GaussianWell(c, 1.0, 1.0),
    }


def cmd_oracle_check(args):
    cfg = _config(args)
    seed = cfg.seed
    out = Path(args.out)
    rows, problems = [], []
    mean_err, w_err = _consistency(seed)
    rows.append({"check": "tweedie_posterior_mean", "max_rel_error": mean_err, "max_weight_error": w_err})
    if mean_err > 1e-8 or w_err > 1e-12:
        problems.append("posterior consistency")
    schedule = NoiseSchedule.linear(ev.SWEEP_T)
    steps = lab.decile_steps(schedule.T)
    for name in CANONICAL_PRIORS:
        prior = canonical_prior(name, 0)
        for fname, f in registered_conditions(prior).items():
            if prior.n > 3 and f.quadratic_form() is None:
                continue
            res = lab.gap_bound_check(prior, schedule, f, steps, N=50, seed=seed)
            rows.append({"check": "gap_bound", "prior": name, "f": fname, **asdict(res)})
            if res.violations or res.quadratic_max_error > 1e-8:
                problems.append(f"gap bound on {name}/{fname}")
    prior = canonical_prior("gmm2d_2", 0)
    f = squared_distance(prior.means[0])
    p1 = lab.error_comparison_check(prior, schedule, f, schedule.T // 2, M=16, N_xt=1000, seed=seed)
    rows.append({"check": "error_comparison", **asdict(p1)})
    xt = lab.sample_marginal(prior, schedule.T // 2, schedule, np.random.default_rng([seed, 0x5C]), 1)[0]
    vs = lab.variance_scaling(f, [1, 2, 4, 8, 16, 32], xt, schedule.T // 2, 2000, prior, schedule, seed=seed)
    rows.append({"check": "variance_scaling", **asdict(vs)})
    reports = lab.estimator_sweep(prior, schedule, f, M=3, N_xt=200, reps=16, seed=seed)
    _write(out, "estimators.csv", lab.reports_to_csv(reports))
    _write(out, "estimators.jsonl", lab.reports_to_jsonl(reports, {"prior": "gmm2d_2/0", "T": schedule.T, "seed": seed}))
    _write(out, "oracle_check.jsonl", _jsonl(rows))
    print(f"paired DPS vs ABMS error comparison: {p1.verdict} (p = {p1.p_value:.3g})")
    print(f"variance slope {vs.slope:.3f}  CI [{vs.ci[0]:.3f}, {vs.ci[1]:.3f}]")
    if problems:
        raise HardAssertion("; ".join(problems))


def cmd_gradcheck(args):
    seed = args.seed or 0
    cases = run_gradcheck(200, seed)
    by = {}
    for c in cases:
        n, worst, ok = by.get(c.pipeline, (0, 0.0, True))
        by[c.pipeline] = (n + 1, max(worst, c.rel_error), ok and c.passed)
    print(f"{'pipeline':<26}{'cases':>6}{'max rel err':>14}  status")
    for name, (n, worst, ok) in by.items():
        print(f"{name:<26}{n:>6}{worst:>14.3e}  {'PASS' if ok else 'FAIL'}")
    if args.out:
        _write(Path(args.out), "gradcheck.jsonl", _jsonl([asdict(c) for c in cases]))
    if not all(c.passed for c in cases):
        raise HardAssertion("finite-difference mismatch")


def cmd_bench(args):
    table = ev.throughput_bench(workers=args.threads, seed=args.seed or 0)
    for row in table:
        print(f"{row['method']:<6} M={row['M']}  {row['iters_per_sec']:10.1f} iter/s")
    if args.out:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["method", "M", "iters_per_sec"], lineterminator="\n")
        w.writeheader()
        w.writerows(table)
        _write(Path(args.out), "bench.csv", buf.getvalue())


def cmd_gen_priors(args):
    out = Path(args.out) / "priors"
    for name in CANONICAL_PRIORS:
        for s in CANONICAL_SEEDS:
            _write(out, f"{name}_{s}.json", json.dumps(canonical_prior(name, s).to_dict(), sort_keys=True) + "\n")


COMMANDS = {
    "sample": cmd_sample,
    "sweep": cmd_sweep,
    "oracle-check": cmd_oracle_check,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "report": cmd_report,
    "gen-priors": cmd_gen_priors,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abms", description="Guided diffusion sampling on analytic priors.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--trace", action="store_true", help="write per-step guidance records")
        p.add_argument("--threads", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except HardAssertion as exc:
        print(f"hard assertion failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
