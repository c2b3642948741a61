"""Guided sampling runs and dual-focus evaluation.

Every chain owns two RNG streams derived from (seed, chain index): one for the
initial state and output noise, one for guidance draws.  Methods therefore
share output noise (common random numbers) and chain results do not depend on
batch composition or thread scheduling.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .conditions import (
    LinearInverseTask,
    Restricted,
    block_average_matrix,
    circulant_matrix,
    select_matrix,
    squared_distance,
)
from .diffusion import NoiseSchedule, reverse_mean
from .errors import NumericalError
from .guidance import GuidanceConfig, guided_step, noise_draws
from .metrics import energy_distance, envelope_fraction, envelope_threshold, sliced_wasserstein
from .prior import CANONICAL_PRIORS, CANONICAL_SEEDS, ExactDenoiser, GaussianMixture, canonical_prior, condition_linear_gaussian

SCHEMA_VERSION = 1

#: pinned guidance-scale grids (8 log-spaced points per method)
SCALE_GRIDS = {
    "dsg": tuple(float(v) for v in np.geomspace(0.02, 1.0, 8)),
    "abms": tuple(float(v) for v in np.geomspace(0.02, 1.0, 8)),
    "dps": tuple(float(v) for v in np.geomspace(0.01, 1.0, 8)),
    "lgd_mc": tuple(float(v) for v in np.geomspace(0.01, 1.0, 8)),
}

#: the step count used by sweeps (the linear schedule rescales its betas to it)
SWEEP_T = 100

INVERSE_KINDS = ("inpaint", "superres", "deblur")


class ChainStreams:
    """Per-chain generators for output noise and for guidance draws."""

    def __init__(self, seed: int, n_chains: int, offset: int = 0):
        idx = range(offset, offset + n_chains)
        self.out = [np.random.default_rng([seed, c, 0]) for c in idx]
        self.guide = [np.random.default_rng([seed, c, 1]) for c in idx]

    def draw(self, name: str, shape) -> np.ndarray:
        gens = self.out if name == "out" else self.guide
        return np.stack([g.standard_normal(shape) for g in gens])


@dataclass
class ChainResult:
    x0: np.ndarray
    seed: int
    trace: list = field(default_factory=list)
    wall_time: float = 0.0
    guided_steps: int = 0


def run_chains(denoiser, guidance: GuidanceConfig | None, f, seed: int, n_chains: int,
               offset: int = 0, trace: bool = False) -> ChainResult:
    """Run ``n_chains`` guided reverse chains from x_T ~ N(0, I) down to x_0."""
    sched = denoiser.schedule
    n = denoiser.n
    streams = ChainStreams(seed, n_chains, offset)
    x = streams.draw("out", (n,))
    layout = noise_draws(guidance, n)
    records = []
    guided = 0
    start = time.perf_counter()
    for t in range(sched.T, 0, -1):
        noise = {name: streams.draw(name, shape) for name, shape in layout}
        try:
            x_mean = reverse_mean(x, t, denoiser, sched)
            skip = (guidance is None or guidance.w_max == 0
                    or (guidance.method in ("dsg", "abms") and sched.sigma[t] == 0))
            if skip:
                x = x_mean + sched.sigma[t] * noise["out"]
            else:
                x, rec = guided_step(x, t, x_mean, f, guidance, denoiser, noise)
                guided += 1
                if trace:
                    records.append(rec)
        except NumericalError as exc:
            raise NumericalError(f"chain failed at step {t}: {exc}", t=t, seed=seed) from exc
        if not np.all(np.isfinite(x)):
            raise NumericalError("chain state became non-finite", t=t, seed=seed)
    return ChainResult(x, seed, records, time.perf_counter() - start, guided)


def run_chain(prior: GaussianMixture, schedule: NoiseSchedule, guidance, task, seed: int, trace=False):
    """Single-chain convenience wrapper: returns (x_0, trace records)."""
    res = run_chains(ExactDenoiser(prior, schedule), guidance, task, seed, 1, trace=trace)
    return res.x0[0], res.trace


# -- canonical linear-inverse suite -----------------------------------------

def inverse_operator(kind: str, n: int) -> np.ndarray:
    if kind == "inpaint":
        return select_matrix(n, np.arange(0, n, 2))
    if kind == "superres":
        return block_average_matrix(n, 2)
    if kind == "deblur":
        kernel = [0.15, 0.7, 0.15] if n == 2 else [0.1, 0.2, 0.4, 0.2, 0.1]
        return circulant_matrix(n, kernel)
    raise KeyError(kind)


@dataclass(frozen=True)
class Instance:
    prior_name: str
    prior_seed: int
    kind: str

    @property
    def key(self) -> str:
        return f"{self.prior_name}/{self.prior_seed}/{self.kind}"


def canonical_instances(priors=CANONICAL_PRIORS, seeds=CANONICAL_SEEDS, kinds=INVERSE_KINDS):
    return [Instance(p, s, k) for p in priors for s in seeds for k in kinds]


def make_inverse_task(prior: GaussianMixture, kind: str, n_chains: int, seed: int, noise_std: float = 0.0):
    """One ground truth and measurement per chain; returns (task, ground_truth)."""
    A = inverse_operator(kind, prior.n)
    rng = np.random.default_rng([seed, 0x67])
    gt = prior.sample(rng, n_chains)
    return LinearInverseTask.generate(A, gt, rng, noise_std), gt


# -- dual-focus sweep ------------------------------------------------------------

@dataclass
class SweepCell:
    instance: str
    method: str
    M: int
    scale: float
    seed: int
    n_chains: int
    alignment: float = float("nan")
    alignment_se: float = float("nan")
    energy: float = float("nan")
    transport: float = float("nan")
    transport_se: float = float("nan")
    validity: float = float("nan")
    #: style-marginal energy distance for dual-attribute tasks
    interference: float = float("nan")
    iters_per_sec: float = float("nan")
    status: str = "ok"


_TIMING = ("iters_per_sec",)


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


@dataclass
class SweepReport:
    cells: list
    config: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def rows(self, include_timing: bool = False):
        return [{k: v for k, v in asdict(c).items() if include_timing or k not in _TIMING} for c in self.cells]

    def to_jsonl(self, include_timing: bool = False) -> str:
        """Wall-clock fields are left out by default so reruns are byte-identical."""
        lines = [json.dumps({"schema_version": self.schema_version, "config": self.config}, sort_keys=True)]
        lines += [json.dumps({k: _clean(v) for k, v in r.items()}, sort_keys=True)
                  for r in self.rows(include_timing)]
        return "\n".join(lines) + "\n"

    def to_csv(self, include_timing: bool = False) -> str:
        rows = self.rows(include_timing)
        cols = [k for k in SweepCell.__dataclass_fields__ if include_timing or k not in _TIMING]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items() if k in cols})
        return buf.getvalue()

    @classmethod
    def from_jsonl(cls, text: str) -> "SweepReport":
        lines = [json.loads(l) for l in text.splitlines() if l.strip()]
        head, body = lines[0], lines[1:]
        if head.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported sweep schema {head.get('schema_version')}")
        cells = [SweepCell(**{k: (float("nan") if v is None else v) for k, v in r.items()}) for r in body]
        return cls(cells, head.get("config", {}), head["schema_version"])

    def curve(self, instance: str, method: str, M: int):
        cells = [c for c in self.cells if c.instance == instance and c.method == method and c.M == M and c.status == "ok"]
        return sorted(cells, key=lambda c: c.scale)


def pareto_front(points):
    """Indices of non-dominated points, minimizing both coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    keep = []
    for i, p in enumerate(pts):
        dominated = np.any(np.all(pts <= p, axis=1) & np.any(pts < p, axis=1))
        if not dominated:
            keep.append(i)
    return keep


def columns_not_dominated(candidate, baseline):
    """Per column of ``candidate``: True unless some baseline point beats it in
    both alignment and transport distance."""
    base = np.asarray(baseline, dtype=np.float64)
    out = []
    for p in np.asarray(candidate, dtype=np.float64):
        out.append(not bool(np.any(np.all(base < p, axis=1))))
    return out


def evaluate_cell(x0, task, reference, prior, threshold, rng_seed=0):
    per_chain = task(x0)
    B = len(per_chain)
    sw_parts = [sliced_wasserstein(part, reference, rng=np.random.default_rng([rng_seed, j]))
                for j, part in enumerate(np.array_split(x0, 4))]
    return {
        "alignment": float(per_chain.mean()),
        "alignment_se": float(per_chain.std(ddof=1) / math.sqrt(B)) if B > 1 else float("nan"),
        "energy": energy_distance(x0, reference),
        "transport": sliced_wasserstein(x0, reference, rng=np.random.default_rng(rng_seed)),
        "transport_se": float(np.std(sw_parts, ddof=1) / 2.0),
        "validity": envelope_fraction(prior, x0, threshold),
    }


def _sweep_cell(ctx, inst, method, M, w, seed, chains):
    prior, den, task, reference, threshold = ctx
    cell = SweepCell(inst.key, method, int(M), float(w), seed, chains)
    cfg = GuidanceConfig(method, w_max=float(w), M=int(M))
    try:
        res = run_chains(den, cfg, task, seed, chains)
        for k, v in evaluate_cell(res.x0, task, reference, prior, threshold, seed).items():
            setattr(cell, k, v)
        cell.iters_per_sec = den.schedule.T / res.wall_time if res.wall_time > 0 else float("inf")
    except (NumericalError, AssertionError) as exc:
        cell.status = f"failed: {exc}"
    return cell


def dual_focus_sweep(methods, scales=None, M_list=(3,), instances=None, chains: int = 100, seed: int = 0,
                     T: int = SWEEP_T, n_ref: int = 2000, threads: int = 1, progress=None) -> SweepReport:
    """Alignment error vs. distribution distance over guidance scales.

    ``methods`` is a list of method names; ``scales`` maps method -> grid
    (defaults to :data:`SCALE_GRIDS`).  ``M_list`` applies to abms and lgd_mc.
    Cells are independent jobs; with ``threads > 1`` they run on a pool and are
    merged back in job order.
    """
    scales = scales or {}
    instances = instances or canonical_instances()
    schedule = NoiseSchedule.linear(T)
    jobs = []
    for inst in instances:
        prior = canonical_prior(inst.prior_name, inst.prior_seed)
        task, _ = make_inverse_task(prior, inst.kind, chains, seed)
        reference = prior.sample(np.random.default_rng([seed, 0x5EF]), n_ref)
        ctx = (prior, ExactDenoiser(prior, schedule), task, reference, envelope_threshold(prior))
        for method in methods:
            Ms = M_list if method in ("abms", "lgd_mc") else (1,)
            for M in Ms:
                for w in scales.get(method, SCALE_GRIDS[method]):
                    jobs.append((ctx, inst, method, M, w, seed, chains))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(lambda j: _sweep_cell(*j), jobs))
    else:
        cells = [_sweep_cell(*j) for j in jobs]
    if progress:
        for c in cells:
            progress(c)
    config = {"methods": list(methods), "M_list": [int(m) for m in M_list], "chains": chains, "seed": seed,
              "T": T, "instances": [i.key for i in instances],
              "scales": {m: list(scales.get(m, SCALE_GRIDS[m])) for m in methods}}
    return SweepReport(cells, config)


def frontier_dominance(report: SweepReport, candidate=("abms", 3), baseline=("dsg", 1)):
    """Per-instance column verdicts and the majority vote per grid column."""
    per_instance = {}
    for inst in sorted({c.instance for c in report.cells}):
        cand = report.curve(inst, *candidate)
        base = report.curve(inst, *baseline)
        if not cand or not base:
            continue
        per_instance[inst] = columns_not_dominated([(c.alignment, c.transport) for c in cand],
                                                   [(c.alignment, c.transport) for c in base])
    if not per_instance:
        return per_instance, []
    verdicts = np.array(list(per_instance.values()))
    majority = [bool(v) for v in verdicts.mean(axis=0) > 0.5]
    return per_instance, majority


# -- cross-condition interference ------------------------------------------------

@dataclass
class InterferenceResult:
    seed: int
    target_alignment: float
    alignment: dict
    scale: dict
    style_energy: dict
    tilt: dict
    matched: bool


def _tilted(prior: GaussianMixture, idx, target, lam: float) -> GaussianMixture:
    """p(x) exp(-lam ||x_I - target||^2): the KL-closest reweighting of the prior
    that attains a given expected content loss."""
    return condition_linear_gaussian(prior, select_matrix(prior.n, idx), target, 0.5 / lam)


def _expected_content_loss(gmm: GaussianMixture, idx, target) -> float:
    d = gmm.means[:, idx] - target
    per = np.sum(d * d, axis=1) + np.trace(gmm.covs[:, idx][:, :, idx], axis1=1, axis2=2)
    return float(gmm.weights @ per)


def match_tilt(prior, idx, target, level, lo=1e-4, hi=1e6, iters=80):
    """lam such that the tilted prior's expected content loss equals ``level``."""
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if _expected_content_loss(_tilted(prior, idx, target, mid), idx, target) > level:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def _bisect_scale(run, level, lo=1e-3, hi=1.0, tol=0.05, iters=20):
    """Guidance scale whose content alignment lands within ``tol`` of ``level``."""
    a_hi = run(hi)
    if a_hi > level * (1 + tol):
        return hi, a_hi, False
    best = (hi, a_hi)
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        a = run(mid)
        if abs(a - level) < abs(best[1] - level):
            best = (mid, a)
        if abs(a - level) <= tol * level:
            return mid, a, True
        if a > level:
            lo = mid
        else:
            hi = mid
    return best[0], best[1], abs(best[1] - level) <= tol * level


def interference_study(seed: int, prior: GaussianMixture | None = None, content_dims: int | None = None,
                       methods=("dsg", "abms"), M: int = 3, chains: int = 200, T: int = SWEEP_T,
                       level_fraction: float = 0.25, n_ref: int = 2000) -> InterferenceResult:
    """Guide only the content coordinates; compare style-marginal distortion at
    matched content alignment."""
    prior = canonical_prior("gmm16d_4", 0) if prior is None else prior
    n = prior.n
    k = n // 2 if content_dims is None else content_dims
    idx = np.arange(k)
    style = np.arange(k, n)
    rng = np.random.default_rng([seed, 0xC0])
    target = prior.sample(rng, 1)[0, idx]
    f = Restricted(squared_distance(target), idx, n)
    schedule = NoiseSchedule.linear(T)
    den = ExactDenoiser(prior, schedule)
    base = run_chains(den, None, f, seed, chains).x0
    level = level_fraction * float(f(base).mean())
    out = {"alignment": {}, "scale": {}, "style_energy": {}, "tilt": {}}
    matched = True
    for method in methods:
        cache = {}

        def run(w, method=method):
            res = run_chains(den, GuidanceConfig(method, w_max=w, M=M), f, seed, chains)
            cache[w] = res.x0
            return float(f(res.x0).mean())

        w, a, ok = _bisect_scale(run, level)
        matched &= ok
        lam = match_tilt(prior, idx, target, a)
        ref = _tilted(prior, idx, target, lam).sample(np.random.default_rng([seed, 0x5E]), n_ref)
        out["alignment"][method] = a
        out["scale"][method] = w
        out["tilt"][method] = lam
        out["style_energy"][method] = float(energy_distance(cache[w][:, style], ref[:, style]))
    return InterferenceResult(seed, level, out["alignment"], out["scale"], out["style_energy"], out["tilt"], matched)


def interference_test(results, a="abms", b="dsg"):
    """One-sided Wilcoxon signed-rank p-value for style energy a < b."""
    ea = np.array([r.style_energy[a] for r in results])
    eb = np.array([r.style_energy[b] for r in results])
    return float(stats.wilcoxon(ea, eb, alternative="less").pvalue)


# -- saturation in M -------------------------------------------------------------

def saturation_study(seed: int, M_list=(1, 3, 5), w_max: float = 0.3, instances=None, chains: int = 100,
                     T: int = SWEEP_T):
    """Suite-mean alignment error (relative to unguided) for each M."""
    instances = instances or canonical_instances(seeds=(0,))
    schedule = NoiseSchedule.linear(T)
    rel = {M: [] for M in M_list}
    for inst in instances:
        prior = canonical_prior(inst.prior_name, inst.prior_seed)
        den = ExactDenoiser(prior, schedule)
        task, _ = make_inverse_task(prior, inst.kind, chains, seed)
        base = float(task(run_chains(den, None, task, seed, chains).x0).mean())
        for M in M_list:
            x0 = run_chains(den, GuidanceConfig("abms", w_max=w_max, M=M), task, seed, chains).x0
            rel[M].append(float(task(x0).mean()) / base)
    return {M: float(np.mean(v)) for M, v in rel.items()}


# -- throughput --------------------------------------------------------------------

def throughput_bench(methods=(("dps", 1), ("dsg", 1), ("abms", 1), ("abms", 2), ("abms", 3), ("abms", 4), ("abms", 5)),
                     prior=None, kind="inpaint", chains: int = 128, steps: int = 20, repeats: int = 15,
                     T: int = SWEEP_T, workers=None, seed: int = 0):
    """Guided iterations per second for each (method, M).

    Repeats run round-robin over the methods (so machine-load drift hits all of
    them alike) after one warm-up pass; the best time per method is kept.
    """
    prior = canonical_prior("gmm16d_4", 0) if prior is None else prior
    schedule = NoiseSchedule.linear(T)
    den = ExactDenoiser(prior, schedule)
    task, _ = make_inverse_task(prior, kind, chains, seed)
    rng = np.random.default_rng(seed)
    n = prior.n
    x = rng.standard_normal((chains, n))
    ts = np.linspace(T, 2, steps).astype(int)
    jobs = []
    for method, M in methods:
        cfg = GuidanceConfig(method, w_max=0.3, M=M, workers=workers)
        noises = [{name: rng.standard_normal((chains,) + shape) for name, shape in noise_draws(cfg, n)} for _ in ts]
        jobs.append((cfg, noises))

    def one(cfg, noises):
        start = time.perf_counter()
        for t, noise in zip(ts, noises):
            x_mean = reverse_mean(x, t, den, schedule)
            guided_step(x, int(t), x_mean, task, cfg, den, noise)
        return time.perf_counter() - start

    best = [float("inf")] * len(jobs)
    for rep in range(repeats + 1):
        for j, job in enumerate(jobs):
            elapsed = one(*job)
            if rep:  # the first pass is warm-up
                best[j] = min(best[j], elapsed)
    return [{"method": m, "M": M, "iters_per_sec": steps / b} for (m, M), b in zip(methods, best)]


# -- plotting --------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_plot_svg(curves: dict, xlabel: str = "alignment error", ylabel: str = "transport distance",
                  title: str = "", width: int = 480, height: int = 360) -> str:
    """Minimal SVG line plot; ``curves`` maps label -> list of (x, y)."""
    pts = [p for c in curves.values() for p in c if all(math.isfinite(v) for v in p)]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    xs, ys = zip(*pts)
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    ml, mr, mt, mb = 60, 20, 30, 45

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
           f'<text x="{(width + ml) / 2:.1f}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
           f'<text x="15" y="{(height - mb + mt) / 2:.1f}" text-anchor="middle" transform="rotate(-90 15 {(height - mb + mt) / 2:.1f})">{ylabel}</text>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{title}</text>',
           f'<text x="{ml}" y="{height - mb + 14}" text-anchor="middle">{x0:.3g}</text>',
           f'<text x="{width - mr}" y="{height - mb + 14}" text-anchor="middle">{x1:.3g}</text>',
           f'<text x="{ml - 4}" y="{height - mb}" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{ml - 4}" y="{mt + 4}" text-anchor="end">{y1:.3g}</text>']
    for i, (label, c) in enumerate(curves.items()):
        color = _COLORS[i % len(_COLORS)]
        good = [p for p in c if all(math.isfinite(v) for v in p)]
        path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in good)
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out += [f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.5" fill="{color}"/>' for x, y in good]
        out.append(f'<text x="{width - mr - 80}" y="{mt + 14 * (i + 1)}" fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def frontier_svg(report: SweepReport, instance: str, series=(("dsg", 1), ("abms", 3))) -> str:
    curves = {}
    for method, M in series:
        cells = report.curve(instance, method, M)
        if cells:
            label = method if method in ("dsg", "dps") else f"{method} M={M}"
            curves[label] = [(c.alignment, c.transport) for c in cells]
    return line_plot_svg(curves, title=instance)
