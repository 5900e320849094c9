"""Metrics and the small experiments built on the samplers.

Each runner returns an :class:`ExperimentReport` holding per-step metric
series, summary scalars and the images worth saving.  Writing them to disk
is left to :mod:`syncsampler.artifacts` so the runners stay pure.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .denoisers import (
    GaussianMixture,
    GMMDenoiser,
    PatchDenoiser,
    gmm_score_nll,
    patch_mixture,
    two_cluster_mixture,
)
from .diffusion import SigmaPolicy, make_schedule
from .errors import InvalidArgument, InvalidConfiguration
from .projections import EquirectProjector, MaskedProjector
from .samplers import (
    SamplerConfig,
    Trace,
    ds_synctweedies,
    measurement_error,
    multistep_x0,
    reverse_process,
    stochsync,
)

log = logging.getLogger(__name__)

THRESHOLD = 1e-2


@dataclass
class MetricSeries:
    name: str
    variant: str = ""
    seed: int = 0
    points: list = field(default_factory=list)  # (step_index, t, value)

    def __post_init__(self):
        steps = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise InvalidArgument(f"series {self.name!r}: step indices must strictly increase")
        if not all(np.isfinite(p[2]) for p in self.points):
            raise InvalidArgument(f"series {self.name!r}: values must be finite")

    def values(self):
        return np.array([p[2] for p in self.points])

    def first_below(self, threshold):
        """Step index of the first point under ``threshold`` (None if never)."""
        for step, _, value in self.points:
            if value < threshold:
                return step
        return None


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    series: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    table: list = field(default_factory=list)  # list of dicts, one per row
    images: dict = field(default_factory=dict)  # name -> canonical array
    artifacts: dict = field(default_factory=dict)  # kind -> path, filled on write

    def metric_rows(self):
        """Rows ``(experiment, variant, seed, step, t, metric, value)`` in a fixed order."""
        for s in self.series:
            for step, t, value in s.points:
                yield (self.experiment, s.variant, s.seed, step, t, s.name, value)


def thread_count():
    """Worker threads for seed-level parallelism, from ``SYNCSAMPLER_THREADS``."""
    raw = os.environ.get("SYNCSAMPLER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfiguration(f"SYNCSAMPLER_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def map_seeds(fn, seeds):
    """``[fn(s) for s in seeds]``, possibly on a thread pool; order is preserved."""
    seeds = list(seeds)
    n = min(thread_count(), len(seeds))
    if n <= 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, seeds))


# --- seam score -------------------------------------------------------------

def _weight_maps(proj, views):
    shape = proj.canonical_shape[: proj.spatial_ndim]
    maps = []
    for v in views:
        P = proj.matrix(v)
        maps.append(np.asarray(P.sum(axis=0)).reshape(shape))
    return np.stack(maps)


def boundary_mask(proj, views):
    """``(boundary, covered)`` texel masks for a view layout.

    A texel's signature is the set of views that touch it.  Boundary texels
    are covered texels with a covered 4-neighbour (longitude wraps) whose
    signature differs, so both sides of an ownership change are included.
    """
    if proj.spatial_ndim not in (1, 2):
        raise InvalidArgument("seam scores need a ring or equirectangular projector")
    touched = _weight_maps(proj, views) > 0
    covered = touched.any(axis=0)
    if proj.spatial_ndim == 1:
        touched, covered = touched[:, None, :], covered[None, :]
    boundary = np.zeros_like(covered)
    pairs = [(np.roll(touched, s, axis=2), np.roll(covered, s, axis=1)) for s in (1, -1)]
    if covered.shape[0] > 1:
        for s in (1, -1):
            nb_t = np.roll(touched, s, axis=1)
            nb_c = np.roll(covered, s, axis=0)
            edge = 0 if s == 1 else -1  # rows do not wrap
            nb_c = nb_c.copy()
            nb_c[edge] = False
            pairs.append((nb_t, nb_c))
    for nb_t, nb_c in pairs:
        differs = np.any(nb_t != touched, axis=0)
        boundary |= covered & nb_c & differs
    if proj.spatial_ndim == 1:
        return boundary[0], covered[0]
    return boundary, covered


def _gradient_magnitude(z, covered):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return np.abs(np.roll(z, -1) - np.roll(z, 1)) / 2.0
    if z.ndim == 2:
        z = z[..., None]
    gx = (np.roll(z, -1, axis=1) - np.roll(z, 1, axis=1)) / 2.0
    up = np.zeros_like(covered)
    down = np.zeros_like(covered)
    up[1:] = covered[:-1]
    down[:-1] = covered[1:]
    gy = np.zeros_like(z)
    both = up & down
    gy[1:-1][both[1:-1]] = ((z[2:] - z[:-2]) / 2.0)[both[1:-1]]
    only_down = down & ~up
    gy[:-1][only_down[:-1]] = (z[1:] - z[:-1])[only_down[:-1]]
    only_up = up & ~down
    gy[1:][only_up[1:]] = (z[1:] - z[:-1])[only_up[1:]]
    return np.sqrt(np.sum(gx * gx + gy * gy, axis=-1))


def seam_score(z, proj, views=None):
    """Mean gradient magnitude on view boundaries over the mean elsewhere.

    Only texels covered by some view count.  Vertical differences use
    covered neighbours only, so the edge of the covered band is not
    mistaken for a seam.  A constant canonical sample scores 1.
    """
    views = proj.fixed_views() if views is None else views
    boundary, covered = boundary_mask(proj, views)
    interior = covered & ~boundary
    if not boundary.any() or not interior.any():
        raise InvalidArgument("view layout leaves no boundary or no interior texels")
    grad = _gradient_magnitude(z, covered)
    b, i = grad[boundary].mean(), grad[interior].mean()
    if i == 0.0:
        return 1.0 if b == 0.0 else float("inf")
    return float(b / i)


# --- inpainting ---------------------------------------------------------------

INPAINT_VARIANTS = {
    "zero": dict(algorithm="ds", sigma_policy=SigmaPolicy.ZERO),
    "max": dict(algorithm="ds", sigma_policy=SigmaPolicy.MAX),
    "stochsync": dict(algorithm="stochsync", max_sigma=True, multistep_x0=True,
                      nonoverlap_views=False),
}

INPAINT_DEFAULTS = dict(t_start=1000, t_stop=0, n_outer_steps=50, inner_steps=50)


def _marginal(gmm, free):
    return GaussianMixture(gmm.weights, gmm.means[:, free], gmm.variances, gmm.labels)


def draw_measurement(gmm, mask, seed, x_start_clean, min_error=0.25, attempts=100):
    """Ground truth from the mixture whose observed part disagrees with ``x_start_clean``.

    The experiment studies how fast a trajectory that starts far from the
    measurement is pulled onto it, so truths that the unconditioned start
    already matches (error below ``min_error``) are redrawn.
    """
    gen = rng.generator(seed, "truth")
    for _ in range(attempts):
        k = gen.choice(len(gmm.weights), p=gmm.weights)
        truth = gmm.means[k] + np.sqrt(gmm.variances[k]) * gen.standard_normal(gmm.d)
        y = mask * truth
        if measurement_error(x_start_clean, mask, y) >= min_error:
            return truth, y
    return truth, y


def run_inpainting_seed(seed, gmm, mask, sched, base, probe_steps=20, variants=None,
                        min_error=0.25, y=None):
    """All variants on one seed; returns ``{variant: (series, final z)}``.

    Convergence is measured on ``G(x_t)``, the deterministic multi-step solve
    from each step's noisy state, so every variant is judged by the same
    clean-image probe regardless of how it predicts internally.
    """
    den = GMMDenoiser(gmm)
    variants = INPAINT_VARIANTS if variants is None else variants
    if y is None:
        x_init = rng.normal(seed, "init", (gmm.d,), view=0)
        g0, _ = multistep_x0(den, x_init, base.t_start, sched, "ddim", probe_steps)
        _, y = draw_measurement(gmm, mask, seed, g0, min_error)
    proj = MaskedProjector(mask=mask, measurement=y)
    out = {}
    for name, overrides in variants.items():
        cfg = replace(base, seed=seed, **overrides)
        cfg.validate(sched.T)
        trace = Trace()
        if cfg.algorithm == "ds":
            z = ds_synctweedies(den, proj, cfg, sched, trace)
        else:
            z = stochsync(den, proj, cfg, sched, trace)
        probe, tweedie = [], []
        for rec in trace:
            g, _ = multistep_x0(den, rec.x_t[0], rec.t, sched, "ddim", probe_steps)
            probe.append((rec.step, float(rec.t), measurement_error(g, mask, y)))
            tweedie.append((rec.step, float(rec.t), rec.measurement_error))
        out[name] = (
            [MetricSeries("measurement_error", name, seed, probe),
             MetricSeries("measurement_error_x0", name, seed, tweedie)],
            z,
        )
    return out


def run_inpainting_experiment(seeds=range(100), gmm=None, mask=None, sched=None, base=None,
                              probe_steps=20, threshold=THRESHOLD):
    gmm = two_cluster_mixture(2, 1.0, 0.05) if gmm is None else gmm
    mask = np.array([1.0] + [0.0] * (gmm.d - 1)) if mask is None else np.asarray(mask, float)
    sched = make_schedule() if sched is None else sched
    base = SamplerConfig(**INPAINT_DEFAULTS) if base is None else base
    seeds = list(seeds)
    results = map_seeds(
        lambda s: run_inpainting_seed(s, gmm, mask, sched, base, probe_steps), seeds)
    free = np.flatnonzero(mask == 0)
    report = ExperimentReport("inpaint", {"sampler": base.to_dict(), "gmm": gmm.to_dict(),
                                          "mask": mask.tolist(), "probe_steps": probe_steps,
                                          "threshold": threshold, "seeds": seeds})
    never = base.n_outer_steps + 1
    steps = {name: [] for name in INPAINT_VARIANTS}
    finals = {name: [] for name in INPAINT_VARIANTS}
    for seed, res in zip(seeds, results):
        for name, (series, z) in res.items():
            report.series.extend(series)
            hit = series[0].first_below(threshold)
            steps[name].append(never if hit is None else hit)
            finals[name].append(z)
    zero = np.array(steps["zero"])
    for name in INPAINT_VARIANTS:
        s = np.array(steps[name])
        row = {"variant": name, "median_steps_to_threshold": float(np.median(s)),
               "mean_steps_to_threshold": float(s.mean())}
        if free.size:
            row["final_nll_unobserved"] = gmm_score_nll(
                _marginal(gmm, free), np.stack(finals[name])[:, free])
        if name != "zero":
            row["win_rate_vs_zero"] = float(np.mean(s < zero))
        report.table.append(row)
        report.summary[f"{name}_steps_to_threshold"] = row["median_steps_to_threshold"]
    report.summary["steps_to_threshold"] = {k: list(map(int, v)) for k, v in steps.items()}
    report.images = {f"{name}_final": np.stack(finals[name]) for name in INPAINT_VARIANTS}
    return report


# --- divergence sweep ---------------------------------------------------------

DIVERGENCE_COUNTS = (10, 100, 1000, 10000)


def divergence_mixture():
    """Equal-weight pair of a tight and a broad component.

    Maximum stochasticity leaks mass from the tight mode into the broad one
    as the number of steps grows, which is visible in the likelihood.
    """
    return GaussianMixture(weights=[0.5, 0.5], means=[[2.0, 0.0], [-2.0, 0.0]],
                           variances=[0.01, 1.0], labels=("narrow", "broad"))


def run_divergence_sweep(step_counts=DIVERGENCE_COUNTS, n_chains=200, seed=0, gmm=None,
                         sched=None, t_start=None, policies=(SigmaPolicy.MAX, SigmaPolicy.ZERO)):
    """Terminal-sample NLL against the number of sampling steps.

    Each count runs ``n_chains`` independent chains as one batch on a
    fractional time grid, so counts above ``T`` are allowed.
    """
    gmm = divergence_mixture() if gmm is None else gmm
    sched = make_schedule() if sched is None else sched
    t_start = sched.T if t_start is None else t_start
    den = GMMDenoiser(gmm)
    counts = [int(c) for c in step_counts]
    report = ExperimentReport("divergence", {"gmm": gmm.to_dict(), "counts": counts,
                                             "n_chains": n_chains, "seed": seed,
                                             "t_start": t_start})
    jobs = [(p, c) for p in policies for c in counts]

    def job(pc):
        policy, count = pc
        cfg = SamplerConfig(algorithm="reverse", sigma_policy=policy, t_start=t_start,
                            t_stop=0, n_outer_steps=count, integer_grid=False, seed=seed)
        return reverse_process(den, cfg, sched, (n_chains, gmm.d))

    samples = map_seeds(job, jobs)
    nll = {}
    for (policy, count), x in zip(jobs, samples):
        value = den.nll(x)
        nll[(policy.value, count)] = value
        report.table.append({"policy": policy.value, "steps": count, "nll": value})
        report.images[f"{policy.value}_{count}"] = x
    for policy in policies:
        report.series.append(MetricSeries(
            "nll", policy.value, seed,
            [(i, float(c), nll[(policy.value, c)]) for i, c in enumerate(sorted(counts))]))
    report.summary["nll"] = {f"{p}_{c}": v for (p, c), v in nll.items()}
    return report


# --- ablation grid --------------------------------------------------------------

ABLATION_ROWS = (
    # id, max sigma, improved x0, non-overlapping views
    (1, False, False, False),
    (2, True, False, False),
    (3, False, True, False),
    (4, True, True, False),
    (5, True, False, True),
    (6, True, True, True),
)


def ablation_config(base, max_sigma, improved, nonoverlap):
    cfg = replace(base, algorithm="stochsync", max_sigma=max_sigma, multistep_x0=improved,
                  nonoverlap_views=nonoverlap)
    if nonoverlap and not max_sigma:
        raise InvalidConfiguration("non-overlapping views need maximum stochasticity")
    return cfg


def panorama_nll(den, proj, z):
    """Mean patch NLL over every view of both tilings."""
    views = proj.view_set(0) + proj.view_set(1)
    return float(np.mean([den.nll(proj.project(z, v)) for v in views]))


def run_ablation_seed(seed, den, proj, sched, base, rows=ABLATION_ROWS):
    out = {}
    for row_id, max_sigma, improved, nonoverlap in rows:
        try:
            cfg = replace(ablation_config(base, max_sigma, improved, nonoverlap), seed=seed)
            cfg.validate(sched.T)
        except InvalidConfiguration as exc:
            log.warning("skipping ablation row %s: %s", row_id, exc)
            continue
        z = stochsync(den, proj, cfg, sched)
        out[row_id] = (z, seam_score(z, proj), panorama_nll(den, proj, z))
    return out


def run_ablation_grid(base=None, seeds=range(20), proj=None, den=None, sched=None,
                      rows=ABLATION_ROWS):
    base = SamplerConfig() if base is None else base
    proj = EquirectProjector(32, view_size=8) if proj is None else proj
    den = PatchDenoiser(patch_mixture()) if den is None else den
    sched = make_schedule() if sched is None else sched
    seeds = list(seeds)
    results = map_seeds(lambda s: run_ablation_seed(s, den, proj, sched, base, rows), seeds)
    report = ExperimentReport("ablation", {"sampler": base.to_dict(), "seeds": seeds,
                                           "canonical_shape": list(proj.canonical_shape)})
    for row_id, max_sigma, improved, nonoverlap in rows:
        per_seed = [(s, r[row_id]) for s, r in zip(seeds, results) if row_id in r]
        if not per_seed:
            continue
        variant = f"row{row_id}"
        report.series.append(MetricSeries("seam_score", variant, 0,
                                          [(s, 0.0, v[1]) for s, v in per_seed]))
        report.series.append(MetricSeries("nll", variant, 0,
                                          [(s, 0.0, v[2]) for s, v in per_seed]))
        seams = np.array([v[1] for _, v in per_seed])
        nlls = np.array([v[2] for _, v in per_seed])
        report.table.append({"id": row_id, "max_sigma": max_sigma, "improved_x0": improved,
                             "nonoverlap_views": nonoverlap,
                             "median_seam_score": float(np.median(seams)),
                             "mean_nll": float(nlls.mean()), "median_nll": float(np.median(nlls))})
        report.images[variant] = per_seed[0][1][0]
    return report
