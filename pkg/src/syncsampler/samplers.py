"""Reverse process, diffusion synchronization, score distillation and StochSync.

All samplers draw Gaussian noise through :mod:`syncsampler.rng` keyed by
``(seed, stream, step, view id)``, so two samplers that make the same draw
for the same view at the same step see identical numbers.  That is what lets
the degenerate configurations be compared bit for bit.
"""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .denoisers import predict
from .diffusion import (
    SigmaPolicy,
    ddim_mean,
    ddim_step,
    eps_from_x0,
    logsnr_grid,
    max_sigma_mean,
    time_of_abar,
    timestep_grid,
    tweedie_x0,
)
from .errors import InvalidArgument, InvalidConfiguration

ALGORITHMS = ("reverse", "ds", "sds", "stochsync", "sdi")
INNER_SOLVERS = ("ddim", "second_order")
MIN_INNER_STEPS = 4


@dataclass
class SamplerConfig:
    algorithm: str = "stochsync"
    sigma_policy: SigmaPolicy = SigmaPolicy.ZERO
    t_start: int = 900
    t_stop: int = 270
    n_outer_steps: int = 25
    inner_solver: str = "ddim"
    inner_steps: int = 50
    inner_decay: bool = True
    max_sigma: bool = True
    multistep_x0: bool = True
    nonoverlap_views: bool = True
    sds_step_size: object = "1-abar"
    blend_last_k: int = 2
    blend_band: float = 0.1
    integer_grid: bool = True
    seed: int = 0

    def validate(self, T=1000):
        for name, f in self.__dataclass_fields__.items():
            value = getattr(self, name)
            if f.type is int and (not isinstance(value, int) or isinstance(value, bool)):
                raise InvalidConfiguration(f"{name} must be an integer, got {value!r}")
            if f.type is bool and not isinstance(value, bool):
                raise InvalidConfiguration(f"{name} must be true or false, got {value!r}")
            if f.type is float and (not isinstance(value, (int, float)) or isinstance(value, bool)):
                raise InvalidConfiguration(f"{name} must be a number, got {value!r}")
        if not isinstance(self.sigma_policy, SigmaPolicy):
            raise InvalidConfiguration("sigma_policy must be one of zero, ddpm, max")
        if self.algorithm not in ALGORITHMS:
            raise InvalidConfiguration(f"unknown algorithm {self.algorithm!r}")
        if self.inner_solver not in INNER_SOLVERS:
            raise InvalidConfiguration(f"unknown inner solver {self.inner_solver!r}")
        if not T >= self.t_start > self.t_stop >= 0:
            raise InvalidConfiguration(
                f"need T >= t_start > t_stop >= 0, got {T}, {self.t_start}, {self.t_stop}"
            )
        if self.n_outer_steps < 1 or self.inner_steps < 1:
            raise InvalidConfiguration("step counts must be at least 1")
        if self.seed < 0:
            raise InvalidConfiguration("seed must be non-negative")
        if self.blend_last_k < 0 or not 0.0 <= self.blend_band <= 0.5:
            raise InvalidConfiguration("blend_last_k >= 0 and blend_band in [0, 0.5]")
        if self.algorithm == "stochsync" and self.nonoverlap_views and not self.max_sigma:
            raise InvalidConfiguration(
                "non-overlapping views need maximum stochasticity: the carried noise "
                "estimate is undefined once the views change"
            )
        if not (isinstance(self.sds_step_size, (int, float)) or self.sds_step_size == "1-abar"):
            raise InvalidConfiguration("sds_step_size must be a number or '1-abar'")
        return self

    def to_dict(self):
        d = asdict(self)
        d["sigma_policy"] = self.sigma_policy.value
        return d

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfiguration(f"unknown sampler keys: {sorted(unknown)}")
        if "sigma_policy" in doc:
            try:
                doc["sigma_policy"] = SigmaPolicy(doc["sigma_policy"])
            except ValueError as exc:
                raise InvalidConfiguration(str(exc)) from exc
        return cls(**doc)

    def grid(self):
        return timestep_grid(self.t_start, self.t_stop, self.n_outer_steps, self.integer_grid)

    def inner_steps_at(self, t):
        if not self.inner_decay:
            return self.inner_steps
        floor = min(MIN_INNER_STEPS, self.inner_steps)
        return max(floor, int(round(self.inner_steps * t / self.t_start)))


@dataclass
class StepRecord:
    step: int
    t: float
    z: np.ndarray
    residuals: list = field(default_factory=list)
    measurement_error: float = None
    wall_time: float = 0.0
    view_ids: tuple = ()
    x_t: np.ndarray = None  # noisy instance states the step denoised, one per view


class Trace(list):
    """List of :class:`StepRecord`, one per outer step (index 0 is initialization)."""

    def ts(self):
        return [r.t for r in self]


def _record(trace, step, t, z, views, x0, proj, t0, x=None):
    if trace is None:
        return
    residuals = [float(np.sum((proj.project(z, v) - x) ** 2)) for v, x in zip(views, x0)]
    rec = StepRecord(step=step, t=t, z=np.array(z, copy=True), residuals=residuals,
                     wall_time=time.perf_counter() - t0, view_ids=tuple(v.id for v in views),
                     x_t=None if x is None else np.array(x, copy=True))
    mask = getattr(proj, "mask", None)
    if mask is not None:
        rec.measurement_error = measurement_error(x0[0], mask, proj.measurement)
    trace.append(rec)


def measurement_error(x0t, mask, y):
    x0t, mask, y = (np.asarray(a, dtype=np.float64) for a in (x0t, mask, y))
    if not x0t.shape == mask.shape == y.shape:
        raise InvalidArgument("x0, mask and measurement shapes must match")
    return float(np.sum((mask * x0t - y) ** 2))


def _project_all(proj, z, views):
    return np.stack([proj.project(z, v) for v in views])


def _aggregate(proj, views, x0, prior):
    return proj.aggregate(list(zip(views, x0)), prior)


def _instance_shape(proj, views):
    shapes = {proj.instance_shape(v) for v in views}
    if len(shapes) != 1:
        raise InvalidConfiguration("all views in a set must share one instance shape")
    return shapes.pop()


class _Blend:
    """Background compositing for the last outer steps.

    Inside the multi-step solve, pixels whose normalised distance to a
    vertical view edge is below a threshold are replaced by the previous
    clean prediction re-noised to the current level.  The threshold falls
    linearly from the whole view to a band of ``band`` view widths.
    """

    def __init__(self, background, edge_distance, band, progress, span, seed, step, view_ids):
        self.background = background
        self.edge = np.asarray(edge_distance)
        self.band = band
        self.progress = progress  # fraction of the blend window already elapsed
        self.span = span  # fraction of the window covered by this solve
        self.seed, self.step, self.view_ids = seed, step, view_ids

    def apply(self, x, s, j, n_inner, sched):
        p = self.progress + self.span * j / max(n_inner, 1)
        threshold = 1.0 - (1.0 - 2.0 * self.band) * p
        mask = (self.edge <= threshold).astype(np.float64)
        ab = sched.abar(s)
        noise = rng.normal_views(self.seed, "blend", self.view_ids, x.shape[1:],
                                 step=self.step, draw=j)
        noisy_bg = np.sqrt(ab) * self.background + np.sqrt(1.0 - ab) * noise
        return mask * noisy_bg + (1.0 - mask) * x


def _dpm2_step(denoiser, x, s, t, sched):
    """Second-order exponential-integrator (midpoint in log-SNR) step from s to t > 0."""
    ab_s, ab_t = sched.abar(s), sched.abar(t)
    lam_s = 0.5 * np.log(ab_s / (1.0 - ab_s))
    lam_t = 0.5 * np.log(ab_t / (1.0 - ab_t))
    h = lam_t - lam_s
    lam_m = lam_s + 0.5 * h
    ab_m = 1.0 / (1.0 + np.exp(-2.0 * lam_m))
    t_m = time_of_abar(sched, ab_m)
    eps_s = denoiser.eps(x, s, sched)
    u = np.sqrt(ab_m / ab_s) * x - np.sqrt(1.0 - ab_m) * np.expm1(0.5 * h) * eps_s
    eps_m = denoiser.eps(u, t_m, sched)
    return np.sqrt(ab_t / ab_s) * x - np.sqrt(1.0 - ab_t) * np.expm1(h) * eps_m


def multistep_x0(denoiser, x_t, t, sched, inner_solver="ddim", inner_steps=50, blend=None):
    """Deterministic multi-step clean prediction; returns ``(x0, eps)``.

    ``inner_steps=1`` is exactly one Tweedie prediction.  Otherwise the
    returned ``eps`` is the noise implied by ``x_t`` and the solved ``x0``.
    DDIM walks a grid linear in t; the second-order solver walks one uniform
    in log-SNR, the spacing its error analysis assumes.
    """
    if inner_steps == 1 or t == 0:
        return predict(denoiser, x_t, t, sched)
    integer = float(t).is_integer()
    if inner_solver == "second_order":
        grid = logsnr_grid(sched, t, inner_steps, integer=integer)
    else:
        grid = timestep_grid(t, 0, inner_steps, integer=integer)
    x = np.asarray(x_t, dtype=np.float64)
    n = len(grid) - 1
    for j in range(n):
        s, s_next = grid[j], grid[j + 1]
        if blend is not None:
            x = blend.apply(x, s, j, n, sched)
        if s_next == 0 or inner_solver == "ddim":
            x0, eps = predict(denoiser, x, s, sched)
            x = ddim_mean(x0, eps, s, 0.0, sched, t_prev=s_next)
        else:
            x = _dpm2_step(denoiser, x, s, s_next, sched)
    return x, eps_from_x0(x_t, x, t, sched)


def ddim_invert(denoiser, x0, t_target, sched, steps=50, fixed_point_iters=3):
    """Deterministic DDIM run in ascending time from a clean sample to ``t_target``.

    Each interval starts from the usual approximation (the noise predicted at
    the lower end) and then takes ``fixed_point_iters`` fixed-point passes so
    that the deterministic step from the upper end lands back on the lower
    point.  With enough passes, inversion followed by :func:`ddim_denoise`
    on the same grid reproduces the input.
    """
    x = np.asarray(x0, dtype=np.float64)
    if t_target == 0:
        return x.copy()
    grid = timestep_grid(t_target, 0, steps, integer=float(t_target).is_integer())[::-1]
    for s, s_next in zip(grid[:-1], grid[1:]):
        ab_s, ab_n = sched.abar(s), sched.abar(s_next)
        eps = denoiser.eps(x, s if s > 0 else s_next, sched)
        x0_hat = tweedie_x0(x, eps, s, sched) if s > 0 else x
        x_next = np.sqrt(ab_n) * x0_hat + np.sqrt(1.0 - ab_n) * eps
        for _ in range(fixed_point_iters):
            # solve x_s = sqrt(ab_s) x0(x_next) + sqrt(1 - ab_s) eps(x_next) for x_next
            eps = denoiser.eps(x_next, s_next, sched)
            x_next = (np.sqrt(ab_n / ab_s) * (x - np.sqrt(1.0 - ab_s) * eps)
                      + np.sqrt(1.0 - ab_n) * eps)
        x = x_next
    return x


def ddim_denoise(denoiser, x_t, t, sched, steps=50):
    """Deterministic DDIM from ``t`` to 0 (alias of the multi-step solve)."""
    return multistep_x0(denoiser, x_t, t, sched, "ddim", steps)[0]


def reverse_process(denoiser, cfg, sched, shape, trace=None):
    """Single-instance DDIM sampling; returns the sample at ``cfg.t_stop``.

    ``shape`` may carry leading batch axes; each batch row is an independent
    chain whose noise is still addressed by (seed, step).
    """
    grid = cfg.grid()
    t0 = time.perf_counter()
    x = rng.normal(cfg.seed, "init", shape, view=0)
    x0, eps = predict(denoiser, x, grid[0], sched)
    if trace is not None:
        trace.append(StepRecord(0, grid[0], x0.copy(), wall_time=time.perf_counter() - t0))
    for k in range(1, len(grid)):
        t, tp = grid[k - 1], grid[k]
        noise = rng.normal(cfg.seed, "step", shape, step=k, view=0)
        x = ddim_step(x, x0, eps, t, cfg.sigma_policy, sched, noise=noise, t_prev=tp)
        x0, eps = predict(denoiser, x, tp, sched)
        if trace is not None:
            trace.append(StepRecord(k, tp, x0.copy(), wall_time=time.perf_counter() - t0))
    return x


def ds_synctweedies(denoiser, proj, cfg, sched, trace=None):
    """Diffusion synchronization over a fixed view set with carried noise estimates."""
    grid = cfg.grid()
    t0 = time.perf_counter()
    views = proj.fixed_views()
    ids = [v.id for v in views]
    shape = _instance_shape(proj, views)
    x = rng.normal_views(cfg.seed, "init", ids, shape)
    x0, eps = predict(denoiser, x, grid[0], sched)
    z = _aggregate(proj, views, x0, None)
    _record(trace, 0, grid[0], z, views, x0, proj, t0, x)
    for k in range(1, len(grid)):
        t, tp = grid[k - 1], grid[k]
        x0 = _project_all(proj, z, views)
        noise = rng.normal_views(cfg.seed, "step", ids, shape, step=k)
        x = ddim_step(None, x0, eps, t, cfg.sigma_policy, sched, noise=noise, t_prev=tp)
        x0, eps = predict(denoiser, x, tp, sched)
        z = _aggregate(proj, views, x0, z)
        _record(trace, k, tp, z, views, x0, proj, t0, x)
    return z


def _sync_loop(denoiser, proj, cfg, sched, z, eps, levels, t_cur, step0, trace, t0,
               stream="step"):
    n_levels = len(levels)
    for i, t_next in enumerate(levels):
        k = step0 + i
        views = proj.view_set(k % 2) if cfg.nonoverlap_views else proj.fixed_views()
        ids = [v.id for v in views]
        shape = _instance_shape(proj, views)
        x0 = _project_all(proj, z, views)
        noise = rng.normal_views(cfg.seed, stream, ids, shape, step=k)
        if cfg.max_sigma:
            sigma = SigmaPolicy.MAX.sigma(sched, t_cur, t_next)
            x = max_sigma_mean(x0, t_cur, sched, t_prev=t_next) + sigma * noise
        else:
            x = ddim_step(None, x0, eps, t_cur, cfg.sigma_policy, sched, noise=noise, t_prev=t_next)
        if cfg.multistep_x0:
            blend = None
            from_end = n_levels - i  # 1 on the final level
            edge = proj.edge_distance(views[0])
            if from_end <= cfg.blend_last_k and edge is not None and t_next > 0:
                done = cfg.blend_last_k - from_end
                blend = _Blend(x0, edge, cfg.blend_band, done / cfg.blend_last_k,
                               1.0 / cfg.blend_last_k, cfg.seed, k, ids)
            x0, eps = multistep_x0(denoiser, x, t_next, sched, cfg.inner_solver,
                                   cfg.inner_steps_at(t_next), blend=blend)
        else:
            x0, eps = predict(denoiser, x, t_next, sched)
        z = _aggregate(proj, views, x0, z)
        _record(trace, k, t_next, z, views, x0, proj, t0, x)
        t_cur = t_next
    return z


def stochsync(denoiser, proj, cfg, sched, trace=None):
    """Synchronization with maximum stochasticity, multi-step predictions and
    alternating non-overlapping views; each toggle can be switched off."""
    if cfg.nonoverlap_views and not cfg.max_sigma:
        raise InvalidConfiguration("non-overlapping views need maximum stochasticity")
    grid = cfg.grid()
    t0 = time.perf_counter()
    views = proj.view_set(0) if cfg.nonoverlap_views else proj.fixed_views()
    ids = [v.id for v in views]
    x = rng.normal_views(cfg.seed, "init", ids, _instance_shape(proj, views))
    if cfg.multistep_x0:
        x0, eps = multistep_x0(denoiser, x, grid[0], sched, cfg.inner_solver, cfg.inner_steps)
    else:
        x0, eps = predict(denoiser, x, grid[0], sched)
    z = _aggregate(proj, views, x0, None)
    _record(trace, 0, grid[0], z, views, x0, proj, t0, x)
    return _sync_loop(denoiser, proj, cfg, sched, z, eps, grid[1:], grid[0], 1, trace, t0)


def sdedit_step(denoiser, x0t, t_next, sched, noise, inner_steps, inner_solver="ddim"):
    """Forward-corrupt a clean estimate to ``t_next`` then solve back deterministically."""
    ab = sched.abar(t_next)
    x = np.sqrt(ab) * x0t + np.sqrt(1.0 - ab) * noise
    return multistep_x0(denoiser, x, t_next, sched, inner_solver, inner_steps)[0]


def sdedit_refine(denoiser, proj, z, t_restart, cfg, sched, trace=None):
    """Re-noise the canonical sample to ``t_restart`` and rerun the StochSync loop."""
    z = np.array(z, dtype=np.float64)
    if t_restart <= max(cfg.t_stop, 0):
        return z
    if t_restart > cfg.t_start:
        raise InvalidConfiguration("t_restart must not exceed t_start")
    span = cfg.t_start - cfg.t_stop
    n = max(1, int(round(cfg.n_outer_steps * (t_restart - cfg.t_stop) / span)))
    levels = timestep_grid(t_restart, cfg.t_stop, n, cfg.integer_grid)
    sub = SamplerConfig(**{**cfg.__dict__, "max_sigma": True})
    # eps is never read under maximum stochasticity; the start level is only a label
    return _sync_loop(denoiser, proj, sub, sched, z, None, levels, cfg.t_start, 1,
                      trace, time.perf_counter(), stream="refine")


def sdi(denoiser, proj, cfg, sched, trace=None):
    """Deterministic baseline that recovers x_t by DDIM inversion every outer step."""
    grid = cfg.grid()
    t0 = time.perf_counter()
    views = proj.view_set(0) if cfg.nonoverlap_views else proj.fixed_views()
    ids = [v.id for v in views]
    x = rng.normal_views(cfg.seed, "init", ids, _instance_shape(proj, views))
    x0, _ = predict(denoiser, x, grid[0], sched)
    z = _aggregate(proj, views, x0, None)
    _record(trace, 0, grid[0], z, views, x0, proj, t0, x)
    for k in range(1, len(grid)):
        t, tp = grid[k - 1], grid[k]
        views = proj.view_set(k % 2) if cfg.nonoverlap_views else proj.fixed_views()
        x0 = _project_all(proj, z, views)
        x_t = ddim_invert(denoiser, x0, t, sched, cfg.inner_steps_at(t))
        eps = denoiser.eps(x_t, t, sched)
        x = ddim_mean(x0, eps, t, 0.0, sched, t_prev=tp)
        x0, _ = predict(denoiser, x, tp, sched)
        z = _aggregate(proj, views, x0, z)
        _record(trace, k, tp, z, views, x0, proj, t0, x)
    return z


def _sds_weight(cfg, t, sched):
    if cfg.sds_step_size == "1-abar":
        return 1.0 - sched.abar(t)
    return float(cfg.sds_step_size)


def sds(denoiser, proj, cfg, sched, z=None, trace=None):
    """Score distillation: ``cfg.n_outer_steps`` gradient steps at random t and view."""
    z = np.zeros(proj.canonical_shape) if z is None else np.array(z, dtype=np.float64)
    pool = proj.fixed_views()
    lo = max(cfg.t_stop, 0) + 1
    t0 = time.perf_counter()
    for it in range(cfg.n_outer_steps):
        g = rng.generator(cfg.seed, "sds", step=it)
        t = int(g.integers(lo, cfg.t_start + 1))
        view = pool[int(g.integers(len(pool)))]
        x0 = proj.project(z, view)
        eps = g.standard_normal(x0.shape)
        x = max_sigma_mean(x0, t, sched) + SigmaPolicy.MAX.sigma(sched, t) * eps
        x0_prev, _ = predict(denoiser, x, t - 1, sched)
        z = z - _sds_weight(cfg, t, sched) * proj.splat(x0 - x0_prev, view).value_sum
        _record(trace, it, t, z, [view], x0_prev[None], proj, t0, x[None])
    return z


def sds_losses(denoiser, x0, t, eps, sched):
    """Clean-space and noise-space SDS losses for one draw, plus their ratio's prediction.

    Returns ``(clean, noise, scale)`` with ``clean == scale * noise`` in exact arithmetic.
    """
    tp = t - 1
    ab = sched.abar(tp)
    x = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    eps_hat = denoiser.eps(x, tp, sched)
    clean = float(np.sum((x0 - tweedie_x0(x, eps_hat, tp, sched)) ** 2))
    noise = float(np.sum((eps - eps_hat) ** 2))
    return clean, noise, (1.0 - ab) / ab


def run_sampler(denoiser, proj, cfg, sched, trace=None):
    cfg.validate(sched.T)
    if cfg.algorithm == "reverse":
        return reverse_process(denoiser, cfg, sched, proj.canonical_shape, trace)
    if cfg.algorithm == "ds":
        return ds_synctweedies(denoiser, proj, cfg, sched, trace)
    if cfg.algorithm == "sds":
        return sds(denoiser, proj, cfg, sched, trace=trace)
    if cfg.algorithm == "sdi":
        return sdi(denoiser, proj, cfg, sched, trace)
    return stochsync(denoiser, proj, cfg, sched, trace)
