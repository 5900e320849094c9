"""Closed-form DDIM arithmetic.

Notation: ``alpha_bar[t]`` is the cumulative signal coefficient, so that
``x_t = sqrt(alpha_bar[t]) x_0 + sqrt(1 - alpha_bar[t]) eps``.  Index 0 is the
clean end (``alpha_bar[0] == 1``).  Some texts write this product as
``alpha_t``; here it is always ``alpha_bar``.

Every step function takes the current timestep ``t`` and an optional target
``t_prev`` (default ``t - 1``) so the same formulas serve strided grids.
Timesteps may be fractional; the schedule interpolates ``log alpha_bar``
linearly between integer knots.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidArgument, SingularityError

BETA_START = 1e-4
BETA_END = 2e-2
COSINE_OFFSET = 0.008
# relative slack before sigma^2 > 1 - alpha_bar_prev counts as a violation
_RADICAND_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class Schedule:
    T: int
    alpha_bar: np.ndarray
    kind: str = "linear_beta"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T + 1,):
            raise InvalidArgument(f"alpha_bar must have length T+1={self.T + 1}")
        if ab[0] != 1.0 or not np.all(np.isfinite(ab)) or ab[-1] <= 0:
            raise InvalidArgument("alpha_bar must start at 1 and stay in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise InvalidArgument("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "_log_ab", np.log(ab))

    def abar(self, t):
        """alpha_bar at a (possibly fractional) timestep."""
        if isinstance(t, (int, np.integer)) or float(t).is_integer():
            i = int(t)
            if not 0 <= i <= self.T:
                raise InvalidArgument(f"timestep {t} outside [0, {self.T}]")
            return float(self.alpha_bar[i])
        t = float(t)
        if not 0.0 <= t <= self.T:
            raise InvalidArgument(f"timestep {t} outside [0, {self.T}]")
        return float(np.exp(np.interp(t, np.arange(self.T + 1), self._log_ab)))


def make_schedule(kind="linear_beta", T=1000):
    if T < 1:
        raise InvalidArgument("T must be at least 1")
    if kind == "linear_beta":
        betas = np.linspace(BETA_START, BETA_END, T, dtype=np.float64)
    elif kind == "cosine":
        s = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((s + COSINE_OFFSET) / (1 + COSINE_OFFSET) * np.pi / 2) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], 0.999)
    else:
        raise InvalidArgument(f"unknown schedule kind {kind!r}")
    ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return Schedule(T=T, alpha_bar=ab, kind=kind)


def _prev(t, t_prev):
    return t - 1 if t_prev is None else t_prev


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise InvalidArgument(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


class SigmaPolicy(Enum):
    ZERO = "zero"
    DDPM = "ddpm"
    MAX = "max"

    def sigma(self, sched, t, t_prev=None):
        ab_prev = sched.abar(_prev(t, t_prev))
        if self is SigmaPolicy.ZERO:
            return 0.0
        if self is SigmaPolicy.MAX:
            return float(np.sqrt(1.0 - ab_prev))
        ab_t = sched.abar(t)
        return float(np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev))


def forward_sample(x0, t, eps, sched):
    _check_shapes(x0, eps)
    ab = sched.abar(t)
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * eps


def tweedie_x0(x_t, eps_t, t, sched):
    """Clean-sample prediction from a noisy sample and its noise estimate."""
    ab = sched.abar(t)
    if ab <= 0.0:
        raise SingularityError("alpha_bar is zero; x0 is unidentifiable")
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - ab) * eps_t) / np.sqrt(ab)


def eps_from_x0(x_t, x0t, t, sched):
    """Noise implied by a noisy sample and a clean prediction (inverse of tweedie_x0)."""
    ab = sched.abar(t)
    if ab >= 1.0:
        raise SingularityError("alpha_bar is one; noise is unidentifiable at t=0")
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(ab) * x0t) / np.sqrt(1.0 - ab)


def _eps_coeff(sigma, ab_prev):
    rad = 1.0 - ab_prev - sigma * sigma
    slack = _RADICAND_RTOL * max(1.0 - ab_prev, 1e-300)
    if rad < -slack:
        raise InvalidArgument(
            f"sigma^2={sigma * sigma!r} exceeds 1 - alpha_bar_prev={1.0 - ab_prev!r}"
        )
    # sigma = sqrt(1 - alpha_bar_prev) must cancel the noise term exactly
    return 0.0 if rad <= slack else np.sqrt(rad)


def ddim_mean(x0, eps_t, t, sigma, sched, t_prev=None):
    """DDIM posterior mean written with the clean prediction and the noise estimate."""
    ab_prev = sched.abar(_prev(t, t_prev))
    return np.sqrt(ab_prev) * x0 + _eps_coeff(sigma, ab_prev) * eps_t


def ddim_posterior_mean(x0, x_t, t, sigma, sched, t_prev=None):
    """The same mean written with the clean sample and the current noisy sample."""
    ab_prev = sched.abar(_prev(t, t_prev))
    ab_t = sched.abar(t)
    direction = (x_t - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t)
    return np.sqrt(ab_prev) * x0 + _eps_coeff(sigma, ab_prev) * direction


def max_sigma_mean(x0, t, sched, t_prev=None):
    return np.sqrt(sched.abar(_prev(t, t_prev))) * np.asarray(x0, dtype=np.float64)


def ddim_step(x_t, x0t, eps_t, t, policy, sched, noise=None, rng=None, t_prev=None):
    """One draw from the DDIM posterior.

    ``noise`` is a standard-normal array (preferred, keeps draws addressable);
    otherwise one is drawn from ``rng``.  ``x_t`` is accepted for signature
    symmetry with the posterior but is not needed once ``eps_t`` is known.
    """
    _check_shapes(x0t, eps_t)
    sigma = policy.sigma(sched, t, t_prev)
    mean = ddim_mean(x0t, eps_t, t, sigma, sched, t_prev)
    if sigma == 0.0:
        return mean
    if noise is None:
        if rng is None:
            raise InvalidArgument("a stochastic step needs noise or rng")
        noise = rng.standard_normal(np.shape(x0t))
    return mean + sigma * noise


def timestep_grid(t_start, t_stop, n_steps, integer=True):
    """Strictly decreasing grid of ``n_steps + 1`` points from t_start to t_stop.

    With ``integer`` the points are rounded and duplicates dropped, so the
    grid may come out shorter than requested.
    """
    if n_steps < 1:
        raise InvalidArgument("n_steps must be at least 1")
    if t_start <= t_stop:
        raise InvalidArgument("t_start must exceed t_stop")
    pts = np.linspace(t_start, t_stop, n_steps + 1)
    if not integer:
        return [float(p) for p in pts]
    out = []
    for p in np.rint(pts).astype(int):
        if not out or p < out[-1]:
            out.append(int(p))
    return out


def time_of_abar(sched, ab):
    """Fractional timestep whose interpolated alpha_bar equals ``ab``."""
    neg_log = -np.log(sched.alpha_bar)
    return float(np.interp(-np.log(ab), neg_log, np.arange(sched.T + 1)))


def logsnr_grid(sched, t_start, n_steps, integer=True):
    """Decreasing grid from ``t_start`` to 0, uniform in log-SNR down to ``t = 1``.

    The last interval jumps from ``t = 1`` to the clean end, where log-SNR is
    infinite.  With ``integer`` the points are rounded and duplicates dropped.
    """
    if n_steps < 1:
        raise InvalidArgument("n_steps must be at least 1")
    if t_start <= 0:
        raise InvalidArgument("t_start must be positive")
    if t_start <= 1 or n_steps == 1:
        return [t_start, 0]

    def lam(t):
        ab = sched.abar(t)
        return 0.5 * np.log(ab / (1.0 - ab))

    lams = np.linspace(lam(t_start), lam(1), n_steps)
    pts = [float(t_start)]
    for lv in lams[1:]:
        pts.append(time_of_abar(sched, 1.0 / (1.0 + np.exp(-2.0 * lv))))
    pts[-1] = 1.0
    pts.append(0.0)
    if not integer:
        return pts
    out = []
    for p in np.rint(pts).astype(int):
        if not out or p < out[-1]:
            out.append(int(p))
    return out
