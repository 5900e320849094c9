"""Analytic noise predictors built on isotropic Gaussian mixtures.

A mixture of ``N(m_i, s_i^2 I)`` stays a mixture under the forward process,
so the exact posterior mean ``E[x0 | x_t]`` is available in closed form and
stands in for a trained network.  The noise prediction is derived from it by
inverting Tweedie's formula, which keeps the two views consistent by
construction.
"""

import json
from dataclasses import dataclass

import numpy as np

from .diffusion import eps_from_x0, tweedie_x0
from .errors import InvalidArgument

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        k = w.shape[0]
        if k == 0 or m.shape[0] != k or v.shape[0] != k:
            raise InvalidArgument("weights, means and variances must agree in length")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidArgument("weights must be positive and sum to 1")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise InvalidArgument("variances must be positive and finite")
        if not np.all(np.isfinite(m)):
            raise InvalidArgument("means must be finite")
        labels = tuple(self.labels) if self.labels else (None,) * k
        if len(labels) != k:
            raise InvalidArgument("one label per component")
        for arr in (w, m, v):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "labels", labels)

    @property
    def d(self):
        return self.means.shape[1]

    def restrict(self, condition):
        """Sub-mixture of the components carrying ``condition`` (a label or labels)."""
        if condition is None:
            return self
        wanted = {condition} if isinstance(condition, str) else set(condition)
        keep = [i for i, lab in enumerate(self.labels) if lab in wanted]
        if not keep:
            raise InvalidArgument(f"no component carries label {condition!r}")
        w = self.weights[keep]
        return GaussianMixture(
            weights=w / w.sum(),
            means=self.means[keep],
            variances=self.variances[keep],
            labels=tuple(self.labels[i] for i in keep),
        )

    @classmethod
    def from_dict(cls, doc):
        try:
            comps = doc["components"]
            gmm = cls(
                weights=[c["weight"] for c in comps],
                means=[c["mean"] for c in comps],
                variances=[c["var"] for c in comps],
                labels=tuple(c.get("label") for c in comps),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise InvalidArgument(f"malformed mixture description: {exc!r}") from exc
        if "d" in doc and int(doc["d"]) != gmm.d:
            raise InvalidArgument(f"declared d={doc['d']} but means have d={gmm.d}")
        return gmm

    def to_dict(self):
        return {
            "d": self.d,
            "components": [
                {"weight": float(w), "mean": m.tolist(), "var": float(v), "label": lab}
                for w, m, v, lab in zip(self.weights, self.means, self.variances, self.labels)
            ],
        }


def load_gmm(path):
    with open(path, encoding="utf-8") as fh:
        return GaussianMixture.from_dict(json.load(fh))


def save_gmm(gmm, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(gmm.to_dict(), fh, indent=2, sort_keys=True)


def _responsibilities(gmm, x, ab):
    # x: (n, d) -> (n, K) posterior component probabilities given x_t
    centers = np.sqrt(ab) * gmm.means
    var_t = ab * gmm.variances + (1.0 - ab)
    sq = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    logp = np.log(gmm.weights) - 0.5 * (sq / var_t + gmm.d * np.log(var_t))
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=1, keepdims=True), centers, var_t


def _flatten(gmm, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != gmm.d:
        raise InvalidArgument(f"last axis must be d={gmm.d}, got shape {x.shape}")
    return x.reshape(-1, gmm.d), x.shape


def gmm_posterior_x0(gmm, x_t, t, sched, condition=None):
    """Exact E[x0 | x_t] under the (optionally label-restricted) mixture."""
    gmm = gmm.restrict(condition)
    flat, shape = _flatten(gmm, x_t)
    ab = sched.abar(t)
    resp, centers, var_t = _responsibilities(gmm, flat, ab)
    gain = np.sqrt(ab) * gmm.variances / var_t
    # per-component posterior means, (n, K, d)
    comp = gmm.means[None] + gain[None, :, None] * (flat[:, None, :] - centers[None])
    return np.einsum("nk,nkd->nd", resp, comp).reshape(shape)


def gmm_eps(gmm, x_t, t, sched, condition=None):
    return eps_from_x0(x_t, gmm_posterior_x0(gmm, x_t, t, sched, condition), t, sched)


def gmm_score_nll(gmm, samples):
    """Mean negative log-likelihood of clean samples under the mixture."""
    flat = np.asarray(samples, dtype=np.float64)
    if flat.size == 0:
        raise InvalidArgument("need at least one sample")
    flat, _ = _flatten(gmm, flat)
    sq = np.sum((flat[:, None, :] - gmm.means[None]) ** 2, axis=-1)
    logp = np.log(gmm.weights) - 0.5 * (
        sq / gmm.variances + gmm.d * (_LOG_2PI + np.log(gmm.variances))
    )
    top = logp.max(axis=1, keepdims=True)
    ll = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
    return float(-ll.mean())


class GMMDenoiser:
    """Noise predictor over vectors whose last axis has length ``gmm.d``."""

    def __init__(self, gmm, condition=None):
        self.gmm = gmm.restrict(condition)
        self.condition = condition

    def eps(self, x_t, t, sched):
        return gmm_eps(self.gmm, x_t, t, sched)

    def x0_and_eps(self, x_t, t, sched):
        x0 = gmm_posterior_x0(self.gmm, x_t, t, sched)
        return x0, eps_from_x0(x_t, x0, t, sched)

    def nll(self, samples):
        return gmm_score_nll(self.gmm, samples)


class PatchDenoiser:
    """Applies a patch mixture independently to each non-overlapping tile.

    Inputs are ``(..., H, W, C)`` images with H and W divisible by the patch
    size; the mixture dimension must equal ``ph * pw * C``.
    """

    def __init__(self, gmm, patch=(8, 8), condition=None):
        self.gmm = gmm.restrict(condition)
        self.patch = tuple(patch)
        self.condition = condition

    def _to_patches(self, img):
        img = np.asarray(img, dtype=np.float64)
        *lead, h, w, c = img.shape
        ph, pw = self.patch
        if h % ph or w % pw:
            raise InvalidArgument(f"image {h}x{w} not divisible into {ph}x{pw} patches")
        if ph * pw * c != self.gmm.d:
            raise InvalidArgument(f"patch dimension {ph * pw * c} != mixture d={self.gmm.d}")
        tiles = img.reshape(*lead, h // ph, ph, w // pw, pw, c)
        n = len(lead)
        order = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
        return tiles.transpose(order).reshape(-1, self.gmm.d), img.shape

    def _from_patches(self, flat, shape):
        *lead, h, w, c = shape
        ph, pw = self.patch
        tiles = flat.reshape(*lead, h // ph, w // pw, ph, pw, c)
        n = len(lead)
        order = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
        return tiles.transpose(order).reshape(shape)

    def eps(self, x_t, t, sched):
        flat, shape = self._to_patches(x_t)
        return self._from_patches(gmm_eps(self.gmm, flat, t, sched), shape)

    def x0_and_eps(self, x_t, t, sched):
        flat, shape = self._to_patches(x_t)
        x0 = self._from_patches(gmm_posterior_x0(self.gmm, flat, t, sched), shape)
        return x0, eps_from_x0(x_t, x0, t, sched)

    def nll(self, samples):
        flat, _ = self._to_patches(samples)
        return gmm_score_nll(self.gmm, flat)


def predict(denoiser, x_t, t, sched):
    """Return ``(x0|t, eps_t)`` from one denoiser call; the clean end is passed through.

    Denoisers that know their clean-sample estimate directly expose
    ``x0_and_eps``; otherwise Tweedie's formula is applied to ``eps``.
    """
    if sched.abar(t) >= 1.0:
        return np.asarray(x_t, dtype=np.float64), np.zeros(np.shape(x_t))
    if hasattr(denoiser, "x0_and_eps"):
        return denoiser.x0_and_eps(x_t, t, sched)
    eps = denoiser.eps(x_t, t, sched)
    return tweedie_x0(x_t, eps, t, sched), eps


# Built-in mixtures used by the presets.

def two_cluster_mixture(d=2, separation=1.0, var=0.05):
    means = np.stack([np.full(d, separation), np.full(d, -separation)])
    return GaussianMixture(
        weights=[0.5, 0.5], means=means, variances=[var, var], labels=("a", "b")
    )


def patch_mixture(patch=(8, 8), channels=1, levels=(-0.75, -0.25, 0.25, 0.75), var=0.01):
    """Flat tiles at a few grey levels plus left/right ramps between the extremes."""
    ph, pw = patch
    ramp = np.broadcast_to(np.linspace(levels[0], levels[-1], pw)[None, :, None], (ph, pw, channels))
    means = [np.full((ph, pw, channels), lv) for lv in levels] + [ramp, ramp[:, ::-1]]
    labels = tuple(f"flat{i}" for i in range(len(levels))) + ("ramp_up", "ramp_down")
    k = len(means)
    return GaussianMixture(
        weights=np.full(k, 1.0 / k),
        means=np.stack([m.reshape(-1) for m in means]),
        variances=np.full(k, var),
        labels=labels,
    )


def ring_mixture(w=4, levels=(-1.0, 1.0), var=0.01):
    means = np.stack([np.full(w, lv) for lv in levels])
    k = len(levels)
    return GaussianMixture(
        weights=np.full(k, 1.0 / k), means=means, variances=np.full(k, var),
        labels=tuple(f"level{i}" for i in range(k)),
    )


def point_mass(mean, var=1e-300, label=None):
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return GaussianMixture(weights=[1.0], means=mean[None], variances=[var], labels=(label,))
