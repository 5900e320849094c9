"""Canonical <-> instance operators and their least-squares aggregation.

Each projector exposes the same small surface used by the samplers:

* ``project(z, view)`` maps the canonical sample to one instance image,
* ``splat(img, view)`` applies the adjoint and returns a :class:`SplatAccumulator`,
* ``aggregate(pairs, prior)`` solves ``argmin_z sum_i ||f_i(z) - x_i||^2``,
* ``view_set(parity)`` / ``fixed_views()`` enumerate cameras.

Linear operators are stored as sparse matrices so projection and splatting
are exact transposes of each other.
"""

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr

from .errors import InvalidArgument


@dataclass(frozen=True)
class View:
    azimuth: float = 0.0
    elevation: float = 0.0
    fov: float = 72.0
    width: int = 8
    height: int = 8
    id: int = 0

    def __post_init__(self):
        if not 0.0 < self.fov < 180.0:
            raise InvalidArgument(f"fov must lie strictly inside (0, 180), got {self.fov}")
        if self.width < 1 or self.height < 1:
            raise InvalidArgument("view resolution must be at least 1x1")
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)


@dataclass(frozen=True)
class RingView:
    offset: int
    id: int = 0


@dataclass
class SplatAccumulator:
    value_sum: np.ndarray
    weight_sum: np.ndarray

    def __add__(self, other):
        return SplatAccumulator(self.value_sum + other.value_sum, self.weight_sum + other.weight_sum)

    def resolve(self, prior=None):
        """Per-texel ``value_sum / weight_sum``; uncovered texels keep ``prior`` (or 0)."""
        covered = self.weight_sum > 0
        out = np.zeros_like(self.value_sum) if prior is None else np.array(prior, dtype=np.float64)
        np.divide(self.value_sum, self.weight_sum, out=out, where=covered)
        return out


def load_views(path):
    """Read a JSON list of ``{azimuth, elevation, fov, width, height}`` objects."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return [View(id=i, **{k: entry[k] for k in ("azimuth", "elevation", "fov", "width", "height")})
            for i, entry in enumerate(doc)]


def sample_nonoverlapping_views(parity, n_views=5, fov=None, width=8, height=8, elevation=0.0):
    """One of two azimuthal tilings; parity 1 is parity 0 shifted by half a view."""
    if fov is None:
        fov = 360.0 / n_views
    if not math.isclose(n_views * fov, 360.0):
        raise InvalidArgument(f"{n_views} views of {fov} deg do not tile 360 deg")
    step = 360.0 / n_views
    shift = step / 2 if parity % 2 else 0.0
    base = (parity % 2) * n_views
    return [View(azimuth=i * step + shift, elevation=elevation, fov=fov,
                 width=width, height=height, id=base + i)
            for i in range(n_views)]


def ring_views(parity, n, w):
    if w > n or n % w:
        raise InvalidArgument(f"windows of {w} do not tile a ring of {n}")
    shift = w // 2 if parity % 2 else 0
    base = (parity % 2) * (n // w)
    return [RingView(offset=(k * w + shift) % n, id=base + k) for k in range(n // w)]


def _edge_distance(width, height=None):
    # normalised horizontal distance to the nearest vertical view edge, in (0, 1]
    u = np.arange(width) + 0.5
    r = np.minimum(u, width - u) / (width / 2.0)
    if height is None:
        return r
    return np.broadcast_to(r[None, :, None], (height, width, 1))


class _LinearProjector:
    """Shared machinery for operators given by a sparse matrix per view."""

    channels = 1
    solver = "splat"

    def matrix(self, view):
        raise NotImplementedError

    def instance_shape(self, view):
        raise NotImplementedError

    def project(self, z, view):
        flat = np.asarray(z, dtype=np.float64).reshape(-1, self.channels)
        return (self.matrix(view) @ flat).reshape(self.instance_shape(view))

    def splat(self, img, view):
        img = np.asarray(img, dtype=np.float64)
        if img.shape != self.instance_shape(view):
            raise InvalidArgument(f"image shape {img.shape} != view shape {self.instance_shape(view)}")
        P = self.matrix(view)
        values = P.T @ img.reshape(-1, self.channels)
        weights = np.asarray(P.sum(axis=0)).reshape(-1, 1)
        return SplatAccumulator(
            values.reshape(self.canonical_shape),
            np.broadcast_to(weights, values.shape).reshape(self.canonical_shape).copy(),
        )

    def coverage(self, view):
        """Boolean canonical mask of texels touched by the view."""
        P = self.matrix(view)
        hit = np.asarray((P != 0).sum(axis=0)).reshape(-1) > 0
        return hit.reshape(self.canonical_shape[: self.spatial_ndim])

    def aggregate(self, pairs, prior=None):
        if not pairs:
            raise InvalidArgument("aggregation needs at least one (view, image) pair")
        acc = None
        for view, img in pairs:
            part = self.splat(img, view)
            acc = part if acc is None else acc + part
        z = acc.resolve(prior)
        if self.solver == "lsqr":
            z = self._refine_lsqr(pairs, z, acc.weight_sum > 0)
        return z

    def _refine_lsqr(self, pairs, z, covered):
        # exact least squares on covered texels, warm-started from splat-and-divide
        A = sp.vstack([self.matrix(v) for v, _ in pairs]).tocsc()
        cols = np.flatnonzero(covered.reshape(-1, self.channels)[:, 0])
        A = A[:, cols]
        out = z.reshape(-1, self.channels).copy()
        for c in range(self.channels):
            b = np.concatenate([np.asarray(img).reshape(-1, self.channels)[:, c] for _, img in pairs])
            x0 = out[cols, c]
            dx = lsqr(A, b - A @ x0, atol=1e-15, btol=1e-15, iter_lim=10000)[0]
            out[cols, c] = x0 + dx
        return out.reshape(self.canonical_shape)


class RingProjector(_LinearProjector):
    """Exact integer-index windows of width ``w`` on a periodic 1-D signal of length ``n``."""

    spatial_ndim = 1

    def __init__(self, n, w):
        if not 1 <= w <= n:
            raise InvalidArgument("ring window must satisfy 1 <= w <= n")
        self.n, self.w = n, w
        self.canonical_shape = (n,)
        self._cache = {}

    def instance_shape(self, view):
        return (self.w,)

    def matrix(self, view):
        off = view.offset if isinstance(view, RingView) else int(view)
        if not 0 <= off < self.n:
            raise InvalidArgument(f"offset {off} outside [0, {self.n})")
        if off not in self._cache:
            cols = (off + np.arange(self.w)) % self.n
            self._cache[off] = sp.csr_matrix(
                (np.ones(self.w), (np.arange(self.w), cols)), shape=(self.w, self.n)
            )
        return self._cache[off]

    def view_set(self, parity):
        return ring_views(parity, self.n, self.w)

    def fixed_views(self):
        return self.view_set(0) + self.view_set(1)

    def edge_distance(self, view):
        return _edge_distance(self.w)


def ring_project(z, offset, w):
    z = np.asarray(z)
    return z[(offset + np.arange(w)) % z.shape[0]]


def ring_splat(vec, offset, n):
    vec = np.asarray(vec, dtype=np.float64)
    idx = (offset + np.arange(vec.shape[0])) % n
    values = np.zeros(n)
    weights = np.zeros(n)
    np.add.at(values, idx, vec)
    np.add.at(weights, idx, 1.0)
    return SplatAccumulator(values, weights)


def _view_directions(view):
    """Unit-free ray directions (x right, y up, z forward) for every pixel, world frame."""
    f = (view.width / 2.0) / math.tan(math.radians(view.fov) / 2.0)
    u = np.arange(view.width) + 0.5 - view.width / 2.0
    v = np.arange(view.height) + 0.5 - view.height / 2.0
    x = np.broadcast_to(u[None, :] / f, (view.height, view.width))
    y = np.broadcast_to(-v[:, None] / f, (view.height, view.width))
    z = np.ones_like(x)
    el, az = math.radians(view.elevation), math.radians(view.azimuth)
    y1 = y * math.cos(el) + z * math.sin(el)
    z1 = -y * math.sin(el) + z * math.cos(el)
    X = x * math.cos(az) + z1 * math.sin(az)
    Z = -x * math.sin(az) + z1 * math.cos(az)
    return X, y1, Z


def view_lonlat(view):
    X, Y, Z = _view_directions(view)
    return np.arctan2(X, Z), np.arctan2(Y, np.hypot(X, Z))


def _bilinear_taps(lon, lat, height, width):
    """Flat canonical indices (4, ...) and weights (4, ...) for lon/lat samples."""
    col = (np.asarray(lon) + np.pi) / (2 * np.pi) * width - 0.5
    row = (np.pi / 2 - np.asarray(lat)) / np.pi * height - 0.5
    row = np.clip(row, 0.0, height - 1.0)
    c0 = np.floor(col)
    fc = col - c0
    r0 = np.minimum(np.floor(row), height - 1)
    fr = row - r0
    r1 = np.minimum(r0 + 1, height - 1)
    c0 = c0.astype(np.int64) % width
    c1 = (c0 + 1) % width
    r0, r1 = r0.astype(np.int64), r1.astype(np.int64)
    idx = np.stack([r0 * width + c0, r0 * width + c1, r1 * width + c0, r1 * width + c1])
    wts = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
    return idx, wts


def sample_equirect(z, lon, lat):
    """Bilinear lookup of an ``(H, W, C)`` lat-long grid at arbitrary directions."""
    z = np.asarray(z, dtype=np.float64)
    h, w, c = z.shape
    idx, wts = _bilinear_taps(lon, lat, h, w)
    flat = z.reshape(-1, c)
    return np.einsum("k...,k...c->...c", wts, flat[idx])


@lru_cache(maxsize=256)
def _equirect_matrix(view, height, width):
    lon, lat = view_lonlat(view)
    idx, wts = _bilinear_taps(lon, lat, height, width)
    npix = view.height * view.width
    rows = np.broadcast_to(np.arange(npix), (4, npix))
    return sp.csr_matrix(
        (wts.reshape(4, -1).ravel(), (rows.ravel(), idx.reshape(4, -1).ravel())),
        shape=(npix, height * width),
    )


class EquirectProjector(_LinearProjector):
    """Pinhole views of an ``(H, 2H, C)`` equirectangular panorama.

    Horizontal sampling wraps around; vertical sampling clamps at the poles.
    ``solver="splat"`` is the diagonal normal-equation solve, ``"lsqr"`` the
    exact sparse least-squares solve.
    """

    spatial_ndim = 2

    def __init__(self, height=32, width=None, channels=1, n_views=5, view_size=8,
                 fov=None, solver="splat", views=None):
        width = 2 * height if width is None else width
        if width != 2 * height:
            raise InvalidArgument("equirectangular grids need width == 2 * height")
        if solver not in ("splat", "lsqr"):
            raise InvalidArgument(f"unknown solver {solver!r}")
        self.height, self.width, self.channels = height, width, channels
        self.canonical_shape = (height, width, channels)
        self.n_views, self.view_size, self.solver = n_views, view_size, solver
        self.fov = 360.0 / n_views if fov is None else fov
        self._custom = list(views) if views else None

    def instance_shape(self, view):
        return (view.height, view.width, self.channels)

    def matrix(self, view):
        return _equirect_matrix(view, self.height, self.width)

    def view_set(self, parity):
        if self._custom:
            return self._custom
        return sample_nonoverlapping_views(parity, self.n_views, self.fov,
                                           self.view_size, self.view_size)

    def fixed_views(self):
        if self._custom:
            return self._custom
        return self.view_set(0) + self.view_set(1)

    def edge_distance(self, view):
        return _edge_distance(view.width, view.height)


def equirect_project(z, view):
    z = np.asarray(z, dtype=np.float64)
    h, w, c = z.shape
    return (_equirect_matrix(view, h, w) @ z.reshape(-1, c)).reshape(view.height, view.width, c)


def equirect_splat(img, view, canonical_shape):
    h, w, c = canonical_shape
    return EquirectProjector(h, w, c).splat(img, view)


class IdentityProjector:
    """Canonical space equals instance space; every view sees everything."""

    spatial_ndim = None

    def __init__(self, shape, n_views=1):
        self.canonical_shape = tuple(shape)
        self.n_views = n_views

    def instance_shape(self, view):
        return self.canonical_shape

    def project(self, z, view):
        return np.array(z, dtype=np.float64)

    def splat(self, img, view):
        img = np.asarray(img, dtype=np.float64)
        if img.shape != self.canonical_shape:
            raise InvalidArgument(f"image shape {img.shape} != {self.canonical_shape}")
        return SplatAccumulator(img.copy(), np.ones_like(img))

    def aggregate(self, pairs, prior=None):
        if not pairs:
            raise InvalidArgument("aggregation needs at least one (view, image) pair")
        if len(pairs) == 1:
            return np.array(pairs[0][1], dtype=np.float64)
        acc = self.splat(pairs[0][1], pairs[0][0])
        for view, img in pairs[1:]:
            acc = acc + self.splat(img, view)
        return acc.resolve(prior)

    def view_set(self, parity):
        return self.fixed_views()

    def fixed_views(self):
        return [RingView(offset=0, id=i) for i in range(self.n_views)]

    def edge_distance(self, view):
        return None


@dataclass
class MaskedProjector(IdentityProjector):
    """Identity projection whose synchronization enforces a partial observation.

    The aggregate solves ``argmin ||(1-M)(z - x)||^2 + ||M(z - y)||^2``.
    """

    mask: np.ndarray = None
    measurement: np.ndarray = None
    canonical_shape: tuple = field(init=False)
    n_views: int = field(init=False, default=1)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise InvalidArgument("mask entries must be 0 or 1")
        self.measurement = np.asarray(self.measurement, dtype=np.float64)
        if self.measurement.shape != self.mask.shape:
            raise InvalidArgument("measurement and mask shapes differ")
        self.canonical_shape = self.mask.shape

    def aggregate(self, pairs, prior=None):
        if len(pairs) != 1:
            raise InvalidArgument("masked synchronization takes exactly one instance")
        return masked_solve(pairs[0][1], self.mask, self.measurement)


def masked_project(z):
    return np.array(z, dtype=np.float64)


def masked_solve(x0t, mask, y):
    """Closed-form minimiser of the masked two-term objective."""
    return mask * y + (1.0 - mask) * np.asarray(x0t, dtype=np.float64)


def aggregate_least_squares(projector, targets, prior=None):
    """``argmin_z sum_i ||f_{c_i}(z) - x_i||^2`` for ``targets = [(view, image), ...]``."""
    return projector.aggregate(list(targets), prior)
