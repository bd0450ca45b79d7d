"""Preliminary density estimates on the observation window.

The two-dimensional pre-estimator is a local linear density fit: at each
point the 3x3 moment matrix ``A(x, y)`` of the kernel weights *over S* is
inverted against the empirical moment vector ``b(x, y)``.  Because ``A`` is
integrated over the window rather than the plane, the estimate corrects
itself at the boundary of S.

``A`` is resolved by exact section geometry: for every abscissa ``u`` the
vertical section of S is an interval union, over which the polynomial
kernel moments have closed forms.  The outer integral in ``u`` is
Gauss-Legendre, split at the polygon vertices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .discretize import Discretization
from .geometry import ObservationWindow, _phase
from .kernels import Kernel, get_kernel

__all__ = [
    "Sample",
    "DensitySurface",
    "MarginalSet",
    "design_matrices",
    "local_linear_density",
    "render_surface",
    "marginals_from_surface",
    "direct_marginals",
    "default_step",
]

COND_LIMIT = 1e12
N_GAUSS = 16


@dataclass(frozen=True, eq=False)
class Sample:
    """Points in the unit square with their window flags."""

    points: np.ndarray
    W: np.ndarray

    @classmethod
    def from_points(cls, points, window: ObservationWindow | None = None) -> "Sample":
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if np.any(pts < 0) or np.any(pts > 1):
            raise ValueError("sample points must lie in the unit square")
        if window is None:
            W = np.ones(len(pts), dtype=bool)
        else:
            W = window.contains(pts[:, 0], pts[:, 1])
        return cls(pts, np.asarray(W, dtype=bool))

    def with_window(self, window: ObservationWindow) -> "Sample":
        return Sample.from_points(self.points, window)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def theta_hat(self) -> float:
        """Fraction of the sample inside the window."""
        return float(self.W.mean()) if self.n else 0.0

    def concat(self, other: "Sample") -> "Sample":
        return Sample(np.vstack([self.points, other.points]),
                      np.concatenate([self.W, other.W]))


# ---------------------------------------------------------------------------
# local linear fit


def design_matrices(window: ObservationWindow, xs, ys, h1: float, h2: float,
                    K: Kernel) -> np.ndarray:
    """``A(x, y)`` for every x in ``xs`` and y in ``ys``.

    Returns an array of shape (len(xs), len(ys), 3, 3).
    """
    S = window.S
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    brk = S.breakpoints_x()
    gx, gw = np.polynomial.legendre.leggauss(N_GAUSS)
    out = np.zeros((xs.size, ys.size, 6))
    for i, x in enumerate(xs):
        a, b = x - h1, x + h1
        cuts = sorted({a, b, x, *(v for v in brk if a < v < b)})
        lo_c = np.array(cuts[:-1])
        hi_c = np.array(cuts[1:])
        half = 0.5 * (hi_c - lo_c)
        u = (half[:, None] * gx[None, :] + 0.5 * (lo_c + hi_c)[:, None]).ravel()
        wu = (half[:, None] * gw[None, :]).ravel()
        s = (u - x) / h1
        kx = K(s) * wu / h1
        live = kx != 0
        u, s, kx = u[live], s[live], kx[live]
        lo, hi = S.bounds_x(u)
        if lo.size == 0 or u.size == 0:
            continue
        tl = np.clip((lo[:, :, None] - ys[None, None, :]) / h2, -1.0, 1.0)
        th = np.clip((hi[:, :, None] - ys[None, None, :]) / h2, -1.0, 1.0)
        # empty sections have lo == hi and contribute nothing
        I0 = (K.partial_moment(th, 0) - K.partial_moment(tl, 0)).sum(axis=0)
        I1 = (K.partial_moment(th, 1) - K.partial_moment(tl, 1)).sum(axis=0)
        I2 = (K.partial_moment(th, 2) - K.partial_moment(tl, 2)).sum(axis=0)
        ks = kx * s
        out[i, :, 0] = kx @ I0
        out[i, :, 1] = ks @ I0
        out[i, :, 2] = kx @ I1
        out[i, :, 3] = (ks * s) @ I0
        out[i, :, 4] = ks @ I1
        out[i, :, 5] = kx @ I2
    a00, a10, a01, a20, a11, a02 = np.moveaxis(out, -1, 0)
    A = np.stack([
        np.stack([a00, a10, a01], -1),
        np.stack([a10, a20, a11], -1),
        np.stack([a01, a11, a02], -1),
    ], -2)
    return A


def _solve_rows(A: np.ndarray):
    """First row of A^-1 per node, with the zeroth-order fallback.

    Returns (rows, singular_flags).
    """
    shp = A.shape[:-2]
    A = A.reshape(-1, 3, 3)
    rows = np.zeros((A.shape[0], 3))
    a00 = A[:, 0, 0]
    nonzero = a00 > 1e-14
    cond = np.full(A.shape[0], np.inf)
    if nonzero.any():
        cond[nonzero] = np.linalg.cond(A[nonzero])
    good = nonzero & (cond < COND_LIMIT)
    if good.any():
        rows[good] = np.linalg.inv(A[good])[:, 0, :]
    fallback = nonzero & ~good
    rows[fallback, 0] = 1.0 / a00[fallback]
    # nodes with no window mass at all stay zero and are not flagged
    return rows.reshape(*shp, 3), fallback.reshape(shp)


def _moments(sample: Sample, xs, ys, h1, h2, K: Kernel):
    """Empirical moment vectors b(x, y) on the grid xs x ys."""
    n = sample.n
    pts = sample.points[sample.W]
    if n == 0 or len(pts) == 0:
        z = np.zeros((xs.size, ys.size))
        return z, z.copy(), z.copy()
    sx = (pts[None, :, 0] - xs[:, None]) / h1
    sy = (pts[None, :, 1] - ys[:, None]) / h2
    kx = K(sx) / h1
    ky = K(sy) / h2
    b0 = kx @ ky.T / n
    b1 = (kx * sx) @ ky.T / n
    b2 = kx @ (ky * sy).T / n
    return b0, b1, b2


def local_linear_density(sample: Sample, window: ObservationWindow, h1: float,
                         h2: float, K="epanechnikov", at=(0.5, 0.5),
                         return_all: bool = False):
    """Local linear density estimate at one point.

    With ``return_all`` the full coefficient vector ``(eta0, eta1, eta2)``
    and the singular-fallback flag are returned as well.
    """
    if not (h1 > 0 and h2 > 0):
        raise ValueError("bandwidths must be positive")
    K = get_kernel(K)
    x, y = (np.array([float(v)]) for v in at)
    A = design_matrices(window, x, y, h1, h2, K)[0, 0]
    b = np.array([m[0, 0] for m in _moments(sample, x, y, h1, h2, K)])
    rows, singular = _solve_rows(A[None])
    if singular[0] or not A[0, 0] > 1e-14:
        eta = np.array([rows[0, 0] * b[0], 0.0, 0.0])
    else:
        eta = np.linalg.solve(A, b)
    if return_all:
        return eta, bool(singular[0])
    return float(eta[0])


@dataclass(frozen=True, eq=False)
class DensitySurface:
    """Local linear estimate on a uniform mesh (C order, x major)."""

    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    inside: np.ndarray
    h1: float
    h2: float
    kernel: str
    singular: np.ndarray = field(repr=False)

    @property
    def n_singular(self) -> int:
        """Fallback nodes inside the window."""
        return int((self.singular & self.inside).sum())

    def __call__(self, x, y):
        from .discretize import bilinear_matrix

        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shp = np.broadcast(x, y).shape
        B = bilinear_matrix(self.xs, self.ys, np.broadcast_to(x, shp), np.broadcast_to(y, shp))
        return (B @ self.values.ravel()).reshape(shp)


def _surface_solver(window, xs, ys, h1, h2, K):
    key = ("ll", xs[0], xs[-1], xs.size, ys[0], ys[-1], ys.size, h1, h2, K.name)
    cache = window._cache
    if key not in cache:
        A = design_matrices(window, xs, ys, h1, h2, K)
        cache[key] = _solve_rows(A)
    return cache[key]


def surface_grid(window: ObservationWindow, M: int, box=None):
    x0, x1, y0, y1 = window.S.bbox if box is None else box
    return np.linspace(x0, x1, M), np.linspace(y0, y1, M)


def render_surface(sample: Sample, window: ObservationWindow, h1: float, h2: float,
                   K="epanechnikov", M: int = 201, box=None) -> DensitySurface:
    """Local linear estimate at every node of an M x M mesh.

    The mesh spans the bounding box of S unless ``box`` is given.  Nodes
    outside S carry the local linear extrapolation so that bilinear
    interpolation is well defined up to the boundary.
    """
    if M < 51:
        raise ValueError("surface grid needs M >= 51")
    if not (h1 > 0 and h2 > 0):
        raise ValueError("bandwidths must be positive")
    K = get_kernel(K)
    xs, ys = surface_grid(window, M, box)
    rows, singular = _surface_solver(window, xs, ys, h1, h2, K)
    b0, b1, b2 = _moments(sample, xs, ys, h1, h2, K)
    vals = rows[..., 0] * b0 + rows[..., 1] * b1 + rows[..., 2] * b2
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    inside = window.contains(X, Y)
    return DensitySurface(xs, ys, vals, inside, float(h1), float(h2), K.name, singular)


# ---------------------------------------------------------------------------
# marginal integrals


@dataclass(frozen=True, eq=False)
class MarginalSet:
    """Marginal section integrals fw1, fw2, fw3 on the component grids."""

    fw1: np.ndarray
    fw2: np.ndarray
    fw3: np.ndarray
    disc: Discretization
    floor_eps: float
    floored_fraction: float = 0.0
    raw: tuple = field(default=None, repr=False)

    @property
    def fw(self) -> tuple:
        return self.fw1, self.fw2, self.fw3

    def scaled(self, c: float) -> "MarginalSet":
        return MarginalSet(c * self.fw1, c * self.fw2, c * self.fw3, self.disc,
                           self.floor_eps, self.floored_fraction, self.raw)


def _floor(values, grids, eps):
    out, n_floor, n_tot = [], 0, 0
    for v, g in zip(values, grids):
        v = np.asarray(v, dtype=float)
        low = g.mask & (v < eps)
        n_floor += int(low.sum())
        n_tot += int(g.mask.sum())
        w = np.where(low, eps, v)
        out.append(g.fill(w))
    return out, n_floor / max(n_tot, 1)


def marginal_set(raw, disc: Discretization, floor_eps: float = 1e-4) -> MarginalSet:
    """Wrap raw marginal values (floored at ``floor_eps``)."""
    if not floor_eps > 0:
        raise ValueError("floor_eps must be positive")
    raw = tuple(np.asarray(r, dtype=float) for r in raw)
    (f1, f2, f3), frac = _floor(raw, disc.grids, floor_eps)
    return MarginalSet(f1, f2, f3, disc, float(floor_eps), frac, raw)


def default_step(h1: float | None = None, h2: float | None = None) -> float:
    step = 1 / 400
    if h1 is not None and h2 is not None:
        step = min(step, min(h1, h2) / 8)
    return step


def marginals_from_surface(surface: DensitySurface, window: ObservationWindow,
                           floor_eps: float = 1e-4, m=(201, 201, 201),
                           step: float | None = None) -> MarginalSet:
    """Integrate the surface along the window sections.

    fw1(x) = int_{J2(x)} f(x, y) dy, fw2(y) = int_{J1(y)} f(x, y) dx and
    fw3(z) = sum_l int_{J3l(z)} f(x, (z+l)/J - x) dx.
    """
    if step is None:
        step = default_step(surface.h1, surface.h2)
    disc = window.discretize(*m, step=step)
    vals = surface.values.ravel()
    raw = [
        disc.section_integrals(j, disc.surface_matrix(j, surface.xs, surface.ys) @ vals)
        for j in (1, 2, 3)
    ]
    return marginal_set(raw, disc, floor_eps)


def exact_marginals(density, window: ObservationWindow, floor_eps: float = 1e-4,
                    m=(201, 201, 201), step: float = 1 / 400) -> MarginalSet:
    """Section integrals of a known density ``density(x, y)``."""
    disc = window.discretize(*m, step=step)
    raw = [disc.evaluate_on(j, density) for j in (1, 2, 3)]
    return marginal_set(raw, disc, floor_eps)


def direct_marginals(sample: Sample, window: ObservationWindow, h1: float, h2: float,
                     h3: float | None = None, K="epanechnikov", floor_eps: float = 1e-4,
                     m=(201, 201, 201), step: float | None = None) -> MarginalSet:
    """One-dimensional kernel estimates of the marginal section integrals.

    The phase estimate measures kernel distance around the circle, so mass
    near phase 0 and phase 1 is pooled, and is multiplied by J so that it
    estimates the same section integral as ``marginals_from_surface``.
    ``h3`` defaults to (h1 + h2)/2.
    """
    if h3 is None:
        h3 = 0.5 * (h1 + h2)
    if not (h1 > 0 and h2 > 0 and h3 > 0):
        raise ValueError("bandwidths must be positive")
    K = get_kernel(K)
    if step is None:
        step = default_step(h1, h2)
    disc = window.discretize(*m, step=step)
    g1, g2, g3 = disc.grids
    n = max(sample.n, 1)
    pts = sample.points[sample.W]
    z = _phase(pts[:, 0] + pts[:, 1], window.J)
    f1 = K((pts[None, :, 0] - g1.nodes[:, None]) / h1).sum(axis=1) / (n * h1)
    f2 = K((pts[None, :, 1] - g2.nodes[:, None]) / h2).sum(axis=1) / (n * h2)
    dz = (z[None, :] - g3.nodes[:, None] + 0.5) % 1.0 - 0.5
    # the kernel sum estimates the phase density, which is fw3 / J
    f3 = window.J * K(dz / h3).sum(axis=1) / (n * h3)
    return marginal_set((f1, f2, f3), disc, floor_eps)
