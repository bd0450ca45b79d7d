"""Grids for the component functions and quadrature along window sections.

For every node of the three component grids the relevant section of S is
resolved exactly (interval union) and covered by a composite trapezoid
rule.  The resulting point sets are stored together with sparse matrices
that

* sum weighted point values per node (``owner``),
* interpolate component grid functions at the points (``interp``),
* interpolate a rendered density surface at the points (``surface_matrix``).

With these, every section integral used by the smoother and the solvers is
a sparse mat-vec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import IntervalUnion, ObservationWindow, _phase

__all__ = ["ComponentGrid", "SectionQuadrature", "Discretization", "bilinear_matrix"]


def _linear_segment_weights(x0, x1, a, b):
    """Weights (w0, w1) with int_a^b of the linear interpolant between
    (x0, f0) and (x1, f1) equal to w0*f0 + w1*f1."""
    h = x1 - x0
    ta, tb = (a - x0) / h, (b - x0) / h
    w1 = h * 0.5 * (tb * tb - ta * ta)
    w0 = h * (tb - ta) - w1
    return w0, w1


@dataclass(frozen=True, eq=False)
class ComponentGrid:
    """Uniform grid carrying one component function.

    Linear grids span the hull of their interval union and interpolate with
    constant continuation beyond the end nodes.  The circular grid (phases)
    uses midpoint nodes ``(k + 1/2)/m`` on [0, 1) and wraps around.
    """

    name: str
    nodes: np.ndarray
    mask: np.ndarray
    weights: np.ndarray
    domain: IntervalUnion
    circular: bool = False

    @classmethod
    def linear(cls, name: str, domain: IntervalUnion, m: int) -> "ComponentGrid":
        nodes = np.linspace(domain.lo, domain.hi, m)
        mask = domain.contains(nodes, tol=1e-9)
        w = np.zeros(m)
        for a, b in domain:
            i0 = max(0, int(np.searchsorted(nodes, a, side="right")) - 1)
            for i in range(i0, m - 1):
                lo, hi = max(a, nodes[i]), min(b, nodes[i + 1])
                if hi <= lo:
                    if nodes[i] >= b:
                        break
                    continue
                w0, w1 = _linear_segment_weights(nodes[i], nodes[i + 1], lo, hi)
                w[i] += w0
                w[i + 1] += w1
        return cls(name, nodes, mask, w, domain, False)

    @classmethod
    def periodic(cls, name: str, domain: IntervalUnion, m: int) -> "ComponentGrid":
        nodes = (np.arange(m) + 0.5) / m
        mask = domain.contains(nodes, tol=1e-9)
        w = np.array([
            domain.intersect(IntervalUnion(((k / m, (k + 1) / m),))).measure
            for k in range(m)
        ])
        return cls(name, nodes, mask, w, domain, True)

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def step(self) -> float:
        if self.circular:
            return 1.0 / self.size
        return float(self.nodes[1] - self.nodes[0])

    def interp_matrix(self, u) -> sp.csr_matrix:
        u = np.asarray(u, dtype=float).ravel()
        m = self.size
        if self.circular:
            pos = u * m - 0.5
            k0 = np.floor(pos)
            frac = pos - k0
            i0 = k0.astype(np.int64) % m
            i1 = (i0 + 1) % m
        else:
            lo, hi = self.nodes[0], self.nodes[-1]
            pos = (np.clip(u, lo, hi) - lo) / (hi - lo) * (m - 1)
            i0 = np.minimum(np.floor(pos).astype(np.int64), m - 2)
            frac = pos - i0
            i1 = i0 + 1
        rows = np.repeat(np.arange(u.size), 2)
        cols = np.column_stack([i0, i1]).ravel()
        vals = np.column_stack([1.0 - frac, frac]).ravel()
        return sp.csr_matrix((vals, (rows, cols)), shape=(u.size, m))

    def __call__(self, values, u):
        """Interpolate grid ``values`` at ``u``."""
        u = np.asarray(u, dtype=float)
        out = self.interp_matrix(u) @ np.asarray(values, dtype=float)
        return out.reshape(u.shape) if u.ndim else float(out[0])

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def fill(self, values) -> np.ndarray:
        """Copy the nearest in-domain node value into nodes outside the domain."""
        if self.mask.all():
            return values
        good = np.flatnonzero(self.mask)
        bad = np.flatnonzero(~self.mask)
        if self.circular:
            d = np.abs(bad[:, None] - good[None, :])
            d = np.minimum(d, self.size - d)
        else:
            d = np.abs(bad[:, None] - good[None, :])
        out = values.copy()
        out[bad] = values[good[np.argmin(d, axis=1)]]
        return out


def _trapezoid_points(lo, hi, step):
    """Composite trapezoid nodes for each segment ``[lo[i], hi[i]]``.

    Returns (segment index, abscissa, weight) arrays.
    """
    length = hi - lo
    n = np.maximum(2, np.ceil(length / step).astype(np.int64) + 1)
    seg = np.repeat(np.arange(lo.size), n)
    start = np.repeat(np.cumsum(n) - n, n)
    k = np.arange(seg.size) - start
    nn = n[seg]
    pts = lo[seg] + length[seg] * (k / (nn - 1))
    w = length[seg] / (nn - 1)
    w = np.where((k == 0) | (k == nn - 1), 0.5 * w, w)
    return seg, pts, w


@dataclass(frozen=True, eq=False)
class SectionQuadrature:
    """Points (x, y) along the sections belonging to each node of one grid."""

    owner_index: np.ndarray
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    n_nodes: int

    @property
    def owner(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.w, (self.owner_index, np.arange(self.w.size))),
            shape=(self.n_nodes, self.w.size),
        )

    @property
    def size(self) -> int:
        return self.w.size


def _collect(owner_ids, lo, hi, step):
    keep = hi - lo > 1e-12
    owner_ids, lo, hi = owner_ids[keep], lo[keep], hi[keep]
    seg, s, w = _trapezoid_points(lo, hi, step)
    return owner_ids[seg], s, w


class Discretization:
    """Component grids and section quadratures for one observation window."""

    def __init__(self, window: ObservationWindow, m1: int = 201, m2: int = 201,
                 m3: int = 201, step: float = 1 / 400):
        self.window = window
        self.step = float(step)
        self.J = window.J
        S = window.S
        self.grids = (
            ComponentGrid.linear("S1", window.S1, m1),
            ComponentGrid.linear("S2", window.S2, m2),
            ComponentGrid.periodic("S3", window.S3, m3),
        )
        g1, g2, g3 = self.grids

        # sections J2(x) at x-nodes
        xs = g1.nodes
        lo, hi = S.bounds_x(xs)
        own = np.broadcast_to(np.arange(xs.size), lo.shape).ravel()
        o, yq, w = _collect(own, lo.ravel(), hi.ravel(), self.step)
        q1 = SectionQuadrature(o, xs[o], yq, w, xs.size)

        # sections J1(y) at y-nodes
        ys = g2.nodes
        lo, hi = S.bounds_y(ys)
        own = np.broadcast_to(np.arange(ys.size), lo.shape).ravel()
        o, xq, w = _collect(own, lo.ravel(), hi.ravel(), self.step)
        q2 = SectionQuadrature(o, xq, ys[o], w, ys.size)

        # sections J3l(z) at phase nodes, all levels l
        zs = g3.nodes
        owners, xs3, ys3, ws3 = [], [], [], []
        for l in range(window.L + 1):
            t = (zs + l) / self.J
            lo, hi = S.bounds_t(t)
            own = np.broadcast_to(np.arange(zs.size), lo.shape).ravel()
            o, xq, w = _collect(own, lo.ravel(), hi.ravel(), self.step)
            owners.append(o)
            xs3.append(xq)
            ys3.append(t[o] - xq)
            ws3.append(w)
        q3 = SectionQuadrature(
            np.concatenate(owners), np.concatenate(xs3), np.concatenate(ys3),
            np.concatenate(ws3), zs.size,
        )
        self.quads = (q1, q2, q3)
        self.owners = tuple(q.owner for q in self.quads)
        # interpolation of the *other* components at each quadrature set
        self.interp = (
            {2: g2.interp_matrix(q1.y), 3: g3.interp_matrix(_phase(q1.x + q1.y, self.J))},
            {1: g1.interp_matrix(q2.x), 3: g3.interp_matrix(_phase(q2.x + q2.y, self.J))},
            {1: g1.interp_matrix(q3.x), 2: g2.interp_matrix(q3.y)},
        )
        self._surface_mats: dict = {}

    @property
    def sizes(self) -> tuple[int, int, int]:
        return tuple(g.size for g in self.grids)

    def section_integrals(self, j: int, values_at_points) -> np.ndarray:
        """Sum ``w * values`` over the section points of each node of grid j."""
        return self.owners[j - 1] @ values_at_points

    def section_lengths(self, j: int) -> np.ndarray:
        return self.section_integrals(j, np.ones(self.quads[j - 1].size))

    def evaluate_on(self, j: int, fn) -> np.ndarray:
        """Section integrals of a vectorized ``fn(x, y)`` for grid j."""
        q = self.quads[j - 1]
        return self.section_integrals(j, fn(q.x, q.y))

    def surface_matrix(self, j: int, xs: np.ndarray, ys: np.ndarray) -> sp.csr_matrix:
        key = (j, xs[0], xs[-1], xs.size, ys[0], ys[-1], ys.size)
        if key not in self._surface_mats:
            q = self.quads[j - 1]
            self._surface_mats[key] = bilinear_matrix(xs, ys, q.x, q.y)
        return self._surface_mats[key]

    def denominators(self, j: int, f1, f2, f3) -> np.ndarray:
        """Section integrals of the product of the two other components.

        j=1: int_{J2(x)} f2(y) f3(m(x+y)) dy, and so on.
        """
        comps = {1: f1, 2: f2, 3: f3}
        others = [k for k in (1, 2, 3) if k != j]
        a, b = others
        vals = (self.interp[j - 1][a] @ comps[a]) * (self.interp[j - 1][b] @ comps[b])
        return self.section_integrals(j, vals)

    def product_mass(self, f1, f2, f3) -> float:
        """``int_S f1(x) f2(y) f3(m(x+y)) dx dy`` along calendar sections."""
        d3 = self.denominators(3, f1, f2, f3)
        g3 = self.grids[2]
        return float(np.dot(g3.weights, f3 * d3)) / self.J

    def product_mass_x(self, f1, f2, f3) -> float:
        """Same integral, routed through the vertical sections."""
        d1 = self.denominators(1, f1, f2, f3)
        return self.grids[0].integrate(f1 * d1)


def bilinear_matrix(xs, ys, px, py) -> sp.csr_matrix:
    """Sparse bilinear interpolation from a (len(xs), len(ys)) grid, C order.

    Points outside the grid are clamped to its edge.
    """
    px = np.asarray(px, dtype=float).ravel()
    py = np.asarray(py, dtype=float).ravel()
    mx, my = xs.size, ys.size
    fx = (np.clip(px, xs[0], xs[-1]) - xs[0]) / (xs[-1] - xs[0]) * (mx - 1)
    fy = (np.clip(py, ys[0], ys[-1]) - ys[0]) / (ys[-1] - ys[0]) * (my - 1)
    i0 = np.minimum(np.floor(fx).astype(np.int64), mx - 2)
    j0 = np.minimum(np.floor(fy).astype(np.int64), my - 2)
    tx, ty = fx - i0, fy - j0
    rows = np.repeat(np.arange(px.size), 4)
    cols = np.column_stack([
        i0 * my + j0, i0 * my + j0 + 1, (i0 + 1) * my + j0, (i0 + 1) * my + j0 + 1,
    ]).ravel()
    vals = np.column_stack([
        (1 - tx) * (1 - ty), (1 - tx) * ty, tx * (1 - ty), tx * ty,
    ]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(px.size, mx * my))
