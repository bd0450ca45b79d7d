"""Support regions in the unit square and their one-dimensional sections.

A region is a finite union of convex polygons with pairwise disjoint
interiors, each given by half-plane constraints ``a*x + b*y <= c`` and
clipped to ``[0, 1]^2``.  Because every polygon is convex, the intersection
of a line with the region is an exact union of intervals, which is what the
estimation code integrates over.

Three families of lines are used throughout:

* vertical lines ``x = const``         -> ``section_x`` (the set of y)
* horizontal lines ``y = const``       -> ``section_y`` (the set of x)
* anti-diagonals ``x + y = t``         -> ``section_t`` (the set of x)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "IntervalUnion",
    "ConvexPolygon",
    "SupportRegion",
    "ObservationWindow",
    "WindowError",
    "periodic_phase",
    "section_x",
    "section_y",
    "section_diag",
    "build_window",
    "shape",
    "SHAPES",
]

EPS = 1e-12
SCAN_STEP = 1e-4
BREAK_SCAN_STEP = 1e-3


class WindowError(ValueError):
    pass


def periodic_phase(t, J):
    """Calendar time ``t`` reduced modulo ``1/J`` and rescaled to [0, 1).

    Accepts scalars or arrays.
    """
    if not J > 0:
        raise ValueError("J must be positive")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("calendar time must be nonnegative")
    s = t * J
    z = s - np.floor(s)
    # values a hair below an integer can round up to 1.0
    z = np.where(z >= 1.0, 0.0, z)
    return float(z) if z.ndim == 0 else z


def _phase(t, J):
    # unchecked, vectorized
    s = np.asarray(t, dtype=float) * J
    z = s - np.floor(s)
    return np.where(z >= 1.0, 0.0, z)


# ---------------------------------------------------------------------------
# interval unions


@dataclass(frozen=True)
class IntervalUnion:
    """Sorted, pairwise disjoint closed intervals."""

    intervals: tuple[tuple[float, float], ...] = ()

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[float]], tol: float = EPS):
        items = sorted((float(a) + 0.0, float(b) + 0.0) for a, b in pairs if b - a > tol)
        merged: list[list[float]] = []
        for a, b in items:
            if merged and a <= merged[-1][1] + tol:
                merged[-1][1] = max(merged[-1][1], b)
            else:
                merged.append([a, b])
        return cls(tuple((a, b) for a, b in merged))

    @property
    def measure(self) -> float:
        return float(sum(b - a for a, b in self.intervals))

    @property
    def empty(self) -> bool:
        return not self.intervals

    @property
    def lo(self) -> float:
        return self.intervals[0][0]

    @property
    def hi(self) -> float:
        return self.intervals[-1][1]

    def contains(self, u, tol: float = 1e-12):
        u = np.asarray(u, dtype=float)
        out = np.zeros(u.shape, dtype=bool)
        for a, b in self.intervals:
            out |= (u >= a - tol) & (u <= b + tol)
        return out

    def intersect(self, other: "IntervalUnion") -> "IntervalUnion":
        out = []
        for a, b in self.intervals:
            for c, d in other.intervals:
                lo, hi = max(a, c), min(b, d)
                if hi > lo:
                    out.append((lo, hi))
        return IntervalUnion.from_pairs(out)

    def isclose(self, other: "IntervalUnion", tol: float = 1e-9) -> bool:
        if len(self.intervals) != len(other.intervals):
            return False
        return all(
            abs(a - c) <= tol and abs(b - d) <= tol
            for (a, b), (c, d) in zip(self.intervals, other.intervals)
        )

    def __iter__(self):
        return iter(self.intervals)

    def __len__(self):
        return len(self.intervals)

    def __repr__(self):
        body = ", ".join(f"[{a:.6g}, {b:.6g}]" for a, b in self.intervals)
        return f"IntervalUnion({body or 'empty'})"


# ---------------------------------------------------------------------------
# convex polygons

_UNIT_SQUARE = np.array(
    [[-1.0, 0.0, 0.0], [1.0, 0.0, 1.0], [0.0, -1.0, 0.0], [0.0, 1.0, 1.0]]
)


def _clip(vertices: list, a: float, b: float, c: float) -> list:
    """Sutherland-Hodgman step: keep the part with a*x + b*y <= c."""
    out = []
    n = len(vertices)
    for i in range(n):
        p, q = vertices[i], vertices[(i + 1) % n]
        fp = a * p[0] + b * p[1] - c
        fq = a * q[0] + b * q[1] - c
        if fp <= 0:
            out.append(p)
        if (fp < 0 < fq) or (fq < 0 < fp):
            s = fp / (fp - fq)
            out.append((p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])))
    return out


@dataclass(frozen=True)
class ConvexPolygon:
    """Intersection of half-planes ``a x + b y <= c`` with the unit square."""

    halfplanes: np.ndarray = field(repr=False)
    vertices: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_halfplanes(cls, rows) -> "ConvexPolygon":
        rows = np.asarray(rows, dtype=float).reshape(-1, 3)
        hp = np.vstack([_UNIT_SQUARE, rows])
        # normalise so that tolerances mean the same thing for every row
        norm = np.hypot(hp[:, 0], hp[:, 1])
        if np.any(norm == 0):
            raise ValueError("half-plane with zero normal")
        hp = hp / norm[:, None]
        verts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
        for a, b, c in hp[4:]:
            verts = _clip(verts, a, b, c)
            if not verts:
                break
        v = np.array(verts, dtype=float).reshape(-1, 2)
        hp.flags.writeable = False
        v.flags.writeable = False
        return cls(hp, v)

    @property
    def area(self) -> float:
        v = self.vertices
        if len(v) < 3:
            return 0.0
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    @property
    def is_empty(self) -> bool:
        return self.area < 1e-14

    def intersect(self, rows) -> "ConvexPolygon":
        rows = np.asarray(rows, dtype=float).reshape(-1, 3)
        return ConvexPolygon.from_halfplanes(np.vstack([self.halfplanes[4:], rows]))

    def line_bounds(self, a_dir, c_vec):
        """Interval of ``s`` with ``a_dir[k] * s <= c_vec[k, :]`` for all k.

        ``c_vec`` has shape (n_constraints, n_lines).  Returns ``lo, hi``
        with ``hi <= lo`` meaning an empty (or degenerate) section.
        """
        n = c_vec.shape[1]
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        ok = np.ones(n, dtype=bool)
        for k, ak in enumerate(a_dir):
            ck = c_vec[k]
            if ak > EPS:
                hi = np.minimum(hi, ck / ak)
            elif ak < -EPS:
                lo = np.maximum(lo, ck / ak)
            else:
                ok &= ck >= -1e-12
        lo = np.where(ok, lo, 0.0)
        hi = np.where(ok, hi, 0.0)
        return lo, hi

    def bounds_x(self, xs):
        """y-interval of the vertical line at each x."""
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        h = self.halfplanes
        return self.line_bounds(h[:, 1], h[:, 2:3] - h[:, 0:1] * xs[None, :])

    def bounds_y(self, ys):
        """x-interval of the horizontal line at each y."""
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        h = self.halfplanes
        return self.line_bounds(h[:, 0], h[:, 2:3] - h[:, 1:2] * ys[None, :])

    def bounds_t(self, ts):
        """x-interval of the anti-diagonal ``x + y = t`` at each t."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        h = self.halfplanes
        return self.line_bounds(h[:, 0] - h[:, 1], h[:, 2:3] - h[:, 1:2] * ts[None, :])

    def contains(self, x, y, tol: float = 1e-12):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        h = self.halfplanes
        val = h[:, 0, None] * x.ravel()[None, :] + h[:, 1, None] * y.ravel()[None, :]
        inside = np.all(val <= h[:, 2, None] + tol, axis=0)
        return inside.reshape(np.broadcast(x, y).shape)


def _subtract(q: ConvexPolygon, p: ConvexPolygon) -> list[ConvexPolygon]:
    """Convex pieces of ``q \\ p`` (closures)."""
    pieces = []
    kept = []
    for a, b, c in p.halfplanes[4:]:
        piece = q.intersect(np.vstack(kept + [[-a, -b, -c]]) if kept else [[-a, -b, -c]])
        if not piece.is_empty:
            pieces.append(piece)
        kept.append([a, b, c])
    return pieces


def _disjoint(polys: Iterable[ConvexPolygon]) -> tuple[ConvexPolygon, ...]:
    out: list[ConvexPolygon] = []
    for q in polys:
        if q.is_empty:
            continue
        frags = [q]
        for p in out:
            nxt = []
            for f in frags:
                nxt.extend(_subtract(f, p))
            frags = nxt
            if not frags:
                break
        out.extend(frags)
    return tuple(out)


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True, eq=False)
class SupportRegion:
    """Finite union of convex polygons with disjoint interiors."""

    polygons: tuple[ConvexPolygon, ...]
    name: str = "custom"

    @classmethod
    def from_halfplanes(cls, polygons: Iterable, name: str = "custom"):
        polys = [ConvexPolygon.from_halfplanes(rows) for rows in polygons]
        return cls(_disjoint(polys), name)

    # -- vectorized section bounds -------------------------------------
    def _stack(self, method: str, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if not self.polygons:
            z = np.zeros((0, u.size))
            return z, z
        los, his = zip(*(getattr(p, method)(u) for p in self.polygons))
        lo, hi = np.array(los), np.array(his)
        hi = np.where(hi - lo > EPS, hi, lo)
        return lo, hi

    def bounds_x(self, xs):
        return self._stack("bounds_x", xs)

    def bounds_y(self, ys):
        return self._stack("bounds_y", ys)

    def bounds_t(self, ts):
        return self._stack("bounds_t", ts)

    def measure_x(self, xs):
        lo, hi = self.bounds_x(xs)
        return (hi - lo).sum(axis=0)

    def measure_y(self, ys):
        lo, hi = self.bounds_y(ys)
        return (hi - lo).sum(axis=0)

    def measure_t(self, ts):
        lo, hi = self.bounds_t(ts)
        return (hi - lo).sum(axis=0)

    def measure_phase(self, zs, J):
        """``sum_l mes{x : (x, (z+l)/J - x) in region}`` for each phase z."""
        zs = np.atleast_1d(np.asarray(zs, dtype=float))
        total = np.zeros(zs.size)
        for l in range(self.L(J) + 1):
            total += self.measure_t((zs + l) / J)
        return total

    # -- scalar sections -------------------------------------------------
    def _union(self, lo, hi) -> IntervalUnion:
        return IntervalUnion.from_pairs(zip(lo[:, 0], hi[:, 0]))

    def section_x(self, x: float) -> IntervalUnion:
        return self._union(*self.bounds_x([x]))

    def section_y(self, y: float) -> IntervalUnion:
        return self._union(*self.bounds_y([y]))

    def section_t(self, t: float) -> IntervalUnion:
        return self._union(*self.bounds_t([t]))

    # -- global quantities ----------------------------------------------
    @property
    def area(self) -> float:
        return float(sum(p.area for p in self.polygons))

    @property
    def T(self) -> float:
        """Largest calendar time ``x + y`` attained on the region."""
        return max(float(np.max(p.vertices.sum(axis=1))) for p in self.polygons)

    def L(self, J: float) -> int:
        return int(math.floor(self.T * J + 1e-12))

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        v = np.vstack([p.vertices for p in self.polygons])
        return (float(v[:, 0].min()), float(v[:, 0].max()),
                float(v[:, 1].min()), float(v[:, 1].max()))

    def projection_x(self) -> IntervalUnion:
        return IntervalUnion.from_pairs(
            (p.vertices[:, 0].min(), p.vertices[:, 0].max()) for p in self.polygons
        )

    def projection_y(self) -> IntervalUnion:
        return IntervalUnion.from_pairs(
            (p.vertices[:, 1].min(), p.vertices[:, 1].max()) for p in self.polygons
        )

    def breakpoints_x(self) -> np.ndarray:
        return np.unique(np.concatenate([p.vertices[:, 0] for p in self.polygons]))

    def contains(self, x, y, tol: float = 1e-12):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        for p in self.polygons:
            out |= p.contains(x, y, tol)
        return out

    def intersect(self, rows, name: str | None = None) -> "SupportRegion":
        """Intersect every polygon with the same extra half-planes."""
        polys = tuple(
            q for q in (p.intersect(rows) for p in self.polygons) if not q.is_empty
        )
        return SupportRegion(polys, name or self.name)

    def restrict(self, bands: Sequence[Sequence]) -> "SupportRegion":
        """Intersect with a union of convex pieces given as half-plane rows.

        ``bands`` are pairwise interior-disjoint, so the result stays a
        disjoint union.
        """
        polys = []
        for p in self.polygons:
            for rows in bands:
                q = p.intersect(rows)
                if not q.is_empty:
                    polys.append(q)
        return SupportRegion(tuple(polys), self.name)


def section_x(region: SupportRegion, x: float) -> IntervalUnion:
    """``{y : (x, y) in region}``."""
    return region.section_x(x)


def section_y(region: SupportRegion, y: float) -> IntervalUnion:
    """``{x : (x, y) in region}``."""
    return region.section_y(y)


def section_diag(region: SupportRegion, z: float, l: int, J: float) -> IntervalUnion:
    """``{x : (x, (z + l)/J - x) in region}``."""
    if l < 0:
        raise ValueError("l must be nonnegative")
    return region.section_t((z + l) / J)


# ---------------------------------------------------------------------------
# named shapes


def _triangle(c: float = 1.0):
    return [[[1.0, 1.0, c]]]


def _square():
    return [[]]


def _triangle_runoff(a: float = 0.3):
    # triangle plus the fully run-off cohorts x <= a observed for every delay
    return [[[1.0, 1.0, 1.0]], [[1.0, 0.0, a]]]


def _calendar_stripe(lo: float = 0.6, hi: float = 1.0):
    return [[[-1.0, -1.0, -lo], [1.0, 1.0, hi]]]


def _time_transformed(r: float = 0.5):
    # onset clock runs at a different pace: x + r*y <= 1
    return [[[1.0, r, 1.0]]]


def _time_transformed_stripe(lo: float = 0.6, hi: float = 1.0, r: float = 0.5):
    return [[[-1.0, -r, -lo], [1.0, r, hi]]]


def _missing_delay_band(lo: float = 0.2, hi: float = 0.8, c: float = 1.0):
    return [[[1.0, 1.0, c], [0.0, 1.0, lo]], [[1.0, 1.0, c], [0.0, -1.0, -hi]]]


SHAPES: dict[str, Callable] = {
    "triangle": _triangle,
    "square": _square,
    "triangle_runoff": _triangle_runoff,
    "calendar_stripe": _calendar_stripe,
    "time_transformed": _time_transformed,
    "time_transformed_stripe": _time_transformed_stripe,
    "missing_delay_band": _missing_delay_band,
}


def shape(name: str, **params) -> SupportRegion:
    """Build one of the named support shapes.

    ``triangle``                 x + y <= c
    ``square``                   the unit square
    ``triangle_runoff``          triangle plus fully run-off cohorts x <= a
    ``calendar_stripe``          lo <= x + y <= hi
    ``time_transformed``         x + r y <= 1
    ``time_transformed_stripe``  lo <= x + r y <= hi
    ``missing_delay_band``       triangle with delays in (lo, hi) unobserved
    """
    try:
        build = SHAPES[name]
    except KeyError:
        raise ValueError(f"unknown shape {name!r}; choose from {sorted(SHAPES)}") from None
    label = name + "".join(f" {k}={v:g}" for k, v in sorted(params.items()))
    return SupportRegion.from_halfplanes(build(**params), label)


# ---------------------------------------------------------------------------
# observation window


@dataclass(frozen=True, eq=False)
class ObservationWindow:
    """The trimmed set S on which the components are estimated.

    ``S1`` and ``S2`` are the axis projections of S and ``S3`` the set of
    phases ``m_J(x + y)`` attained on S.  ``breaks`` records, per component,
    the points where section measures of S jump (marginal discontinuities).
    """

    region: SupportRegion
    S: SupportRegion
    delta: float
    J: float
    S1: IntervalUnion
    S2: IntervalUnion
    S3: IntervalUnion
    breaks: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def L(self) -> int:
        return self.S.L(self.J)

    def contains(self, x, y):
        return self.S.contains(x, y, tol=1e-10)

    def discretize(self, m1: int = 201, m2: int = 201, m3: int = 201,
                   step: float = 1 / 400):
        from .discretize import Discretization

        key = ("disc", m1, m2, m3, round(step, 15))
        if key not in self._cache:
            self._cache[key] = Discretization(self, m1, m2, m3, step)
        return self._cache[key]


def _superlevel(fn, delta: float, a: float, b: float, circular: bool = False):
    """Intervals of [a, b] on which ``fn(u) >= delta``.

    Scans on a uniform grid and refines each transition by bisection.
    """
    n = max(3, int(math.ceil((b - a) / SCAN_STEP)) + 1)
    u = np.linspace(a, b, n)
    if circular:
        u = u[:-1]
    ok = fn(u) >= delta
    if ok.all():
        return [(a, b)]
    if not ok.any():
        return []

    def refine(lo, hi, lo_ok):
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if bool(fn(np.array([mid]))[0] >= delta) == lo_ok:
                lo = mid
            else:
                hi = mid
        return lo if lo_ok else hi

    out = []
    idx = np.flatnonzero(np.diff(ok.astype(int)))
    start = a if ok[0] else None
    for i in idx:
        if ok[i]:  # True -> False
            end = refine(u[i], u[i + 1], True)
            out.append((start, end))
            start = None
        else:
            start = refine(u[i], u[i + 1], False)
    if start is not None:
        out.append((start, b))
    return out


def _band_rows(axis: str, lo: float, hi: float):
    if axis == "x":
        return [[-1.0, 0.0, -lo], [1.0, 0.0, hi]]
    return [[0.0, -1.0, -lo], [0.0, 1.0, hi]]


def _same(intervals, ref: IntervalUnion, tol=1e-12) -> bool:
    return IntervalUnion.from_pairs(intervals).isclose(ref, tol=1e-11)


def _phase_set(S: SupportRegion, J: float) -> IntervalUnion:
    return IntervalUnion.from_pairs(
        _superlevel(lambda z: S.measure_phase(z, J), 1e-9, 0.0, 1.0, circular=True)
    )


def _jumps(fn, a: float, b: float, circular: bool = False) -> list[float]:
    """Locations where a piecewise-linear measure function jumps."""
    n = max(4, int(math.ceil((b - a) / BREAK_SCAN_STEP)) + 1)
    u = np.linspace(a, b, n)
    m = fn(u)
    d = np.diff(m)
    if circular:
        d[-1] = m[0] - fn(np.array([b - 1e-13]))[0]
    ad = np.abs(d)
    prev = np.roll(ad, 1)
    nxt = np.roll(ad, -1)
    if not circular:
        prev[0] = ad[0]
        nxt[-1] = ad[-1]
    cand = np.flatnonzero((ad > 1e-6) & (ad > 4 * np.maximum(prev, nxt)))
    out = []
    for i in cand:
        if circular and i == len(d) - 1:
            out.append(0.0)
            continue
        lo, hi = u[i], u[i + 1]
        mlo = fn(np.array([lo]))[0]
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            if abs(fn(np.array([mid]))[0] - mlo) < 0.5 * ad[i]:
                lo = mid
            else:
                hi = mid
        out.append(0.5 * (lo + hi))
    return sorted(out)


def build_window(region: SupportRegion, delta: float, J: float,
                 max_rounds: int = 50) -> ObservationWindow:
    """Largest S within ``region`` whose sections all have measure >= delta.

    Alternately removes vertical strips, horizontal strips and calendar
    phases whose section measure falls below ``delta`` until nothing
    changes.  Each removal is a half-plane cut, so S stays an exact
    polygon union.
    """
    if not J > 0:
        raise ValueError("J must be positive")
    x0, x1, y0, y1 = region.bbox
    if not 0 < delta < min(x1 - x0, y1 - y0):
        raise WindowError(
            f"delta={delta} must lie in (0, {min(x1 - x0, y1 - y0):g})"
        )
    S = region
    for _ in range(max_rounds):
        changed = False
        px = S.projection_x()
        keep = []
        for a, b in px:
            keep += _superlevel(S.measure_x, delta, a, b)
        if not _same(keep, px):
            S = S.restrict([_band_rows("x", a, b) for a, b in keep])
            changed = True
        if not S.polygons:
            break
        py = S.projection_y()
        keep = []
        for a, b in py:
            keep += _superlevel(S.measure_y, delta, a, b)
        if not _same(keep, py):
            S = S.restrict([_band_rows("y", a, b) for a, b in keep])
            changed = True
        if not S.polygons:
            break
        keep = _superlevel(lambda z: S.measure_phase(z, J), delta, 0.0, 1.0,
                           circular=True)
        if keep != [(0.0, 1.0)]:
            bands = []
            for l in range(S.L(J) + 1):
                for a, b in keep:
                    bands.append([[-1.0, -1.0, -(a + l) / J], [1.0, 1.0, (b + l) / J]])
            S = S.restrict(bands)
            changed = True
        if not S.polygons:
            break
        if not changed:
            break
    if not S.polygons or S.area < 1e-12:
        raise WindowError("window empty")
    S = SupportRegion(S.polygons, f"S({region.name}, delta={delta:g})")
    S1, S2 = S.projection_x(), S.projection_y()
    S3 = _phase_set(S, J)
    breaks = {
        1: [u for a, b in S1 for u in _jumps(S.measure_x, a, b) if a < u < b],
        2: [u for a, b in S2 for u in _jumps(S.measure_y, a, b) if a < u < b],
        3: _jumps(lambda z: S.measure_phase(z, J), 0.0, 1.0, circular=True),
    }
    return ObservationWindow(region, S, float(delta), float(J), S1, S2, S3, breaks)
