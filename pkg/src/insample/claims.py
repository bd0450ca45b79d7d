"""Run-off triangles: ingestion, jittering, augmentation, fitting, forecasting.

A triangle of ``m`` periods holds claim counts ``N[k, l]`` by origin period
``k`` and reporting delay ``l`` (both 1-based) on the cells ``k + l <= m + 1``.
Jittering spreads each claim uniformly over its cell on the [0, 1] scale,
after which the continuous machinery applies.  Yearly seasonality in monthly
data corresponds to ``J = m / 12`` periods of the calendar clock.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backfit import BackfitError, BackfitResult, solve_backfit
from .geometry import ObservationWindow, build_window, shape
from .models import SimModel
from .smoother import Sample, marginals_from_surface, render_surface

__all__ = [
    "RunOffTriangle",
    "ForecastTable",
    "ClaimsRun",
    "jitter",
    "augment",
    "two_stage_fit",
    "forecast",
    "claims_window",
    "run_claims",
    "seasonal_bump_model",
    "synthetic_triangle",
    "SYNTHETIC_FIXTURE",
    "AUGMENT_MULTIPLIERS",
    "TabulatedProduct",
]

# calendar residue (k + l) mod 12 -> multiplier
AUGMENT_MULTIPLIERS = {0: 2, 1: 3, 2: 5, 3: 3}

SYNTHETIC_FIXTURE = Path(__file__).with_name("data") / "synthetic_triangle.csv"


@dataclass(frozen=True, eq=False)
class RunOffTriangle:
    """Integer counts on the observed cells of an ``m x m`` array.

    ``counts[k-1, l-1]`` is ``N_kl``; cells with ``k + l > m + 1`` are zero.
    """

    m: int
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (self.m, self.m):
            raise ValueError(f"counts must have shape ({self.m}, {self.m}), got {c.shape}")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(c == np.round(c)):
                raise ValueError("claim counts must be integers")
        c = c.astype(np.int64)
        if np.any(c < 0):
            raise ValueError("claim counts must be nonnegative")
        if np.any(c[~self.observed_mask()] != 0):
            raise ValueError("counts given on unobserved cells k + l > m + 1")
        object.__setattr__(self, "counts", c)

    @classmethod
    def zeros(cls, m: int) -> "RunOffTriangle":
        return cls(m, np.zeros((m, m), dtype=np.int64))

    @classmethod
    def from_cells(cls, m: int, cells) -> "RunOffTriangle":
        counts = np.zeros((m, m), dtype=np.int64)
        for k, l, n in cells:
            k, l = int(k), int(l)
            if not (1 <= k <= m and 1 <= l <= m and k + l <= m + 1):
                raise ValueError(f"cell ({k}, {l}) is outside the triangle of size {m}")
            counts[k - 1, l - 1] += int(n)
        return cls(m, counts)

    @classmethod
    def read_csv(cls, path, m: int | None = None) -> "RunOffTriangle":
        """Read ``k,l,count`` rows (header required).

        ``m`` defaults to the largest ``k + l - 1`` present.
        """
        text = Path(path).read_text()
        return cls.parse_csv(text, m)

    @classmethod
    def parse_csv(cls, text: str, m: int | None = None) -> "RunOffTriangle":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [h.strip().lower() for h in rows[0]] != ["k", "l", "count"]:
            raise ValueError("triangle CSV must start with the header k,l,count")
        cells = []
        for i, row in enumerate(rows[1:], start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 3:
                raise ValueError(f"line {i}: expected 3 fields, got {len(row)}")
            try:
                k, l, n = (int(v) for v in row)
            except ValueError:
                raise ValueError(f"line {i}: fields must be integers") from None
            cells.append((k, l, n))
        if m is None:
            if not cells:
                raise ValueError("empty triangle CSV; pass m explicitly")
            m = max(k + l for k, l, _ in cells) - 1
        return cls.from_cells(m, cells)

    def to_csv(self, path=None) -> str:
        """All observed cells (zeros included) in k-major order."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["k", "l", "count"])
        for k, l in self.cells():
            wr.writerow([k, l, int(self.counts[k - 1, l - 1])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def observed_mask(self) -> np.ndarray:
        k = np.arange(1, self.m + 1)
        return (k[:, None] + k[None, :]) <= self.m + 1

    def cells(self):
        for k in range(1, self.m + 1):
            for l in range(1, self.m + 2 - k):
                yield k, l

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def calendar_totals(self, period: int = 12) -> dict:
        """Totals by calendar residue ``(k + l) mod period``."""
        k = np.arange(1, self.m + 1)
        res = (k[:, None] + k[None, :]) % period
        return {r: int(self.counts[res == r].sum()) for r in range(period)}

    @property
    def J(self) -> float:
        """Yearly seasonality on the [0, 1] clock of monthly data."""
        return self.m / 12

    def __add__(self, other: "RunOffTriangle") -> "RunOffTriangle":
        if other.m != self.m:
            raise ValueError("triangles differ in size")
        return RunOffTriangle(self.m, self.counts + other.counts)

    def __eq__(self, other):
        return (isinstance(other, RunOffTriangle) and other.m == self.m
                and np.array_equal(other.counts, self.counts))

    __hash__ = None


def augment(triangle: RunOffTriangle, multipliers: dict | None = None,
            period: int = 12) -> RunOffTriangle:
    """Multiply the counts of selected calendar residues.

    By default residues 0, 1, 2, 3 of ``(k + l) mod 12`` are scaled by
    2, 3, 5 and 3, which inflates the winter reporting months.
    """
    mult = AUGMENT_MULTIPLIERS if multipliers is None else multipliers
    k = np.arange(1, triangle.m + 1)
    res = (k[:, None] + k[None, :]) % period
    factor = np.ones_like(triangle.counts)
    for r, f in mult.items():
        factor[res == int(r)] = int(f)
    return RunOffTriangle(triangle.m, triangle.counts * factor)


def jitter(triangle: RunOffTriangle, seed=0, window: ObservationWindow | None = None,
           clip: bool = False, uniforms=None) -> Sample:
    """One point per claim, uniform within its cell.

    ``X = (k - 1 + U1)/m``, ``Y = (l - 1 + U2)/m``.  Claims on the last
    observed diagonal can land above ``x + y = 1`` by less than ``1/m``;
    with ``clip`` the pair (U1, U2) is folded into the half of the cell
    below the anti-diagonal, which keeps it uniform there.
    ``uniforms`` (shape ``(total, 2)``) replaces the random draws.
    """
    m = triangle.m
    kk, ll = np.nonzero(triangle.counts)
    reps = triangle.counts[kk, ll]
    k = np.repeat(kk + 1, reps).astype(float)
    l = np.repeat(ll + 1, reps).astype(float)
    if uniforms is None:
        U = np.random.default_rng(seed).random((k.size, 2))
    else:
        U = np.array(uniforms, dtype=float).reshape(-1, 2)
        if U.shape[0] != k.size:
            raise ValueError(f"need {k.size} uniform pairs, got {U.shape[0]}")
    if clip:
        edge = (k + l == m + 1) & (U.sum(axis=1) > 1.0)
        U[edge] = 1.0 - U[edge]
    pts = np.column_stack([(k - 1 + U[:, 0]) / m, (l - 1 + U[:, 1]) / m])
    return Sample.from_points(pts, window)


def claims_window(triangle: RunOffTriangle, delta: float = 0.02, J: float | None = None,
                  clip: bool = False) -> ObservationWindow:
    """Window for jittered data: ``x + y <= (m + 1)/m`` unless clipped to 1."""
    c = 1.0 if clip else (triangle.m + 1) / triangle.m
    return build_window(shape("triangle", c=c), delta, triangle.J if J is None else J)


def two_stage_fit(sample: Sample, window: ObservationWindow, h_stage1: float = 0.01,
                  h_stage2: float = 0.05, K="epanechnikov", M: int = 401,
                  m=(201, 201, 201), floor_eps: float = 1e-4, tol: float = 1e-7,
                  max_iters: int = 200) -> BackfitResult:
    """Seasonal shape from a small bandwidth, smooth f1, f2 from a larger one.

    Stage 1 runs the full backfit at ``h_stage1``.  Stage 2 re-renders the
    surface at ``h_stage2`` and iterates only the f1 and f2 updates with the
    seasonal component held at its stage-1 shape; that shape is rescaled each
    cycle so the product integrates to the window mass.  The returned result
    keeps the stage-1 fit in ``previous``.
    """
    if not 0 < h_stage1 < h_stage2:
        raise ValueError("two-stage bandwidths need 0 < h_stage1 < h_stage2")
    surf1 = render_surface(sample, window, h_stage1, h_stage1, K, M)
    marg1 = marginals_from_surface(surf1, window, floor_eps, m)
    stage1 = solve_backfit(marg1, window, sample.theta_hat, tol=tol, max_iters=max_iters)
    if not stage1.converged:
        raise BackfitError(
            f"stage 1 did not converge in {stage1.iterations} cycles "
            f"(last change {stage1.trace[-1]:.3g})"
        )
    surf2 = render_surface(sample, window, h_stage2, h_stage2, K, M)
    marg2 = marginals_from_surface(surf2, window, floor_eps, m)
    f3_shape = stage1.f3(marg2.disc.grids[2].nodes)
    stage2 = solve_backfit(marg2, window, sample.theta_hat, init=(stage1.f1(marg2.disc.grids[0].nodes),
                                                                  stage1.f2(marg2.disc.grids[1].nodes)),
                           tol=tol, max_iters=max_iters, fixed_f3=f3_shape)
    stage2.stage = "two-stage"
    stage2.previous = stage1
    return stage2


# ---------------------------------------------------------------------------
# forecasting


@dataclass(eq=False)
class ForecastTable:
    """Expected counts on the future cells ``k + l > m + 1``."""

    m: int
    expected: np.ndarray          # (m, m), zero on observed cells
    n_obs: int
    observed_mass: float
    future_mass: float

    def cells(self):
        for k in range(1, self.m + 1):
            for l in range(max(1, self.m + 2 - k), self.m + 1):
                yield k, l, float(self.expected[k - 1, l - 1])

    @property
    def total(self) -> float:
        return float(self.expected.sum())

    def by_origin(self) -> dict:
        return {k: float(self.expected[k - 1].sum()) for k in range(2, self.m + 1)}

    def by_delay(self) -> dict:
        return {l: float(self.expected[:, l - 1].sum()) for l in range(2, self.m + 1)}

    def by_period(self) -> dict:
        """Future calendar periods ``p = k + l - (m + 1)``, p = 1 .. m - 1."""
        k = np.arange(1, self.m + 1)
        p = k[:, None] + k[None, :] - (self.m + 1)
        return {int(q): float(self.expected[p == q].sum()) for q in range(1, self.m)}

    def write_cells_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["k", "l", "expected"])
            for k, l, v in self.cells():
                wr.writerow([k, l, repr(v)])

    def write_periods_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["period", "expected"])
            for p, v in self.by_period().items():
                wr.writerow([p, repr(v)])


@dataclass(frozen=True, eq=False)
class TabulatedProduct:
    """Product density from tabulated components (e.g. read back from CSV).

    f1 and f2 are interpolated linearly with constant continuation, f3
    circularly on [0, 1).
    """

    u1: np.ndarray
    v1: np.ndarray
    u2: np.ndarray
    v2: np.ndarray
    u3: np.ndarray
    v3: np.ndarray
    J: float

    def product(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = (self.J * (x + y)) % 1.0
        return (np.interp(x, self.u1, self.v1) * np.interp(y, self.u2, self.v2)
                * np.interp(z, self.u3, self.v3, period=1.0))


def _cell_masses(product, m: int, ks, ls, sub: int = 4):
    """Midpoint rule with ``sub x sub`` points on each cell."""
    off = (np.arange(sub) + 0.5) / sub
    dx, dy = np.meshgrid(off, off, indexing="ij")
    x = (ks[:, None] - 1 + dx.ravel()[None, :]) / m
    y = (ls[:, None] - 1 + dy.ravel()[None, :]) / m
    vals = product(x.ravel(), y.ravel()).reshape(x.shape)
    return vals.mean(axis=1) / m**2


def forecast(result, triangle: RunOffTriangle, n_obs: int | None = None,
             sub: int = 4) -> ForecastTable:
    """Expected counts on future cells from the fitted product density.

    Each future cell receives ``n_obs`` times its share of product mass
    relative to the mass on the observed cells.  ``result`` only needs a
    vectorized ``product(x, y)``.
    """
    m = triangle.m
    n_obs = triangle.total if n_obs is None else int(n_obs)
    K, L = np.meshgrid(np.arange(1, m + 1), np.arange(1, m + 1), indexing="ij")
    obs = triangle.observed_mask()
    obs_mass = _cell_masses(result.product, m, K[obs], L[obs], sub)
    denom = float(obs_mass.sum())
    if not denom > 1e-6:
        raise ValueError(f"product mass on the observed cells is {denom:.3g} < 1e-6")
    fut = ~obs
    fut_mass = _cell_masses(result.product, m, K[fut], L[fut], sub)
    expected = np.zeros((m, m))
    expected[fut] = n_obs * np.clip(fut_mass, 0.0, None) / denom
    return ForecastTable(m, expected, n_obs, denom, float(fut_mass.sum()))


# ---------------------------------------------------------------------------
# end-to-end run


@dataclass(eq=False)
class ClaimsRun:
    triangle: RunOffTriangle
    sample: Sample
    window: ObservationWindow
    result: BackfitResult
    forecast: ForecastTable
    config: dict = field(default_factory=dict)


def run_claims(triangle: RunOffTriangle, seed: int = 0, J: float | None = None,
               h_stage1: float = 0.01, h_stage2: float = 0.05, delta: float = 0.02,
               augment_counts: bool = True, clip: bool = False, K="epanechnikov",
               M: int = 401, m=(201, 201, 201), floor_eps: float = 1e-4,
               tol: float = 1e-7, max_iters: int = 200) -> ClaimsRun:
    """Augment (optionally), jitter, fit in two stages and forecast."""
    tri = augment(triangle) if augment_counts else triangle
    window = claims_window(tri, delta, J, clip)
    sample = jitter(tri, seed, window, clip)
    res = two_stage_fit(sample, window, h_stage1, h_stage2, K, M, m, floor_eps, tol, max_iters)
    table = forecast(res, tri)
    config = {
        "m": tri.m, "total": tri.total, "seed": seed, "J": window.J,
        "h_stage1": h_stage1, "h_stage2": h_stage2, "delta": delta,
        "augment": augment_counts, "clip": clip, "kernel": getattr(K, "name", K),
        "M": M, "m_grid": list(m), "floor_eps": floor_eps, "tol": tol,
        "max_iters": max_iters,
    }
    return ClaimsRun(tri, sample, window, res, table, config)


# ---------------------------------------------------------------------------
# simulated data


def seasonal_bump_model(J: float = 22.0, multipliers: dict | None = None,
                        bins: int = 12, region=None) -> SimModel:
    """Unnormalised multiplicative density with a step-function season.

    The phase axis is cut into ``bins`` equal bins; bin ``b`` carries weight
    ``multipliers.get(b, 1)``.  The default bumps the first four bins by
    2, 3, 5, 3.  ``f1 = 1`` and ``f2(y) = 3/2 - y``.
    """
    mult = dict(AUGMENT_MULTIPLIERS if multipliers is None else multipliers)
    table = np.array([float(mult.get(b, 1.0)) for b in range(bins)])

    def f1(u):
        return np.ones_like(np.asarray(u, dtype=float))

    def f2(u):
        return 1.5 - np.asarray(u, dtype=float)

    def f3(z):
        b = np.minimum((np.asarray(z, dtype=float) * bins).astype(int), bins - 1)
        return table[b]

    region = shape("triangle") if region is None else region
    return SimModel("seasonal-bump", 1.0, float(J), region, f1, f2, f3)


def synthetic_triangle(m: int = 264, seed: int = 20_100_101) -> RunOffTriangle:
    """Seeded stand-in for a monthly reporting triangle of 1516 claims.

    Cell weights follow ``(1 + x/2) * exp(-8 y)`` at the cell centres (more
    business in later cohorts, most claims reported early).  The totals of
    the calendar residues 0, 1, 2, 3 are fixed at 126, 200, 91 and 100 and
    the remaining 999 claims fall on the other residues, each group drawn
    multinomially.
    """
    rng = np.random.default_rng(seed)
    k = np.arange(1, m + 1)
    K, L = np.meshgrid(k, k, indexing="ij")
    obs = K + L <= m + 1
    w = (1 + 0.5 * (K - 0.5) / m) * np.exp(-8 * (L - 0.5) / m) * obs
    res = (K + L) % 12
    counts = np.zeros((m, m), dtype=np.int64)
    groups = [(res == 0, 126), (res == 1, 200), (res == 2, 91), (res == 3, 100),
              (res >= 4, 999)]
    for mask, total in groups:
        sel = mask & obs
        p = w[sel] / w[sel].sum()
        counts[sel] = rng.multinomial(total, p)
    return RunOffTriangle(m, counts)
