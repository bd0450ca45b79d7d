"""Monte Carlo harness for the two simulation models.

Each replication draws a sample on the triangle, fits the local linear
surface on the window, integrates it into marginals and backfits the three
components.  Pointwise first and second moments of the estimates are
accumulated on fixed evaluation grids over [0, 1] (components) and over the
triangle (joint densities), from which MISE, ISB and IV follow.

Replication ``r`` always draws from ``SeedSequence([seed, r])`` and the
moments are summed in replication order, so the report does not depend on
the number of worker threads.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

from .backfit import (
    BackfitError,
    LinearBackfitProblem,
    solve_backfit,
    solve_linear_backfit,
)
from .geometry import ObservationWindow, _phase, build_window
from .models import SimModel, normalize_model
from .smoother import (
    Sample,
    exact_marginals,
    marginals_from_surface,
    render_surface,
)

log = logging.getLogger(__name__)

__all__ = [
    "sample_model",
    "rejection_sample",
    "run_study",
    "StudyReport",
    "StudyRow",
    "replication_seed",
    "component_truth_on_window",
    "linearization_ratio",
    "DEFAULT_GRIDS",
    "DEFAULT_BANDWIDTH",
    "DEFAULT_LL_BANDWIDTH",
    "COMPONENTS",
]

COMPONENTS = ("f1", "f2", "f3", "joint", "local-linear-joint")

DEFAULT_GRIDS = {
    "model1": [round(0.070 + 0.001 * j, 3) for j in range(31)],
    "model2": [round(0.40 + 0.02 * j, 2) for j in range(21)],
}
DEFAULT_BANDWIDTH = {"model1": 0.089, "model2": 0.64}
DEFAULT_LL_BANDWIDTH = {"model1": 0.085, "model2": 0.48}

# evaluation grids for the integrated errors
N_UNIT = 1001
N_JOINT = 200


def replication_seed(seed: int, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(r)])


def _fold_uniform(rng, k):
    u = rng.random((k, 2))
    flip = u.sum(axis=1) > 1.0
    u[flip] = 1.0 - u[flip]
    return u


def _density_max(model: SimModel, m: int = 401) -> float:
    g = np.linspace(0.0, 1.0, m)
    X, Y = np.meshgrid(g, g, indexing="ij")
    return float(np.max(model.density(X, Y)))


def rejection_sample(model: SimModel, n: int, seed=0) -> tuple[np.ndarray, float]:
    """Draw ``n`` points from ``model`` and report the acceptance rate.

    Proposals are uniform on the triangle (a uniform point of the square
    folded across the anti-diagonal) and are accepted with probability
    ``f / fmax``, ``fmax`` being 1.01 times the maximum over a grid.
    ``seed`` may be an int or a ``SeedSequence``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    # uniform proposal density on the triangle is 2
    bound = 1.01 * _density_max(model) / 2.0
    out = []
    have = proposed = accepted = 0
    while have < n:
        k = min(max(256, int(1.3 * (n - have) * bound) + 64), 1 << 20)
        u = _fold_uniform(rng, k)
        ratio = model.density(u[:, 0], u[:, 1]) / (2.0 * bound)
        keep = rng.random(k) < ratio
        proposed += k
        accepted += int(keep.sum())
        if proposed >= 10_000 and accepted < 0.01 * proposed:
            raise ValueError(
                f"acceptance rate {accepted / proposed:.4f} below 1%; "
                "check the model density"
            )
        out.append(u[keep])
        have += int(keep.sum())
    return np.concatenate(out)[:n], accepted / proposed


def sample_model(model: SimModel, n: int, seed=0) -> Sample:
    """Rejection sample of size ``n`` as a :class:`Sample` (no window yet)."""
    pts, _ = rejection_sample(model, n, seed)
    return Sample.from_points(pts)


# ---------------------------------------------------------------------------
# evaluation grids


def _unit_grid():
    u = np.linspace(0.0, 1.0, N_UNIT)
    w = np.full(N_UNIT, 1.0 / (N_UNIT - 1))
    w[[0, -1]] *= 0.5
    return u, w


def _triangle_grid():
    """Cell midpoints of an N x N partition of the square with triangle weights.

    Cells on the anti-diagonal are cut in half by it, so they get half weight.
    """
    N = N_JOINT
    c = (np.arange(N) + 0.5) / N
    I, Jg = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    s = I + Jg + 1
    full = s < N
    half = s == N
    keep = full | half
    w = np.where(full, 1.0, 0.5)[keep] / N**2
    return c[I[keep]], c[Jg[keep]], w


def component_truth_on_window(model: SimModel, window: ObservationWindow, nodes):
    """True components normalised like the estimates: f1, f2 integrate to one
    over S1 and S2, with the seasonal factor absorbing the constants."""
    a1 = sum(integrate.quad(model.f1, a, b, epsabs=1e-13)[0] for a, b in window.S1)
    a2 = sum(integrate.quad(model.f2, a, b, epsabs=1e-13)[0] for a, b in window.S2)
    n1, n2, n3 = nodes
    return model.f1(n1) / a1, model.f2(n2) / a2, model.f3(n3) * a1 * a2


# ---------------------------------------------------------------------------
# single replication


@dataclass
class _RepOutput:
    comps: dict            # h -> (f1, f2, f3, joint) arrays on the evaluation grids
    ll: dict               # h_ll -> joint array
    failed: dict           # h -> message
    constraint_log: dict   # h -> list of (int f1, int f2, mass, theta_hat)


def _extend_components(result, u, J):
    """Component values on [0, 1] by constant continuation, renormalised so
    that f1 and f2 integrate to one over [0, 1]; the seasonal factor takes
    the inverse constants so the product is unchanged."""
    _, w = _unit_grid()
    f1 = result.f1(u)
    f2 = result.f2(u)
    f3 = result.f3(u)
    a1 = float(np.dot(w, f1))
    a2 = float(np.dot(w, f2))
    return f1 / a1, f2 / a2, f3 * a1 * a2


def _one_replication(model, window, n, seed_seq, bandwidths, ll_bandwidths, kernel,
                     M, m, tol, max_iters, floor_eps):
    sample = sample_model(model, n, seed_seq).with_window(window)
    u, _ = _unit_grid()
    tx, ty, tw = _triangle_grid()
    out = _RepOutput({}, {}, {}, {})
    for h in bandwidths:
        try:
            surf = render_surface(sample, window, h, h, kernel, M)
            marg = marginals_from_surface(surf, window, floor_eps, m)
            res = solve_backfit(marg, window, sample.theta_hat, tol=tol, max_iters=max_iters)
        except BackfitError as exc:
            out.failed[h] = str(exc)
            continue
        if not res.converged:
            out.failed[h] = f"no convergence after {res.iterations} cycles"
            continue
        f1, f2, f3 = _extend_components(res, u, window.J)
        joint = res.product(tx, ty)
        out.comps[h] = (f1, f2, f3, joint)
        out.constraint_log[h] = [row + (sample.theta_hat,) for row in res.constraint_log]
    for h in ll_bandwidths:
        surf = render_surface(sample, window, h, h, kernel, M, box=(0.0, 1.0, 0.0, 1.0))
        ll = surf(tx, ty)
        mass = float(np.dot(tw, ll))
        out.ll[h] = ll / mass if mass > 0 else ll
    return out


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class StudyRow:
    h: float
    component: str
    mise: float
    isb: float
    iv: float
    reps_used: int


@dataclass
class StudyReport:
    model: str
    n: int
    reps: int
    seeds: list
    rows: list
    failures: dict
    runtime: float
    config: dict = field(default_factory=dict)
    ise: dict = field(default_factory=dict, repr=False)
    constraint_log: list = field(default_factory=list, repr=False)

    def row(self, h: float, component: str) -> StudyRow:
        for r in self.rows:
            if r.component == component and abs(r.h - h) < 1e-12:
                return r
        raise KeyError((h, component))

    def bandwidths(self, component: str = "f1") -> list:
        return sorted({r.h for r in self.rows if r.component == component})

    def best_bandwidth(self) -> float:
        """Bandwidth minimising MISE1 + MISE2 + MISE3."""
        hs = self.bandwidths("f1")
        tot = [sum(self.row(h, c).mise for c in ("f1", "f2", "f3")) for h in hs]
        return hs[int(np.argmin(tot))]

    def best_ll_bandwidth(self) -> float:
        hs = self.bandwidths("local-linear-joint")
        return hs[int(np.argmin([self.row(h, "local-linear-joint").mise for h in hs]))]

    def table(self) -> dict:
        """Rows MISE/ISB/IV by column f1, f2, f3, joint, local linear."""
        h = self.best_bandwidth()
        cols = {c: self.row(h, c) for c in ("f1", "f2", "f3", "joint")}
        if self.bandwidths("local-linear-joint"):
            cols["local-linear-joint"] = self.row(self.best_ll_bandwidth(), "local-linear-joint")
        return {
            stat: {c: getattr(r, stat.lower()) for c, r in cols.items()}
            for stat in ("MISE", "ISB", "IV")
        }

    def max_identity_error(self) -> float:
        return max(abs(r.mise - (r.isb + r.iv)) for r in self.rows)

    def write_table_csv(self, path) -> None:
        tab = self.table()
        h = self.best_bandwidth()
        cols = list(next(iter(tab.values())).keys())
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["model", "statistic", *cols])
            for stat, vals in tab.items():
                wr.writerow([self.model, stat, *(_fmt(vals[c]) for c in cols)])
            wr.writerow([self.model, "bandwidth", *(
                _fmt(self.best_ll_bandwidth() if c == "local-linear-joint" else h)
                for c in cols)])

    def write_boxplot_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["h", "component", "MISE", "ISB", "IV", "reps_used"])
            for r in sorted(self.rows, key=lambda r: (COMPONENTS.index(r.component), r.h)):
                wr.writerow([_fmt(r.h), r.component, _fmt(r.mise), _fmt(r.isb),
                             _fmt(r.iv), r.reps_used])

    def manifest(self) -> dict:
        return {
            "model": self.model,
            "n": self.n,
            "reps": self.reps,
            "seeds": self.seeds,
            "failures": {str(k): v for k, v in self.failures.items()},
            "runtime_seconds": self.runtime,
            "config": self.config,
        }


def _fmt(v) -> str:
    return repr(float(v))


class _Moments:
    """Running sums for one (bandwidth, component) cell."""

    def __init__(self, truth, weights):
        self.truth = truth
        self.w = weights
        self.s1 = np.zeros_like(truth)
        self.s2 = np.zeros_like(truth)
        self.ise = []

    def add(self, est):
        self.s1 += est
        self.s2 += est * est
        self.ise.append(float(np.dot(self.w, (est - self.truth) ** 2)))

    def row(self, h, name) -> StudyRow:
        R = len(self.ise)
        if R == 0:
            nan = float("nan")
            return StudyRow(h, name, nan, nan, nan, 0)
        mean = self.s1 / R
        var = self.s2 / R - mean * mean
        isb = float(np.dot(self.w, (mean - self.truth) ** 2))
        iv = float(np.dot(self.w, var))
        mise = float(np.mean(self.ise))
        return StudyRow(float(h), name, mise, isb, iv, R)


def run_study(model, n: int = 400, bandwidth_grid: Sequence[float] | None = None,
              reps: int = 100, seed: int = 0, delta: float = 0.02,
              ll_bandwidths: Sequence[float] | None = None, kernel="epanechnikov",
              seeds: Sequence[int] | None = None, threads: int | None = None,
              M: int = 201, m=(201, 201, 201), tol: float = 1e-7,
              max_iters: int = 200, floor_eps: float = 1e-4) -> StudyReport:
    """Monte Carlo MISE, ISB and IV of the component and joint estimates.

    ``seeds`` overrides the per-replication streams with explicit integer
    seeds (one per replication).  ``ll_bandwidths`` are the bandwidths of the
    rescaled local linear comparison; they default to ``bandwidth_grid``.
    """
    if not isinstance(model, SimModel):
        model = normalize_model(model)
    if bandwidth_grid is None:
        bandwidth_grid = DEFAULT_GRIDS[model.id]
    bandwidth_grid = [float(h) for h in bandwidth_grid]
    ll_bandwidths = bandwidth_grid if ll_bandwidths is None else [float(h) for h in ll_bandwidths]
    if seeds is not None:
        seeds = [int(s) for s in seeds]
        reps = len(seeds)
    if reps < 2:
        raise ValueError("a study needs at least 2 replications")
    if n < 1:
        raise ValueError("n must be positive")
    if any(h <= 0 for h in bandwidth_grid + ll_bandwidths):
        raise ValueError("bandwidths must be positive")

    t0 = time.perf_counter()
    window = build_window(model.region, delta, model.J)
    streams = (
        [np.random.SeedSequence(s) for s in seeds]
        if seeds is not None
        else [replication_seed(seed, r) for r in range(reps)]
    )
    u, wu = _unit_grid()
    tx, ty, tw = _triangle_grid()
    truth = (model.f1(u), model.f2(u), model.f3(u), model.density(tx, ty))
    cells = {
        (h, c): _Moments(truth[k], wu if k < 3 else tw)
        for h in bandwidth_grid
        for k, c in enumerate(("f1", "f2", "f3", "joint"))
    }
    for h in ll_bandwidths:
        cells[h, "local-linear-joint"] = _Moments(truth[3], tw)

    # warm the per-bandwidth design matrix caches before fanning out
    for h in bandwidth_grid:
        render_surface(Sample.from_points(np.empty((0, 2)), window), window, h, h, kernel, M)
    for h in ll_bandwidths:
        render_surface(Sample.from_points(np.empty((0, 2)), window), window, h, h, kernel, M,
                       box=(0.0, 1.0, 0.0, 1.0))
    window.discretize(*m, step=min(1 / 400, min(bandwidth_grid) / 8))

    def job(r):
        return _one_replication(model, window, n, streams[r], bandwidth_grid, ll_bandwidths,
                                kernel, M, m, tol, max_iters, floor_eps)

    workers = threads or os.cpu_count() or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(job, range(reps)))
    else:
        outputs = [job(r) for r in range(reps)]

    failures: dict = {}
    clog = []
    for r, out in enumerate(outputs):
        for h, vals in out.comps.items():
            for k, c in enumerate(("f1", "f2", "f3", "joint")):
                cells[h, c].add(vals[k])
            clog.extend(out.constraint_log[h])
        for h, ll in out.ll.items():
            cells[h, "local-linear-joint"].add(ll)
        for h, msg in out.failed.items():
            failures.setdefault(h, []).append((r, msg))
    rows = [cell.row(h, c) for (h, c), cell in cells.items()]
    ise = {(h, c): cell.ise for (h, c), cell in cells.items()}
    runtime = time.perf_counter() - t0
    config = {
        "model": model.id, "n": n, "reps": reps, "seed": seed, "delta": delta,
        "bandwidth_grid": bandwidth_grid, "ll_bandwidths": ll_bandwidths,
        "kernel": getattr(kernel, "name", kernel), "M": M, "m": list(m),
        "tol": tol, "max_iters": max_iters, "floor_eps": floor_eps, "threads": workers,
        "J": model.J,
    }
    return StudyReport(
        model.id, n, reps,
        seeds if seeds is not None else [[seed, r] for r in range(reps)],
        rows, failures, runtime, config, ise, clog,
    )


# ---------------------------------------------------------------------------
# linearisation check


def linearization_ratio(model, n: int = 2000, h: float | None = None, seed=0,
                        delta: float = 0.02, kernel="epanechnikov", M: int = 201,
                        m=(201, 201, 201)) -> dict:
    """Compare the backfit estimate with the solution of the linearised system.

    Returns the sup distances (relative to the true components, over the
    window nodes) between nonlinear and linearised solutions and between the
    linearised solution and the truth, and their ratio.
    """
    if not isinstance(model, SimModel):
        model = normalize_model(model)
    if h is None:
        h = DEFAULT_BANDWIDTH[model.id] * (400 / n) ** 0.2
    window = build_window(model.region, delta, model.J)
    sample = sample_model(model, n, seed).with_window(window)
    surf = render_surface(sample, window, h, h, kernel, M)
    marg = marginals_from_surface(surf, window, m=m)
    res = solve_backfit(marg, window, sample.theta_hat)
    disc = marg.disc
    exact = exact_marginals(model.density, window, m=m, step=disc.step)
    truth = component_truth_on_window(model, window, [g.nodes for g in disc.grids])
    mu = tuple(
        np.where(g.mask, (fh - fe) / np.where(g.mask, fe, 1.0), 0.0)
        for g, fh, fe in zip(disc.grids, marg.raw, exact.raw)
    )
    prob = LinearBackfitProblem(disc, model.density, truth, mu, fw=exact.raw)
    lin = solve_linear_backfit(prob)
    nonlin_gap = lin_gap = 0.0
    for g, est, tr, dl in zip(disc.grids, (res.f1.values, res.f2.values, res.f3.values),
                              truth, lin.delta):
        mk = g.mask
        bar = tr * (1.0 + dl)
        nonlin_gap = max(nonlin_gap, float(np.max(np.abs(est[mk] - bar[mk]) / tr[mk])))
        lin_gap = max(lin_gap, float(np.max(np.abs(bar[mk] - tr[mk]) / tr[mk])))
    return {
        "nonlinear_vs_linear": nonlin_gap,
        "linear_vs_truth": lin_gap,
        "ratio": nonlin_gap / lin_gap if lin_gap > 0 else float("inf"),
        "converged": res.converged,
        "h": h,
    }
