"""Backfitting solvers for the seasonal multiplicative density.

``solve_backfit`` iterates the three ratio updates

    f1(x) = th1 * fw1(x) / int_{J2(x)} f2(y) f3(m(x+y)) dy
    f2(y) = th2 * fw2(y) / int_{J1(y)} f1(x) f3(m(x+y)) dx
    f3(z) = th3 * fw3(z) / sum_l int_{J3l(z)} f1(x) f2((z+l)/J - x) dx

with the constants chosen after each raw update so that ``f1`` and ``f2``
integrate to one over S1, S2 and the product integrates to the empirical
window mass over S.

``solve_linear_backfit`` solves the linearisation of the same system around
a known density (relative deviations ``delta_j`` plus constants ``d_j``),
which is what the bias and linearisation checks are built on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .discretize import ComponentGrid, Discretization
from .geometry import ObservationWindow, _phase
from .kernels import get_kernel, kernel_l2, selfconv_product_integral

log = logging.getLogger(__name__)

__all__ = [
    "BackfitError",
    "ComponentEstimate",
    "BackfitResult",
    "solve_backfit",
    "product_density",
    "LinearBackfitProblem",
    "LinearBackfitSolution",
    "solve_linear_backfit",
    "AsymptoticSD",
    "asymptotic_sd",
]


class BackfitError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ComponentEstimate:
    """A component function on its grid; interpolates between nodes."""

    domain: str
    grid: ComponentGrid
    values: np.ndarray

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.nodes

    def __call__(self, u):
        return self.grid(self.values, u)

    def integral(self) -> float:
        return self.grid.integrate(self.values)


@dataclass(eq=False)
class BackfitResult:
    f1: ComponentEstimate
    f2: ComponentEstimate
    f3: ComponentEstimate
    theta_hat: float
    thetas: tuple
    trace: list
    converged: bool
    iterations: int
    J: float
    disc: Discretization = field(repr=False)
    constraint_log: list = field(default_factory=list, repr=False)
    floored_fraction: float = 0.0
    stage: str = "single"
    previous: "BackfitResult | None" = field(default=None, repr=False)

    @property
    def components(self) -> tuple[ComponentEstimate, ComponentEstimate, ComponentEstimate]:
        return self.f1, self.f2, self.f3

    def product(self, x, y):
        """Vectorized ``f1(x) f2(y) f3(m_J(x + y))``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.f1(x) * self.f2(y) * self.f3(_phase(x + y, self.J))

    def product_mass(self) -> float:
        return self.disc.product_mass(self.f1.values, self.f2.values, self.f3.values)

    def summary(self) -> dict:
        return {
            "theta_hat": self.theta_hat,
            "theta1": self.thetas[0],
            "theta2": self.thetas[1],
            "theta3": self.thetas[2],
            "iterations": self.iterations,
            "converged": self.converged,
            "floored_fraction": self.floored_fraction,
            "final_delta": self.trace[-1] if self.trace else float("nan"),
            "stage": self.stage,
        }


def _ratio(num, den, grid: ComponentGrid, floor: float, name: str):
    m = grid.mask
    if np.any(den[m] < floor):
        bad = grid.nodes[m][np.argmin(den[m])]
        raise BackfitError(
            f"window too thin / floor breached: denominator for {name} "
            f"is {den[m].min():.3g} < {floor:.3g} at u={bad:.4g}"
        )
    out = np.zeros_like(num)
    out[m] = num[m] / den[m]
    return grid.fill(out)


def solve_backfit(marginals, window: ObservationWindow, theta_hat: float,
                  init=None, tol: float = 1e-7, max_iters: int = 200,
                  fixed_f3=None) -> BackfitResult:
    """Solve the backfitting equations by cyclic updates f1 -> f2 -> f3.

    ``marginals`` is a :class:`~insample.smoother.MarginalSet`.  With
    ``fixed_f3`` (grid values on S3) only the first two equations are
    iterated and the seasonal component is held at the supplied shape.
    """
    disc = marginals.disc
    g1, g2, g3 = disc.grids
    fw1, fw2, fw3 = marginals.fw1, marginals.fw2, marginals.fw3
    floor = marginals.floor_eps * window.delta
    J = window.J

    if init is None:
        f1 = np.full(g1.size, 1.0 / window.S1.measure)
        f2 = np.full(g2.size, 1.0 / window.S2.measure)
    else:
        f1 = np.asarray(init[0], dtype=float).copy()
        f2 = np.asarray(init[1], dtype=float).copy()
        f1 /= g1.integrate(f1)
        f2 /= g2.integrate(f2)

    def seasonal(f1, f2):
        d3 = disc.denominators(3, f1, f2, None)
        if fixed_f3 is not None:
            raw = np.asarray(fixed_f3, dtype=float)
        else:
            raw = _ratio(fw3, d3, g3, floor, "f3")
        mass = float(np.dot(g3.weights, raw * d3)) / J
        th3 = theta_hat / mass
        return th3 * raw, th3

    f3, th3 = seasonal(f1, f2)
    th1 = th2 = 1.0
    trace: list[float] = []
    log_rows: list[tuple] = []
    converged = False
    k = 0
    for k in range(1, max_iters + 1):
        raw1 = _ratio(fw1, disc.denominators(1, None, f2, f3), g1, floor, "f1")
        th1 = 1.0 / g1.integrate(raw1)
        f1_new = th1 * raw1
        raw2 = _ratio(fw2, disc.denominators(2, f1_new, None, f3), g2, floor, "f2")
        th2 = 1.0 / g2.integrate(raw2)
        f2_new = th2 * raw2
        f3_new, th3 = seasonal(f1_new, f2_new)
        change = max(
            np.max(np.abs(f1_new - f1)),
            np.max(np.abs(f2_new - f2)),
            np.max(np.abs(f3_new - f3)),
        )
        f1, f2, f3 = f1_new, f2_new, f3_new
        trace.append(float(change))
        log_rows.append((g1.integrate(f1), g2.integrate(f2),
                         disc.product_mass(f1, f2, f3)))
        if k > 3 and trace[-1] > trace[-2] * (1 + 1e-9) and trace[-2] > tol:
            log.debug("backfit step %d: update grew from %.3g to %.3g",
                      k, trace[-2], trace[-1])
        if change < tol:
            converged = True
            break
    if not converged:
        log.warning("backfitting did not converge in %d cycles (last change %.3g)",
                    max_iters, trace[-1] if trace else float("nan"))
    return BackfitResult(
        ComponentEstimate("S1", g1, f1),
        ComponentEstimate("S2", g2, f2),
        ComponentEstimate("S3", g3, f3),
        float(theta_hat),
        (float(th1), float(th2), float(th3)),
        trace,
        converged,
        k,
        J,
        disc,
        log_rows,
        float(getattr(marginals, "floored_fraction", 0.0)),
        "fixed-f3" if fixed_f3 is not None else "single",
    )


def product_density(result: BackfitResult, at, J: float | None = None) -> float:
    """``f1(x) f2(y) f3(m_J(x + y))`` at a single point of the unit square."""
    x, y = (float(v) for v in at)
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError(f"point ({x}, {y}) outside the unit square")
    J = result.J if J is None else J
    z = _phase(x + y, J)
    return float(result.f1(x) * result.f2(y) * result.f3(z))


# ---------------------------------------------------------------------------
# linearised system


@dataclass(eq=False)
class LinearBackfitProblem:
    """Linearised backfitting around the density ``f`` on a window.

    ``comps`` are the true components on the grids, normalised so that
    ``f1``, ``f2`` integrate to one over S1, S2.  ``fw`` are the section
    integrals of ``f`` and ``mu`` the right-hand sides.
    """

    disc: Discretization
    density: object
    comps: tuple
    mu: tuple
    fw: tuple = None
    kernels: tuple = field(default=None, repr=False)

    def __post_init__(self):
        d = self.disc
        if self.fw is None:
            self.fw = tuple(d.evaluate_on(j, self.density) for j in (1, 2, 3))
        for j, (g, fw) in enumerate(zip(d.grids, self.fw), start=1):
            if np.any(fw[g.mask] <= 0):
                raise ValueError(f"section integral of f vanishes on S{j}")
        if self.kernels is None:
            self.kernels = self._operators()

    def _operators(self):
        """Dense matrices T_jk with (T_jk g)(u) = int g_k * f / fw_j over sections."""
        d = self.disc
        ops = {}
        for j in (1, 2, 3):
            q = d.quads[j - 1]
            fq = self.density(q.x, q.y)
            g = d.grids[j - 1]
            inv = np.zeros(g.size)
            inv[g.mask] = 1.0 / self.fw[j - 1][g.mask]
            weighted = d.owners[j - 1].multiply(fq[None, :]).tocsr()
            for k in (1, 2, 3):
                if k == j:
                    continue
                ops[j, k] = (weighted @ d.interp[j - 1][k]).toarray() * inv[:, None]
        return ops

    def apply_T(self, delta):
        T = self.kernels
        d1, d2, d3 = delta
        return (
            T[1, 2] @ d2 + T[1, 3] @ d3,
            T[2, 1] @ d1 + T[2, 3] @ d3,
            T[3, 1] @ d1 + T[3, 2] @ d2,
        )

    def constraint_values(self, delta):
        g1, g2, g3 = self.disc.grids
        f1, f2, _ = self.comps
        fw1, fw2, fw3 = self.fw
        d1, d2, d3 = delta
        mass = (g1.integrate(fw1 * d1) + g2.integrate(fw2 * d2)
                + float(np.dot(g3.weights, fw3 * d3)) / self.disc.J)
        return g1.integrate(f1 * d1), g2.integrate(f2 * d2), mass

    def residual(self, delta, d) -> float:
        """Sup norm of ``delta - d - mu + T delta`` on the in-window nodes."""
        t = self.apply_T(delta)
        worst = 0.0
        for j, g in enumerate(self.disc.grids):
            r = delta[j] - d[j] - self.mu[j] + t[j]
            worst = max(worst, float(np.max(np.abs(r[g.mask]))))
        return worst


@dataclass(eq=False)
class LinearBackfitSolution:
    delta: tuple
    d: tuple
    sweeps: int
    residual: float
    constraint_violation: float


def solve_linear_backfit(problem: LinearBackfitProblem, tol: float = 1e-9,
                         max_sweeps: int = 500) -> LinearBackfitSolution:
    """Gauss-Seidel sweeps over (delta1, delta2, delta3).

    After each block update the constant ``d_j`` is re-chosen so that the
    matching linear constraint holds exactly.
    """
    disc = problem.disc
    g1, g2, g3 = disc.grids
    f1, f2, _ = problem.comps
    fw1, fw2, fw3 = problem.fw
    mu1, mu2, mu3 = (np.asarray(m, dtype=float) for m in problem.mu)
    T = problem.kernels
    J = disc.J
    w1 = g1.weights * f1
    w2 = g2.weights * f2
    w1_mass = g1.weights * fw1
    w2_mass = g2.weights * fw2
    w3_mass = g3.weights * fw3 / J

    d1 = np.zeros(g1.size)
    d2 = np.zeros(g2.size)
    d3 = np.zeros(g3.size)
    c = [0.0, 0.0, 0.0]
    sweeps = 0
    change = np.inf
    for sweeps in range(1, max_sweeps + 1):
        r1 = mu1 - T[1, 2] @ d2 - T[1, 3] @ d3
        c[0] = -np.dot(w1, r1) / w1.sum()
        n1 = r1 + c[0]
        r2 = mu2 - T[2, 1] @ n1 - T[2, 3] @ d3
        c[1] = -np.dot(w2, r2) / w2.sum()
        n2 = r2 + c[1]
        r3 = mu3 - T[3, 1] @ n1 - T[3, 2] @ n2
        c[2] = -(np.dot(w1_mass, n1) + np.dot(w2_mass, n2) + np.dot(w3_mass, r3)) / w3_mass.sum()
        n3 = r3 + c[2]
        change = max(np.max(np.abs(n1 - d1)), np.max(np.abs(n2 - d2)),
                     np.max(np.abs(n3 - d3)))
        d1, d2, d3 = n1, n2, n3
        if change < tol:
            break
    delta = (d1, d2, d3)
    res = problem.residual(delta, c)
    viol = max(abs(v) for v in problem.constraint_values(delta))
    if change >= tol:
        raise BackfitError(
            f"linear backfitting did not converge in {max_sweeps} sweeps: "
            f"last change {change:.3g}, residual {res:.3g}"
        )
    return LinearBackfitSolution(delta, tuple(float(v) for v in c), sweeps, res, viol)


# ---------------------------------------------------------------------------
# plug-in variance


class AsymptoticSD(NamedTuple):
    sd: float
    sigma2: float
    valid: bool


def asymptotic_sd(result: BackfitResult, marginals, j: int, u: float, n: int,
                  h1: float, h2: float, K="epanechnikov",
                  breaks=None, break_tol: float = 1e-3) -> AsymptoticSD:
    """Plug-in standard deviation of the j-th component estimate at ``u``.

    ``sd = n^(-2/5) * sigma_j(u) * f_j(u)`` with ``c_j = h_j n^(1/5)``.
    ``valid`` is False at recorded discontinuities of the marginal
    densities, where the normal approximation does not apply.
    """
    if j not in (1, 2, 3):
        raise ValueError("component index must be 1, 2 or 3")
    K = get_kernel(K)
    c1 = h1 * n ** 0.2
    c2 = h2 * n ** 0.2
    grid = marginals.disc.grids[j - 1]
    fw = grid(marginals.fw[j - 1], u)
    if fw < marginals.floor_eps:
        raise ValueError(f"marginal density at u={u} is below the floor")
    if j == 1:
        sigma2 = kernel_l2(K) / (c1 * fw)
    elif j == 2:
        sigma2 = kernel_l2(K) / (c2 * fw)
    else:
        sigma2 = selfconv_product_integral(K, c1 / c2) / (c2 * fw)
    f_u = result.components[j - 1](u)
    sd = n ** -0.4 * np.sqrt(sigma2) * f_u
    if breaks is None:
        breaks = marginals.disc.window.breaks.get(j, [])
    valid = True
    for a in breaks:
        dist = abs(u - a)
        if j == 3:
            dist = min(dist, 1.0 - dist)
        if dist < break_tol:
            valid = False
    return AsymptoticSD(float(sd), float(sigma2), valid)
