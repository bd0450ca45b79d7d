"""Compactly supported smoothing kernels and the integrals built from them.

Every kernel here is a piecewise polynomial on ``[-1, 1]``, so moments,
partial moments and ``int K^2`` are evaluated in closed form.  The two-fold
convolution ``K*K`` is tabulated once per kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial as P

__all__ = [
    "Kernel",
    "KERNELS",
    "get_kernel",
    "kernel_moment",
    "kernel_l2",
    "selfconv_table",
    "selfconv_product_integral",
]

CONV_GRID_SIZE = 4001


@dataclass(frozen=True)
class Kernel:
    """Symmetric probability kernel supported on [-1, 1].

    ``pieces`` holds ``(a, b, coeffs)`` triples with coefficients in
    ascending order; the kernel is the polynomial on ``[a, b]`` and zero
    outside ``[-1, 1]``.
    """

    name: str
    pieces: tuple = field(repr=False)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        for a, b, c in self.pieces:
            sel = (u >= a) & (u <= b)
            out[sel] = P.polyval(u[sel], c)
        return out

    def partial_moment(self, s, k: int):
        """``G_k(s) = int_{-1}^{s} t^k K(t) dt`` for an array of ``s``."""
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        for a, b, c in self._antiderivs(k):
            out += P.polyval(np.clip(s, a, b), c) - P.polyval(a, c)
        return out

    @lru_cache(maxsize=None)
    def _antiderivs(self, k: int):
        mono = np.zeros(k + 1)
        mono[k] = 1.0
        return tuple(
            (a, b, P.polyint(P.polymul(mono, c))) for a, b, c in self.pieces
        )

    def __hash__(self):
        return hash(self.name)

    def __eq__(self, other):
        return isinstance(other, Kernel) and other.name == self.name


def _pieces(*spec):
    return tuple((a, b, np.asarray(c, dtype=float)) for a, b, c in spec)


KERNELS = {
    "epanechnikov": Kernel("epanechnikov", _pieces((-1.0, 1.0, [0.75, 0.0, -0.75]))),
    "quartic": Kernel(
        "quartic",
        _pieces((-1.0, 1.0, [15 / 16, 0.0, -30 / 16, 0.0, 15 / 16])),
    ),
    "triangular": Kernel(
        "triangular", _pieces((-1.0, 0.0, [1.0, 1.0]), (0.0, 1.0, [1.0, -1.0]))
    ),
}


def get_kernel(kernel) -> Kernel:
    if isinstance(kernel, Kernel):
        return kernel
    try:
        return KERNELS[str(kernel).lower()]
    except KeyError:
        raise ValueError(
            f"unknown kernel {kernel!r}; choose from {sorted(KERNELS)}"
        ) from None


def kernel_moment(kernel, p: int) -> float:
    """``int u^p K(u) du``."""
    if p < 0:
        raise ValueError("moment order must be nonnegative")
    K = get_kernel(kernel)
    return float(K.partial_moment(1.0, int(p)))


@lru_cache(maxsize=None)
def kernel_l2(kernel) -> float:
    """``int K(u)^2 du``."""
    K = get_kernel(kernel)
    total = 0.0
    for a, b, c in K.pieces:
        anti = P.polyint(P.polymul(c, c))
        total += P.polyval(b, anti) - P.polyval(a, anti)
    return float(total)


@lru_cache(maxsize=None)
def selfconv_table(kernel) -> tuple[np.ndarray, np.ndarray]:
    """Tabulate ``K*K`` on a uniform grid over [-2, 2].

    Each value is an exact integral: the overlap of the two supports is
    split at the polynomial breakpoints and integrated by Gauss-Legendre
    with enough nodes for the product degree.
    """
    K = get_kernel(kernel)
    u = np.linspace(-2.0, 2.0, CONV_GRID_SIZE)
    deg = max(len(c) for _, _, c in K.pieces) - 1
    gx, gw = np.polynomial.legendre.leggauss(deg + 2)
    knots = sorted({a for a, _, _ in K.pieces} | {b for _, b, _ in K.pieces})
    vals = np.empty_like(u)
    for i, ui in enumerate(u):
        lo, hi = max(-1.0, ui - 1.0), min(1.0, ui + 1.0)
        if hi <= lo:
            vals[i] = 0.0
            continue
        cuts = {lo, hi}
        cuts.update(k for k in knots if lo < k < hi)
        cuts.update(ui - k for k in knots if lo < ui - k < hi)
        cuts = sorted(cuts)
        acc = 0.0
        for a, b in zip(cuts[:-1], cuts[1:]):
            t = 0.5 * (b - a) * gx + 0.5 * (a + b)
            acc += 0.5 * (b - a) * np.sum(gw * K(t) * K(ui - t))
        vals[i] = acc
    u.flags.writeable = False
    vals.flags.writeable = False
    return u, vals


def selfconv_product_integral(kernel, r: float) -> float:
    """``int [K*K](u) [K*K](r u) du`` over [-2, 2].

    Trapezoid rule on the tabulated convolution; ``K*K(r u)`` is read from
    the table by linear interpolation.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    u, kk = selfconv_table(get_kernel(kernel))
    kk_r = np.interp(r * u, u, kk, left=0.0, right=0.0)
    return float(np.trapezoid(kk * kk_r, u))
