"""Simulation models with seasonal multiplicative structure on the triangle."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate

from .geometry import SupportRegion, _phase, shape

__all__ = ["SimModel", "normalize_model", "model_density", "MODEL_IDS"]

MODEL_IDS = ("model1", "model2")


def _m1_f1(u):
    return np.ones_like(np.asarray(u, dtype=float))


def _m1_f3(u):
    return np.sin(2 * np.pi * np.asarray(u, dtype=float)) + 1.5


def _m2_f1(u):
    return 1.5 - np.asarray(u, dtype=float)


def _m2_f2(u):
    u = np.asarray(u, dtype=float)
    return 1.25 - 0.75 * u * u


def _m2_f3(u):
    u = np.asarray(u, dtype=float)
    return u**3 - 1.5 * u**2 + 0.5 * u + 0.5


_RAW = {
    "model1": (_m1_f1, _m1_f1, _m1_f3),
    "model2": (_m2_f1, _m2_f2, _m2_f3),
}

# second derivatives of the unnormalised components, used by the bias field
_RAW_D = {
    "model1": (
        (lambda u: np.zeros_like(u), lambda u: np.zeros_like(u)),
        (lambda u: np.zeros_like(u), lambda u: np.zeros_like(u)),
        (lambda u: 2 * np.pi * np.cos(2 * np.pi * u),
         lambda u: -(2 * np.pi) ** 2 * np.sin(2 * np.pi * u)),
    ),
    "model2": (
        (lambda u: -np.ones_like(u), lambda u: np.zeros_like(u)),
        (lambda u: -1.5 * u, lambda u: -1.5 * np.ones_like(u)),
        (lambda u: 3 * u**2 - 3 * u + 0.5, lambda u: 6 * u - 3),
    ),
}


@dataclass(frozen=True, eq=False)
class SimModel:
    """``f(x, y) = f1(x) f2(y) f3(m_J(x + y))`` on the triangle, a density.

    ``f1`` and ``f2`` integrate to one over [0, 1]; the seasonal factor
    carries the normalising constant ``c``.
    """

    id: str
    c: float
    J: float
    region: SupportRegion
    _f1: Callable
    _f2: Callable
    _f3: Callable

    def f1(self, u):
        return self._f1(u)

    def f2(self, u):
        return self._f2(u)

    def f3(self, u):
        return self.c * self._f3(u)

    def density(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        val = self.f1(x) * self.f2(y) * self.f3(_phase(x + y, self.J))
        return np.where(self.region.contains(x, y), val, 0.0)

    def second_partials(self, x, y):
        """Analytic (d^2/dx^2, d^2/dy^2) of the density at points of the region."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        (d1, dd1), (d2, dd2), (d3, dd3) = _RAW_D[self.id]
        f1, f2 = self.f1(x), self.f2(y)
        z = _phase(x + y, self.J)
        J, c = self.J, self.c
        g3 = self.f3(z)
        g3p = c * J * d3(z)
        g3pp = c * J * J * dd3(z)
        fxx = f2 * (dd1(x) * g3 + 2 * d1(x) * g3p + f1 * g3pp)
        fyy = f1 * (dd2(y) * g3 + 2 * d2(y) * g3p + f2 * g3pp)
        return fxx, fyy


@lru_cache(maxsize=None)
def normalize_model(model_id: str, J: float = 2.0) -> SimModel:
    """Build model 1 or model 2 with its normalising constant.

    The constant is one over the integral of the unnormalised product over
    the triangle, computed by adaptive 2D quadrature.
    """
    key = {"1": "model1", "2": "model2"}.get(str(model_id), str(model_id))
    if key not in _RAW:
        raise ValueError(f"unknown model {model_id!r}; choose from {MODEL_IDS}")
    f1, f2, f3 = _RAW[key]
    # f1 and f2 of model 2 already integrate to one on [0, 1]

    def g(y, x):
        return float(f1(x) * f2(y) * f3(_phase(x + y, J)))

    mass, _ = integrate.dblquad(g, 0.0, 1.0, 0.0, lambda x: 1.0 - x,
                                epsabs=1e-13, epsrel=1e-12)
    return SimModel(key, 1.0 / mass, float(J), shape("triangle"), f1, f2, f3)


def model_density(model: SimModel):
    return model.density
