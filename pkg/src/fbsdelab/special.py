"""Small special-function kernel: Lanczos gamma and normal density helpers.

The Lanczos series below (g = 7, 9 coefficients) is accurate to about 1e-13
relative error over the positive axis once paired with the reflection
formula; it backs the tail-constant computations and is cross-checked in the
test suite against direct quadrature of the Euler integral.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["gamma_fn", "norm_pdf", "gauss_laguerre", "gauss_hermite_prob"]

_LANCZOS_G = 7.0
_LANCZOS_C = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)


def gamma_fn(x: float) -> float:
    """Euler gamma by Lanczos series with reflection for x < 1/2."""
    x = float(x)
    if x <= 0.0 and x == math.floor(x):
        raise ValueError("gamma pole at non-positive integer")
    if x < 0.5:
        return math.pi / (math.sin(math.pi * x) * gamma_fn(1.0 - x))
    x -= 1.0
    a = _LANCZOS_C[0]
    t = x + _LANCZOS_G + 0.5
    for i in range(1, len(_LANCZOS_C)):
        a += _LANCZOS_C[i] / (x + i)
    return math.sqrt(2.0 * math.pi) * t ** (x + 0.5) * math.exp(-t) * a


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def gauss_laguerre(n: int):
    """Nodes and weights for int_0^inf e^{-u} f(u) du ~ sum w_i f(u_i)."""
    return np.polynomial.laguerre.laggauss(n)


def gauss_hermite_prob(n: int):
    """Nodes/weights for E[f(Z)], Z standard normal: sum w_i f(x_i)."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    return nodes, weights / math.sqrt(2.0 * math.pi)
