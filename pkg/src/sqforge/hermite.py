"""Normalized probabilist's Hermite polynomials and Gaussian expectations.

Everything here works in the orthonormal basis ``h_k = He_k / sqrt(k!)`` under
the standard Gaussian weight. Series are plain coefficient vectors
``(a_0, ..., a_K)`` wrapped in :class:`HermiteSeries`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

__all__ = [
    "HermiteSeries",
    "hermite_eval",
    "hermite_table",
    "weighted_hermite_table",
    "gauss_nodes",
    "gauss_quadrature_expectation",
    "default_nodes",
    "hermite_moments_of_discrete",
    "ou_pushforward",
    "hermite_tail_sup",
    "hermite_tail_sups",
]


@dataclass(frozen=True)
class HermiteSeries:
    """Coefficients of a function in the ``h_0..h_K`` basis."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).ravel()
        if c.size == 0:
            raise ValueError("HermiteSeries needs at least one coefficient")
        if not np.all(np.isfinite(c)):
            raise ValueError("HermiteSeries coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def K(self) -> int:
        return self.coeffs.size - 1

    def __len__(self) -> int:
        return self.coeffs.size

    def __getitem__(self, i):
        return self.coeffs[i]

    def __call__(self, x):
        """Evaluate ``sum_i a_i h_i(x)``."""
        return np.tensordot(self.coeffs, hermite_table(self.K, x), axes=1)

    def tail_energy(self) -> float:
        """``sum_{i>=1} a_i^2``: the chi-square mass of a density series."""
        return float(np.sum(self.coeffs[1:] ** 2))


def hermite_table(kmax: int, x) -> np.ndarray:
    """Rows ``h_0(x), ..., h_kmax(x)`` stacked along a new leading axis.

    Uses the forward recurrence
    ``sqrt(k) h_k = x h_{k-1} - sqrt(k-1) h_{k-2}``.
    """
    if kmax < 0:
        raise ValueError("kmax must be >= 0")
    x = np.asarray(x, dtype=float)
    out = np.empty((kmax + 1,) + x.shape)
    out[0] = 1.0
    if kmax >= 1:
        out[1] = x
    for k in range(2, kmax + 1):
        out[k] = (x * out[k - 1] - np.sqrt(k - 1) * out[k - 2]) / np.sqrt(k)
    return out


def weighted_hermite_table(kmax: int, x, log_scale) -> np.ndarray:
    """``exp(log_scale) * h_k(x)`` for k = 0..kmax without intermediate overflow.

    The recurrence is linear, so seeding it with ``exp(log_scale)`` instead of
    1 scales every row. Useful for ``h_k(x) exp(-x^2/4)`` and for spike terms
    ``alpha_y h_k(y)`` at large ``|y|`` where ``alpha_y`` underflows slowly.
    """
    x = np.asarray(x, dtype=float)
    s = np.exp(np.broadcast_to(np.asarray(log_scale, dtype=float), x.shape))
    out = np.empty((kmax + 1,) + x.shape)
    out[0] = s
    if kmax >= 1:
        out[1] = x * s
    for k in range(2, kmax + 1):
        out[k] = (x * out[k - 1] - np.sqrt(k - 1) * out[k - 2]) / np.sqrt(k)
    return out


def hermite_eval(k: int, x):
    """Value of ``h_k`` at ``x`` (scalar or array)."""
    if k < 0:
        raise ValueError("degree must be >= 0")
    out = hermite_table(k, x)[k]
    return float(out) if np.ndim(out) == 0 else out


def default_nodes(max_degree: int) -> int:
    return 4 * max_degree + 8


@lru_cache(maxsize=64)
def _gauss_rule(nodes: int):
    x, w = hermegauss(nodes)
    w = w / np.sqrt(2.0 * np.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_nodes(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and probability weights of the ``nodes``-point rule for N(0,1)."""
    if nodes < 1:
        raise ValueError("nodes must be >= 1")
    return _gauss_rule(int(nodes))


def gauss_quadrature_expectation(f: Callable, nodes: int) -> float:
    """Gauss-Hermite estimate of ``E[f(X)]`` for ``X ~ N(0, 1)``.

    Exact (up to rounding) when ``f`` is a polynomial of degree at most
    ``2 * nodes - 1``. ``f`` is called once on the full node array.
    """
    x, w = gauss_nodes(nodes)
    vals = np.asarray(f(x), dtype=float)
    if vals.shape != x.shape:
        vals = np.array([float(f(xi)) for xi in x])
    return float(np.dot(w, vals))


def hermite_moments_of_discrete(dist, kmax: int) -> HermiteSeries:
    """``E_F[h_i]`` for i = 0..kmax when ``F`` is a finite atomic measure.

    ``dist`` is anything with ``atoms`` and ``weights`` arrays.
    """
    atoms = np.asarray(dist.atoms, dtype=float)
    weights = np.asarray(dist.weights, dtype=float)
    return HermiteSeries(hermite_table(kmax, atoms) @ weights)


def ou_pushforward(series: HermiteSeries, rho: float) -> HermiteSeries:
    """Apply the Ornstein-Uhlenbeck operator ``U_rho`` to a coefficient vector.

    ``U_rho`` sends the law of ``T`` to the law of ``rho T + sqrt(1-rho^2) Z``;
    in this basis it just multiplies coefficient ``i`` by ``rho**i``.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    c = np.asarray(series.coeffs, dtype=float)
    return HermiteSeries(c * rho ** np.arange(c.size))


def hermite_tail_sup(k: int, grid: int = 200_000) -> float:
    """Grid maximum of ``h_k(x)^2 exp(-x^2/2)``.

    The search window is ``|x| <= sqrt(4k + 8)``, which contains the
    oscillatory region of ``h_k``; outside it the weighted function decays.
    """
    return float(hermite_tail_sups(k, grid)[-1])


def hermite_tail_sups(kmax: int, grid: int = 200_000, window: float | None = None) -> np.ndarray:
    """``max_x h_k(x)^2 exp(-x^2/2)`` for k = 1..kmax on one shared grid.

    Only two recurrence rows are held at a time, so memory stays at
    ``O(grid)``. The default window is the one for ``kmax``.
    """
    if kmax < 1:
        raise ValueError("k must be >= 1")
    half = np.sqrt(4.0 * kmax + 8.0) if window is None else float(window)
    x = np.linspace(-half, half, int(grid))
    prev = np.exp(-0.25 * x * x)
    cur = x * prev
    out = np.empty(kmax)
    out[0] = np.max(cur * cur)
    for k in range(2, kmax + 1):
        prev, cur = cur, (x * cur - np.sqrt(k - 1) * prev) / np.sqrt(k)
        out[k - 1] = np.max(cur * cur)
    return out
