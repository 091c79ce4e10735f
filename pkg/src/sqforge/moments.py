"""Spike-complement moment matching.

For a label ``y`` the inlier spike ``alpha_y * delta_y`` is completed by a
discrete ``F_y`` on ``[-B, B]`` so that ``alpha_y delta_y + (1 - alpha_y) F_y``
has the same Hermite moments ``1..2m`` as N(0, 1), i.e. all zero. ``F_y`` is
found by an LP over a Chebyshev grid, polished on its support and reduced to
at most ``2m + 1`` atoms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linprog, nnls

from .errors import CertificateViolation, Infeasible, NumericalRankFailure
from .hermite import (
    HermiteSeries,
    default_nodes,
    gauss_nodes,
    hermite_table,
    weighted_hermite_table,
)

log = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12
MIXTURE_TOL = 1e-7
LP_TOL = 1e-9
DEFAULT_GRID = 2001
MAX_GRID = 16001


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finitely supported probability measure on the line.

    Atoms are stored in strictly increasing order; duplicate atoms are merged
    and zero-weight atoms dropped on construction.
    """

    atoms: np.ndarray
    weights: np.ndarray
    support_bound: float

    def __post_init__(self):
        t = np.asarray(self.atoms, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if t.shape != w.shape or t.size == 0:
            raise ValueError("atoms and weights must be nonempty and the same length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(w))):
            raise ValueError("atoms and weights must be finite")
        if np.any(w < 0):
            raise ValueError(f"negative weight {w.min():.3e}")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        B = float(self.support_bound)
        if not B > 0:
            raise ValueError("support_bound must be positive")
        if np.any(np.abs(t) > B * (1 + 1e-12)):
            raise ValueError(f"atom outside [-{B}, {B}]")
        keep = w > 0
        t, w = t[keep], w[keep]
        order = np.argsort(t, kind="stable")
        t, w = t[order], w[order]
        if t.size > 1 and np.any(np.diff(t) == 0):
            t, inv = np.unique(t, return_inverse=True)
            w = np.bincount(inv, weights=w)
        t.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "atoms", t)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "support_bound", B)

    def __len__(self) -> int:
        return self.atoms.size

    def hermite_moments(self, kmax: int) -> np.ndarray:
        return hermite_table(kmax, self.atoms) @ self.weights

    def raw_moments(self, kmax: int) -> np.ndarray:
        return np.array([np.dot(self.weights, self.atoms**i) for i in range(kmax + 1)])

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        idx = rng.choice(self.atoms.size, size=size, p=self.weights)
        return self.atoms[idx]


@dataclass(frozen=True)
class SpikeMixture:
    """``alpha_y delta_y + (1 - alpha_y) F_y`` before Gaussian smoothing."""

    y: float
    alpha_y: float
    complement: DiscreteDistribution
    m: int
    alpha: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha_y < 1.0:
            raise ValueError(f"alpha_y must lie in [0, 1), got {self.alpha_y}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.alpha is not None:
            expect = inlier_weight(self.y, self.alpha)
            if not math.isclose(self.alpha_y, expect, rel_tol=1e-12, abs_tol=1e-300):
                raise ValueError("alpha_y inconsistent with alpha")

    def spike_coefficients(self, kmax: int) -> np.ndarray:
        """``alpha_y h_i(y)``, computed without forming ``h_i(y)`` alone."""
        return _spike_terms(self.y, self.alpha_y, kmax)

    def hermite_moments(self, kmax: int) -> np.ndarray:
        """``E_mixture[h_i]`` for i = 0..kmax."""
        return self.spike_coefficients(kmax) + (1.0 - self.alpha_y) * self.complement.hermite_moments(kmax)

    def residuals(self) -> np.ndarray:
        """Mixture Hermite moments 1..2m; all should vanish."""
        return self.hermite_moments(2 * self.m)[1:]

    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residuals())))


def _spike_terms(y: float, alpha_y: float, kmax: int) -> np.ndarray:
    if alpha_y <= 0:
        return np.zeros(kmax + 1)
    return weighted_hermite_table(kmax, np.float64(y), math.log(alpha_y))


# --------------------------------------------------------------------------
# Parameters and targets
# --------------------------------------------------------------------------


def default_order(alpha: float) -> int:
    """``max(1, floor(0.3 / sqrt(alpha)))`` with a guard against 2.9999... ."""
    return max(1, int(math.floor(0.3 / math.sqrt(alpha) + 1e-9)))


def default_bound(m: int) -> float:
    return 4.0 * math.sqrt(m)


def log_inlier_weight(y: float, alpha: float) -> float:
    return 0.5 * math.log(alpha) - 0.5 * y * y * (1.0 - alpha)


def inlier_weight(y, alpha: float):
    """``alpha_y = sqrt(alpha) exp(-y^2 (1 - alpha) / 2)``."""
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 1/2), got {alpha}")
    y = np.asarray(y, dtype=float)
    out = np.sqrt(alpha) * np.exp(-0.5 * y * y * (1.0 - alpha))
    return float(out) if out.ndim == 0 else out


def target_complement_hermite(y: float, alpha_y: float, m: int) -> HermiteSeries:
    """Hermite moments ``F_y`` must have: ``e_i = -alpha_y h_i(y) / (1 - alpha_y)``."""
    if not 0.0 <= alpha_y < 1.0:
        raise ValueError("alpha_y must lie in [0, 1)")
    if m < 1:
        raise ValueError("m must be >= 1")
    e = -_spike_terms(y, alpha_y, 2 * m) / (1.0 - alpha_y)
    e[0] = 1.0
    return HermiteSeries(e)


def chebyshev_grid(B: float, n: int) -> np.ndarray:
    """Chebyshev-Lobatto points on ``[-B, B]`` in increasing order."""
    j = np.arange(n)
    t = -B * np.cos(np.pi * j / (n - 1))
    t[0], t[-1] = -B, B
    if n % 2 == 1:
        t[n // 2] = 0.0
    return t


# --------------------------------------------------------------------------
# LP solve
# --------------------------------------------------------------------------


def _row_scale(M: np.ndarray, e: np.ndarray) -> np.ndarray:
    return np.maximum(np.maximum(np.max(np.abs(M), axis=1), np.abs(e)), 1.0)


def _lp_support(e: np.ndarray, grid: np.ndarray):
    """Minimize L1 moment violation over nonnegative grid weights.

    Returns ``(violation, support_atoms, support_weights)`` where violation is
    measured on row-scaled constraints.
    """
    r = e.size
    M = hermite_table(r - 1, grid)
    s = _row_scale(M, e)
    A = np.hstack([M / s[:, None], np.eye(r), -np.eye(r)])
    c = np.concatenate([np.zeros(grid.size), np.ones(2 * r)])
    res = linprog(c, A_eq=A, b_eq=e / s, bounds=(0, None), method="highs-ds")
    if res.x is None:
        return math.inf, None, None
    w = res.x[: grid.size]
    keep = w > 1e-15 * max(w.max(), 1e-300)
    return float(res.fun), grid[keep], w[keep]


def _lp_extremal(e: np.ndarray, grid: np.ndarray):
    """Among exact matches, maximize the next even Hermite moment of ``F_y``.

    Picks a canonical vertex of the feasible polytope (atoms pushed toward
    the boundary) that varies smoothly with ``y`` and concentrates the
    unmatched mass at order ``2m + 2``.
    """
    r = e.size
    M = hermite_table(r + 1, grid)
    s = _row_scale(M[:r], e)
    obj = -M[r + 1] / np.max(np.abs(M[r + 1]))
    res = linprog(obj, A_eq=M[:r] / s[:, None], b_eq=e / s, bounds=(0, None), method="highs-ds")
    if res.status != 0 or res.x is None:
        return None, None
    w = res.x
    keep = w > 1e-15 * max(w.max(), 1e-300)
    return grid[keep], w[keep]


def _polish(atoms: np.ndarray, w0: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Re-fit nonnegative weights on a fixed support to full precision."""
    M = hermite_table(e.size - 1, atoms)
    s = _row_scale(M, e)
    w, _ = nnls(M / s[:, None], e / s)
    if w.sum() <= 0:
        return w0 / w0.sum()
    return w / w.sum()


def _finish(y, alpha_y, m, e, B, atoms, w):
    w = _polish(atoms, w, e)
    dist = DiscreteDistribution(atoms, w, B)
    if len(dist) > 2 * m + 1:
        dist = caratheodory_reduce(dist, m)
    resid = SpikeMixture(y, alpha_y, dist, m).max_residual()
    return (dist if resid <= MIXTURE_TOL else None), resid


def _attempt(y, alpha_y, m, e, B, n_grid, extremal):
    grid = chebyshev_grid(B, n_grid)
    viol, atoms, w = _lp_support(e, grid)
    if atoms is None or viol > LP_TOL:
        return None, viol
    if extremal:
        xt, xw = _lp_extremal(e, grid)
        if xt is not None:
            dist, _ = _finish(y, alpha_y, m, e, B, xt, xw)
            if dist is not None:
                return dist, viol
    dist, resid = _finish(y, alpha_y, m, e, B, atoms, w)
    return dist, (viol if dist is not None else resid)


def solve_complement(
    y: float,
    alpha: float,
    m: int,
    B: float | None = None,
    grid_points: int = DEFAULT_GRID,
    escalate: bool = True,
    extremal: bool = True,
) -> DiscreteDistribution:
    """Construct ``F_y`` for label ``y``.

    Feasibility is decided by an L1-violation LP on a Chebyshev grid of
    ``[-B, B]``; accepted iff the optimum is at most 1e-9. With ``extremal``
    the returned measure is the feasible one maximizing ``E_F[h_{2m+2}]``.
    Raises :class:`Infeasible` when no grid measure matches the targets, after
    doubling ``B`` (up to ``32 sqrt(m)``) and the grid size (up to 16001).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    B = default_bound(m) if B is None else float(B)
    if B <= 0:
        raise ValueError("B must be positive")
    if grid_points < 4 * m + 4:
        raise ValueError(f"grid_points must be >= 4m+4 = {4 * m + 4}")
    alpha_y = inlier_weight(y, alpha)
    e = target_complement_hermite(y, alpha_y, m).coeffs.copy()

    B_cap = 32.0 * math.sqrt(m)
    attempts = [(B, grid_points)]
    if escalate:
        b, n = B, grid_points
        while 2 * b <= B_cap * (1 + 1e-12):
            b, n = 2 * b, min(MAX_GRID, 2 * (n - 1) + 1)
            attempts.append((b, n))

    worst = math.inf
    for b, n in attempts:
        dist, viol = _attempt(y, alpha_y, m, e, b, n, extremal)
        if dist is not None:
            return dist
        log.debug("complement solve y=%g B=%g grid=%d failed, violation %.3e", y, b, n, viol)
        worst = min(worst, viol)
    raise Infeasible(
        f"no complement for y={y:g}, alpha={alpha:g}, m={m} (min violation {worst:.3e})",
        residual=worst,
        y=y,
    )


def solve_mixture(y: float, alpha: float, m: int, B: float | None = None, **kw) -> SpikeMixture:
    dist = solve_complement(y, alpha, m, B, **kw)
    return SpikeMixture(float(y), inlier_weight(y, alpha), dist, m, alpha)


def refit_on_support(y: float, alpha: float, m: int, dist: DiscreteDistribution) -> DiscreteDistribution | None:
    """Exact complement for a new ``y`` on an existing support, if one exists.

    Solves the moment equations for the weights with the atoms held fixed.
    Returns ``None`` when the solution has a negative weight or misses the
    targets; the caller then falls back to :func:`solve_complement`.
    """
    alpha_y = inlier_weight(y, alpha)
    e = target_complement_hermite(y, alpha_y, m).coeffs
    M = hermite_table(2 * m, dist.atoms)
    s = _row_scale(M, e)
    w, *_ = np.linalg.lstsq(M / s[:, None], e / s, rcond=None)
    if np.any(w < 0):
        if w.min() < -1e-14:
            return None
        w = np.clip(w, 0.0, None)
    w = w / w.sum()
    resid = (1.0 - alpha_y) * (M @ w - e)[1:]
    if np.max(np.abs(resid), initial=0.0) > MIXTURE_TOL:
        return None
    return DiscreteDistribution(dist.atoms, w, dist.support_bound)


# --------------------------------------------------------------------------
# Support reduction
# --------------------------------------------------------------------------


def _null_direction(M: np.ndarray) -> np.ndarray:
    """A null vector of a wide matrix from a column-pivoted QR."""
    r, k = M.shape
    _, R, piv = scipy.linalg.qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(r, k) * np.finfo(float).eps * diag[0]
    rank = int(np.sum(diag > tol))
    if rank == 0:
        raise NumericalRankFailure("moment matrix is numerically zero")
    z_basic = -scipy.linalg.solve_triangular(R[:rank, :rank], R[:rank, rank])
    z = np.zeros(k)
    z[piv[:rank]] = z_basic
    z[piv[rank]] = 1.0
    return z


def caratheodory_reduce(dist: DiscreteDistribution, m: int, tol: float = 1e-9) -> DiscreteDistribution:
    """Drop atoms until at most ``2m + 1`` remain, keeping moments ``0..2m``.

    Each step moves the weights along a null vector of ``M_ij = h_i(t_j)``
    until the first weight reaches zero, then removes that atom.
    """
    r = 2 * m + 1
    t = dist.atoms.copy()
    w = dist.weights.copy()
    if t.size <= r:
        return dist
    M_full = hermite_table(2 * m, t)
    scale = np.maximum(np.max(np.abs(M_full), axis=1), 1.0)
    target = M_full @ w

    while t.size > r:
        M = hermite_table(2 * m, t) / scale[:, None]
        z = _null_direction(M)
        if np.max(np.abs(M @ z)) > 1e-8 * np.max(np.abs(z)):
            raise NumericalRankFailure("null-space direction lost precision")
        neg, pos = z < 0, z > 0
        step_up = np.min(w[neg] / -z[neg]) if neg.any() else math.inf
        step_dn = np.min(w[pos] / z[pos]) if pos.any() else math.inf
        if step_up <= step_dn:
            step, sign = step_up, 1.0
            hit = np.flatnonzero(neg)[np.argmin(w[neg] / -z[neg])]
        else:
            step, sign = step_dn, -1.0
            hit = np.flatnonzero(pos)[np.argmin(w[pos] / z[pos])]
        w = w + sign * step * z
        w[hit] = 0.0
        w[w < 0] = 0.0
        keep = w > 0
        t, w = t[keep], w[keep]

    w = w / w.sum()
    drift = np.abs(hermite_table(2 * m, t) @ w - target) / scale
    if np.max(drift) > tol:
        raise NumericalRankFailure(f"moment drift {np.max(drift):.3e} after reduction")
    return DiscreteDistribution(t, w, dist.support_bound)


# --------------------------------------------------------------------------
# Certificates and auxiliary lemmas
# --------------------------------------------------------------------------


@dataclass
class CertificateReport:
    trials: int
    min_slack: float
    min_scaled_slack: float
    witness_form: str
    witness_coeffs: np.ndarray
    max_identity_gap: float
    slacks: np.ndarray = field(repr=False)

    @property
    def ok(self) -> bool:
        return self.min_scaled_slack >= -LP_TOL


def _certificate_polys(m: int, trials: int, rng: np.random.Generator):
    yield "square", np.eye(1, m + 1)[0]
    yield "boundary", np.eye(1, m)[0]
    for _ in range(trials):
        yield "square", rng.standard_normal(m + 1)
        yield "boundary", rng.standard_normal(m)


def dual_certificate_check(
    mix: SpikeMixture,
    trials: int = 1000,
    seed: int = 0,
    raise_on_violation: bool = True,
) -> CertificateReport:
    """Probe ``E_N[p] >= alpha_y p(y)`` with random nonnegative polynomials.

    Two families are drawn, ``p = r^2`` with ``deg r <= m`` and
    ``p = (B^2 - t^2) q^2`` with ``deg q <= m - 1``; coefficients are standard
    normal in the Hermite basis. ``E_N[p]`` comes from Gauss quadrature. The
    report also carries the largest gap in the identity
    ``E_N[p] - alpha_y p(y) = (1 - alpha_y) E_F[p]``, which holds exactly when
    the mixture matches the Gaussian moments.
    """
    m, B, ay, y = mix.m, mix.complement.support_bound, mix.alpha_y, mix.y
    xq, wq = gauss_nodes(default_nodes(2 * m + 2))
    Hq = hermite_table(m, xq)
    Ht = hermite_table(m, mix.complement.atoms)
    Hy = hermite_table(m, np.float64(y))
    wF = mix.complement.weights
    rng = np.random.default_rng(seed)

    slacks, scaled, gaps, polys = [], [], [], []
    for form, a in _certificate_polys(m, trials, rng):
        k = a.size
        rq, rt, ry = a @ Hq[:k], a @ Ht[:k], float(a @ Hy[:k])
        if form == "square":
            pq, pt, py = rq**2, rt**2, ry**2
        else:
            pq, pt, py = (B * B - xq**2) * rq**2, (B * B - mix.complement.atoms**2) * rt**2, (B * B - y * y) * ry**2
        e_n = float(wq @ pq)
        slack = e_n - ay * py
        scale = float(wq @ np.abs(pq)) + ay * abs(py)
        primal = (1.0 - ay) * float(wF @ pt)
        slacks.append(slack)
        scaled.append(slack / scale)
        gaps.append(abs(slack - primal) / scale)
        polys.append((form, a))

    slacks, scaled = np.array(slacks), np.array(scaled)
    i = int(np.argmin(scaled))
    report = CertificateReport(
        trials=trials,
        min_slack=float(slacks.min()),
        min_scaled_slack=float(scaled[i]),
        witness_form=polys[i][0],
        witness_coeffs=polys[i][1],
        max_identity_gap=float(max(gaps)),
        slacks=slacks,
    )
    if raise_on_violation and not report.ok:
        raise CertificateViolation(
            f"{report.witness_form} polynomial violates E[p] >= alpha_y p(y) at y={y:g}",
            witness=report.witness_coeffs,
            slack=report.min_slack,
        )
    return report


def sup_ratio_value(y: float, alpha: float, m: int) -> float:
    """``alpha_y * sum_{i=1}^m h_i(y)^2``; at most 1/2 in the small-``m`` regime."""
    if m < 1:
        raise ValueError("m must be >= 1")
    half_log = 0.5 * log_inlier_weight(y, alpha)
    h = weighted_hermite_table(m, np.float64(y), half_log)
    return float(np.sum(h[1:] ** 2))


def gauss_positivity_value(q_coeffs, B: float) -> float:
    """``B^2 E[q^2] - 2 E[X^2 q^2]`` for ``q`` given in the Hermite basis."""
    a = np.asarray(q_coeffs, dtype=float)
    x, w = gauss_nodes(default_nodes(a.size))
    q = a @ hermite_table(a.size - 1, x)
    return float(w @ ((B * B - 2.0 * x * x) * q * q))


def gauss_positivity_margin(m: int, B: float, trials: int = 1000, seed: int = 0) -> float:
    """Smallest ``B^2 E[q^2] - 2 E[X^2 q^2]`` over random unit-norm ``q``, ``deg q <= m``."""
    if m < 1 or B <= 0:
        raise ValueError("need m >= 1 and B > 0")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((trials, m + 1))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    x, w = gauss_nodes(default_nodes(m + 1))
    q = a @ hermite_table(m, x)
    vals = (q * q) @ (w * (B * B - 2.0 * x * x))
    return float(vals.min())
