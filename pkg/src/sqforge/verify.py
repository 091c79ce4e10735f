"""Numerical certificates for a constructed instance.

The chi-square divergence of ``A_y`` from N(0, 1) is computed from its
Hermite series (only orders above ``2m`` contribute) and can be cross-checked
against direct quadrature of the explicit Gaussian-mixture density.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .hermite import gauss_nodes, hermite_table
from .instance import ComplementFamily, ConditionalModel, InstanceParams, LabeledDataset, build_conditional

Z_THRESHOLD = 5.0
BOUND_SLACK = 10.0
# sup_{k, x} h_k(x)^2 exp(-x^2/2) <= CRAMER^2 (Cramer's inequality)
CRAMER = 1.086435


def default_truncation(m: int) -> int:
    return max(120, 10 * m)


def _mixture_coefficients(model: ConditionalModel, K: int) -> np.ndarray:
    mix = model.mixture
    spike = mix.spike_coefficients(K)
    with np.errstate(over="ignore", invalid="ignore"):
        comp = hermite_table(K, mix.complement.atoms) @ mix.complement.weights
    return spike + (1.0 - mix.alpha_y) * comp


def chi2_terms(model: ConditionalModel, K: int) -> np.ndarray:
    """Per-order contributions ``rho^{2i} E_{M_y}[h_i]^2`` for i = 0..K (zeroed up to 2m)."""
    m = model.mixture.m
    if K <= 2 * m:
        raise ValueError(f"truncation K={K} must exceed 2m={2 * m}")
    coeffs = _mixture_coefficients(model, K)
    i = np.arange(K + 1)
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        terms = np.where(model.rho > 0, model.rho ** (2 * i), (i == 0).astype(float)) * coeffs**2
    terms[: 2 * m + 1] = 0.0
    return terms


def chi2_of_conditional(model: ConditionalModel, K: int | None = None) -> float:
    """``chi^2(A_y, N(0,1))`` truncated at Hermite order ``K``."""
    K = default_truncation(model.mixture.m) if K is None else K
    return float(np.sum(chi2_terms(model, K)))


def chi2_tail_bound(model: ConditionalModel, K: int) -> float:
    """Upper bound on the discarded orders ``i > K`` of the chi-square series.

    Uses ``|h_i(x)| <= CRAMER exp(x^2/4)`` on every term.
    """
    rho = model.rho
    if rho == 0:
        return 0.0
    mix = model.mixture
    B = float(np.max(np.abs(mix.complement.atoms)))
    amp = mix.alpha_y * math.exp(mix.y**2 / 4) + (1.0 - mix.alpha_y) * math.exp(B * B / 4)
    return CRAMER**2 * amp**2 * rho ** (2 * (K + 1)) / (1.0 - rho**2)


def chi2_converged(model: ConditionalModel, K: int | None = None, rel: float = 0.01, K_max: int = 4000):
    """Double ``K`` until two successive truncations agree to ``rel``.

    Returns ``(value, K_used)``.
    """
    K = default_truncation(model.mixture.m) if K is None else K
    prev = chi2_of_conditional(model, K)
    while K < K_max:
        K2 = 2 * K
        cur = chi2_of_conditional(model, K2)
        if cur == prev or abs(cur - prev) <= rel * abs(cur):
            return cur, K2
        prev, K = cur, K2
    return prev, K


def chi2_density_quadrature(model: ConditionalModel) -> float:
    """``int (A_y - phi)^2 / phi dz`` by adaptive quadrature of the density.

    Independent of the Hermite machinery. The integrand is written as
    ``phi(z) (sum_k w_k (r_k(z) - 1))^2`` with ``r_k`` the density ratio of each
    component to ``phi``, which avoids cancellation when ``A_y`` is close to
    N(0, 1).
    """
    s2 = model.variance
    mu = model.component_means()
    w = model.component_weights()
    if s2 >= 2.0:
        return math.inf

    def integrand(z):
        logr = -0.5 * (z - mu) ** 2 / s2 + 0.5 * z * z - 0.5 * math.log(s2)
        dev = float(np.dot(w, np.expm1(logr)))
        return math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) * dev * dev

    # outside this window the integrand is below exp(-L^2/4) relative to its peak
    L = 40.0
    lo, hi = float(mu.min()) - L, float(mu.max()) + L
    pts = np.unique(np.concatenate([mu, [0.0]]))
    pts = pts[(pts > lo) & (pts < hi)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(integrand, lo, hi, points=pts, limit=1000, epsabs=0.0, epsrel=1e-11)
    return float(val)


def chi2_bound_value(y: float, params: InstanceParams) -> float:
    """``10 (alpha e^{y^2(alpha - 1/2)} + e^{B^2/2}) / (1 - rho^2)``."""
    a, B, rho = params.alpha, params.B, params.rho
    return BOUND_SLACK * (a * math.exp(y * y * (a - 0.5)) + math.exp(B * B / 2)) / (1 - rho**2)


def chi2_budget(params: InstanceParams) -> float:
    """Closed-form budget ``e^{B^2/2} / (1 - rho^2)`` the expected chi-square is compared to."""
    return math.exp(params.B**2 / 2) / (1 - params.rho**2)


def expected_chi2(
    params: InstanceParams,
    family: ComplementFamily | None = None,
    K: int | None = None,
    quad_points: int = 64,
    per_y: list | None = None,
) -> float:
    """Gauss-quadrature estimate of ``E_{y ~ N(0, 1/alpha)} chi^2(A_y, N(0,1))``.

    If ``per_y`` is a list, ``(y, chi2)`` pairs at the quadrature nodes are
    appended to it.
    """
    family = family or ComplementFamily.for_params(params)
    K = default_truncation(params.m) if K is None else K
    x, w = gauss_nodes(quad_points)
    ys = x / math.sqrt(params.alpha)
    total = 0.0
    for yi, wi in zip(ys, w):
        c = chi2_of_conditional(build_conditional(float(yi), params, family), K)
        if per_y is not None:
            per_y.append((float(yi), c))
        total += wi * c
    return float(total)


def pair_correlation_bound(u, v, params: InstanceParams, expected_chi2_value: float) -> float:
    """Bound ``|u.v|^{2m+1} E_y chi^2`` on the pairwise correlation of two planted laws."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    dot = abs(float(u @ v))
    if np.array_equal(u, v) or dot >= 1.0:
        return float(expected_chi2_value)
    return dot ** (2 * params.m + 1) * float(expected_chi2_value)


@dataclass
class CorrelationReport:
    per_y_chi2: list
    expected_chi2: float
    pair_bounds: list
    truncation_order: int
    bound_formula_value: float
    tail_bound: float = 0.0
    bound_violations: list = field(default_factory=list)

    def ok(self) -> bool:
        return (
            all(c >= 0 for _, c in self.per_y_chi2)
            and math.isfinite(self.expected_chi2)
            and not self.bound_violations
        )


def correlation_report(
    params: InstanceParams,
    directions=None,
    family: ComplementFamily | None = None,
    K: int | None = None,
    quad_points: int = 64,
    y_grid=None,
) -> CorrelationReport:
    """Per-y chi-square table, its expectation, and pairwise bounds for a direction set."""
    family = family or ComplementFamily.for_params(params)
    K = default_truncation(params.m) if K is None else K
    per_y: list = []
    exp_val = expected_chi2(params, family, K, quad_points, per_y)
    if y_grid is not None:
        per_y = []
        for yi in y_grid:
            per_y.append((float(yi), chi2_of_conditional(build_conditional(float(yi), params, family), K)))
    tail = 0.0
    violations = []
    for yi, c in per_y:
        tail = max(tail, chi2_tail_bound(build_conditional(yi, params, family), K))
        if c > chi2_bound_value(yi, params):
            violations.append((yi, c))
    pairs = []
    if directions is not None:
        V = np.asarray(getattr(directions, "vectors", directions))
        for a in range(len(V)):
            for b in range(a + 1, len(V)):
                pairs.append(((a, b), abs(float(V[a] @ V[b])), pair_correlation_bound(V[a], V[b], params, exp_val)))
    return CorrelationReport(per_y, exp_val, pairs, K, chi2_budget(params), tail, violations)


# --------------------------------------------------------------------------
# Sample audits
# --------------------------------------------------------------------------


@dataclass
class AuditReport:
    """Rows of ``(i, j, mean, stderr, z)`` for ``h_i(v.x) (sqrt(alpha) y)^j``."""

    rows: list
    threshold: float = Z_THRESHOLD

    @property
    def max_abs_z(self) -> float:
        return max((abs(r[4]) for r in self.rows), default=0.0)

    def flagged(self) -> list:
        return [r for r in self.rows if abs(r[4]) > self.threshold]

    def passed(self) -> bool:
        return not self.flagged()

    def z(self, i: int, j: int) -> float:
        for r in self.rows:
            if r[0] == i and r[1] == j:
                return r[4]
        raise KeyError((i, j))


def sample_moment_audit(dataset: LabeledDataset, v, order: int, alpha: float | None = None,
                        orders=None) -> AuditReport:
    """Empirical means of ``h_i(v.x) (sqrt(alpha) y)^j``, i = 1..order, j = 0..2.

    Each mean is standardized by its empirical standard error; under the null
    and, for ``i <= 2m``, under the planted law, all means are zero.
    """
    if dataset.n < 2:
        raise ValueError("audit needs at least two rows")
    alpha = dataset.manifest.get("alpha") if alpha is None else alpha
    if alpha is None:
        raise ValueError("alpha is required (not in the dataset manifest)")
    v = np.asarray(v, dtype=float)
    s = dataset.x @ (v / np.linalg.norm(v))
    H = hermite_table(order, s)
    ys = math.sqrt(alpha) * dataset.y
    rows = []
    for i in (range(1, order + 1) if orders is None else orders):
        for j in range(3):
            f = H[i] * ys**j
            mean = float(f.mean())
            se = float(f.std(ddof=1)) / math.sqrt(f.size)
            z = mean / se if se > 0 else (0.0 if mean == 0 else math.inf)
            rows.append((i, j, mean, se, z))
    return AuditReport(rows)
