"""Grid-based list decoder for linear regression with a majority of outliers.

A candidate regressor ``beta`` is accepted when a subset ``T'`` of
``ceil(alpha n / 2)`` rows fits it to within ``sigma t`` (up to an ``alpha/20``
fraction) and no shifted hypothesis ``beta + gamma' v`` with ``gamma' >= gamma``
fits a comparable share of ``T'``. Accepted candidates are reduced to a
``gamma``-separated list by greedy packing.

The search is exhaustive over a direction net times magnitude grid and is only
meant for small dimension.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetTooSmall, GridTooCoarse
from .instance import LabeledDataset
from .rng import substream

MAX_DIM = 4
MAX_CANDIDATES = 200_000
GAMMA_LADDER = (1, 2, 4, 8)


def default_t(alpha: float) -> int:
    return math.ceil(math.sqrt(2.0 * math.log(40.0 / alpha)))


@dataclass(frozen=True)
class DecoderParams:
    """Decoder constants. ``t`` and ``gamma`` default to ``ceil(sqrt(2 ln(40/alpha)))`` and ``40 sigma t / alpha``.

    ``candidate_grid`` is the number of subdivisions per cube edge of the
    direction net; ``None`` picks the coarsest net whose spacing is below
    ``gamma / 4`` (at least ``min_grid``).
    """

    alpha: float
    sigma: float
    t: float | None = None
    gamma: float | None = None
    candidate_grid: int | None = None
    magnitudes: int = 11
    max_norm: float = 1.0
    refine_steps: int = 10
    min_grid: int = 8
    max_dim: int = MAX_DIM
    repair: bool = True

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.t is None:
            object.__setattr__(self, "t", float(default_t(self.alpha)))
        if self.gamma is None:
            object.__setattr__(self, "gamma", 40.0 * self.sigma * self.t / self.alpha)
        if self.gamma <= 0 or self.t <= 0:
            raise ValueError("gamma and t must be positive")
        if self.magnitudes < 2:
            raise ValueError("need at least two magnitudes")

    @property
    def subset_fraction(self) -> float:
        return self.alpha / 2

    def subset_size(self, n: int) -> int:
        return math.ceil(self.alpha * n / 2)

    def allowed(self, k: int) -> int:
        """Largest count that is still at most an ``alpha/20`` fraction of ``k`` rows."""
        return math.floor(self.alpha / 20 * k + 1e-9)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "sigma": self.sigma, "t": self.t, "gamma": self.gamma,
            "candidate_grid": self.candidate_grid, "magnitudes": self.magnitudes,
            "max_norm": self.max_norm, "refine_steps": self.refine_steps,
        }


# --------------------------------------------------------------------------
# Nets
# --------------------------------------------------------------------------


def sphere_net(d: int, r: int) -> np.ndarray:
    """Unit directions through the lattice points on the surface of ``[-1, 1]^d`` with step ``2/r``."""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    ticks = np.linspace(-1.0, 1.0, r + 1)
    pts = []
    for face in range(d):
        for sign in (-1.0, 1.0):
            for rest in itertools.product(ticks, repeat=d - 1):
                p = np.insert(np.array(rest), face, sign)
                pts.append(p)
    P = np.unique(np.round(np.array(pts), 12), axis=0)
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def net_spacing(d: int, r: int, magnitudes: int, max_norm: float) -> float:
    """Covering radius bound of the direction-by-magnitude grid over the ball of radius ``max_norm``."""
    ang = 0.0 if d == 1 else math.sqrt(d - 1) / r
    return max_norm * ang + max_norm / (2 * (magnitudes - 1))


def _net_size(d: int, r: int) -> int:
    return 2 if d == 1 else (r + 1) ** d - (r - 1) ** d


def choose_grid(d: int, p: DecoderParams) -> int:
    if d > p.max_dim:
        raise GridTooCoarse(f"d={d} exceeds the enumeration limit {p.max_dim}")
    if p.candidate_grid is not None:
        r = p.candidate_grid
    else:
        r = p.min_grid
        while net_spacing(d, r, p.magnitudes, p.max_norm) > p.gamma / 4 and _net_size(d, r) * p.magnitudes <= MAX_CANDIDATES:
            r *= 2
    spacing = net_spacing(d, r, p.magnitudes, p.max_norm)
    if spacing > p.gamma / 4:
        raise GridTooCoarse(f"net spacing {spacing:.4g} exceeds gamma/4 = {p.gamma / 4:.4g}")
    if _net_size(d, r) * p.magnitudes > MAX_CANDIDATES:
        raise GridTooCoarse(f"grid with {_net_size(d, r) * p.magnitudes} candidates exceeds {MAX_CANDIDATES}")
    return r


def candidate_grid(d: int, p: DecoderParams) -> np.ndarray:
    r = choose_grid(d, p)
    dirs = sphere_net(d, r)
    mags = np.linspace(0.0, p.max_norm, p.magnitudes)[1:]
    grid = (mags[:, None, None] * dirs[None]).reshape(-1, d)
    return np.vstack([np.zeros((1, d)), grid])


# --------------------------------------------------------------------------
# Membership
# --------------------------------------------------------------------------


@dataclass
class MembershipDetails:
    subset_size: int
    allowed: int
    cond1_count: int
    cond2_worst: int
    cond2_witness: tuple | None
    mean_residual: float
    repaired: bool = False
    rows: np.ndarray = field(default=None, repr=False)

    @property
    def cond1(self) -> bool:
        return self.cond1_count <= self.allowed

    @property
    def cond2(self) -> bool:
        return self.cond2_worst <= self.allowed

    @property
    def score(self) -> tuple:
        return (self.cond1_count / self.subset_size, self.mean_residual)


def _check(n: int, p: DecoderParams):
    if n < max(1, 2.0 / p.alpha):
        raise DatasetTooSmall(f"need at least {math.ceil(2 / p.alpha)} rows, got {n}")


def _probe_directions(xT: np.ndarray, p: DecoderParams) -> np.ndarray:
    d = xT.shape[1]
    r = choose_grid(d, p) if d <= p.max_dim else p.min_grid
    k = min(d, 3)
    net = sphere_net(k, r)
    if k == d:
        return net
    _, _, Vt = np.linalg.svd(xT - xT.mean(axis=0), full_matrices=False)
    return net @ Vt[:k]


def _cond2_hits(res: np.ndarray, xT: np.ndarray, dirs: np.ndarray, p: DecoderParams) -> np.ndarray:
    """Band indicators ``|r - gamma' v.x| <= sigma t`` with shape (ladder, rows, directions)."""
    proj = xT @ dirs.T
    thr = p.sigma * p.t
    hits = np.stack([np.abs(res[:, None] - g * p.gamma * proj) <= thr for g in GAMMA_LADDER])
    return hits


def membership_score(beta, dataset: LabeledDataset, p: DecoderParams):
    """Test ``beta`` against both fit conditions on the smallest-residual subset.

    Returns ``(passed, MembershipDetails)``.
    """
    _check(dataset.n, p)
    beta = np.asarray(beta, dtype=float)
    res_all = dataset.y - dataset.x @ beta
    absr = np.abs(res_all)
    k = p.subset_size(dataset.n)
    order = np.argsort(absr, kind="stable")
    rows = order[:k]
    allowed = p.allowed(k)
    thr = p.sigma * p.t
    cond1 = int(np.count_nonzero(absr[rows] > thr))
    dirs = _probe_directions(dataset.x[rows], p)
    hits = _cond2_hits(res_all[rows], dataset.x[rows], dirs, p)
    counts = hits.sum(axis=1)
    repaired = False
    if p.repair and counts.max() > allowed and cond1 <= allowed:
        # T' is existential: swap rows that land in a shifted band for other
        # well-fitting rows that hit no band
        spare = order[k:][absr[order[k:]] <= thr]
        if spare.size:
            spare_hits = _cond2_hits(res_all[spare], dataset.x[spare], dirs, p).any(axis=(0, 2))
            clean = spare[~spare_hits]
            row_hits = hits.any(axis=(0, 2))
            bad = np.flatnonzero(row_hits)
            swap = min(bad.size, clean.size)
            if swap:
                rows = rows.copy()
                rows[bad[:swap]] = clean[:swap]
                cond1 = int(np.count_nonzero(absr[rows] > thr))
                hits = _cond2_hits(res_all[rows], dataset.x[rows], dirs, p)
                counts = hits.sum(axis=1)
                repaired = True
    worst = int(counts.max())
    gi, vi = np.unravel_index(int(counts.argmax()), counts.shape)
    det = MembershipDetails(
        subset_size=k,
        allowed=allowed,
        cond1_count=cond1,
        cond2_worst=worst,
        cond2_witness=(GAMMA_LADDER[gi] * p.gamma, tuple(dirs[vi])),
        mean_residual=float(absr[rows].mean()),
        repaired=repaired,
        rows=rows,
    )
    return det.cond1 and det.cond2, det


# --------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------


def refine(candidates: np.ndarray, dataset: LabeledDataset, k: int, steps: int) -> np.ndarray:
    """Trimmed least-squares steps: refit each candidate on its ``k`` best-fitting rows."""
    X, y = dataset.x, dataset.y
    B = np.array(candidates, dtype=float)
    d = X.shape[1]
    ridge = 1e-10 * np.eye(d)
    for _ in range(steps):
        R = np.abs(y[:, None] - X @ B.T)
        idx = np.argpartition(R, k - 1, axis=0)[:k].T
        Xs = X[idx]
        ys = y[idx]
        G = np.einsum("cki,ckj->cij", Xs, Xs) + ridge
        h = np.einsum("cki,ck->ci", Xs, ys)
        newB = np.linalg.solve(G, h[..., None])[..., 0]
        if np.allclose(newB, B, rtol=0, atol=1e-12):
            B = newB
            break
        B = newB
    return B


def _dedupe(B: np.ndarray, tol: float) -> np.ndarray:
    keys = np.round(B / tol).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return B[np.sort(first)]


def greedy_packing(points: np.ndarray, scores: list, gamma: float) -> list[int]:
    """Indices of a ``gamma``-separated subset, scanning in order of increasing score."""
    order = sorted(range(len(points)), key=lambda i: (scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(np.linalg.norm(points[i] - points[j]) > gamma for j in kept):
            kept.append(i)
    return kept


@dataclass
class DecodeResult:
    betas: list
    params: DecoderParams
    candidates: int
    accepted: int
    grid: int
    details: list = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.betas)

    def min_distance(self, beta) -> float:
        if not self.betas:
            return math.inf
        return min(float(np.linalg.norm(b - beta)) for b in self.betas)


def decode(dataset: LabeledDataset, p: DecoderParams) -> DecodeResult:
    """List decoding with diagnostics; see ``list_decode``."""
    _check(dataset.n, p)
    d = dataset.d
    r = choose_grid(d, p)
    grid = candidate_grid(d, p)
    k = p.subset_size(dataset.n)
    refined = refine(grid, dataset, k, p.refine_steps)
    refined = _dedupe(refined, max(p.sigma * 1e-3, 1e-9))
    accepted, scores, details = [], [], []
    for b in refined:
        ok, det = membership_score(b, dataset, p)
        if ok:
            accepted.append(b)
            scores.append(det.score)
            details.append(det)
    pts = np.array(accepted).reshape(-1, d)
    kept = greedy_packing(pts, scores, p.gamma)
    return DecodeResult([pts[i] for i in kept], p, len(refined), len(accepted), r, [details[i] for i in kept])


def list_decode(dataset: LabeledDataset, p: DecoderParams) -> list[np.ndarray]:
    """Return a ``gamma``-separated list of accepted regressors."""
    return decode(dataset, p).betas


# --------------------------------------------------------------------------
# Synthetic regression data
# --------------------------------------------------------------------------


def sample_regression_mixture(
    betas,
    fractions,
    sigma: float,
    n: int,
    seed: int,
    outlier_y: float | None = None,
) -> LabeledDataset:
    """Rows ``x ~ N(0, I)``, ``y = x.beta_c + sigma eta`` with cluster ``c`` drawn by ``fractions``.

    Mass not covered by ``fractions`` goes to outliers with ``y = outlier_y``
    (or standard normal labels if ``None``). Provenance marks cluster 0 and
    ``beta`` is set to ``betas[0]``.
    """
    B = np.atleast_2d(np.asarray(betas, dtype=float))
    f = np.asarray(fractions, dtype=float)
    if f.size != B.shape[0] or np.any(f < 0) or f.sum() > 1 + 1e-12:
        raise ValueError("fractions must be nonnegative, one per regressor, summing to at most 1")
    d = B.shape[1]
    rng = substream(seed, "regression-mixture")
    x = rng.standard_normal((n, d))
    eta = rng.standard_normal(n)
    u = rng.random(n)
    c = np.searchsorted(np.cumsum(f), u, side="right")
    y = np.empty(n)
    clean = c < B.shape[0]
    y[clean] = np.einsum("ij,ij->i", x[clean], B[c[clean]]) + sigma * eta[clean]
    if outlier_y is None:
        y[~clean] = rng.standard_normal(int((~clean).sum()))
    else:
        y[~clean] = outlier_y
    manifest = {"d": d, "sigma": sigma, "seed": int(seed), "synthetic": "regression-mixture"}
    return LabeledDataset(x, y, c == 0, manifest, beta=B[0].copy())
