"""Hard-instance assembly and sampling.

A planted instance hides a unit direction ``v`` in ``R^d``. Labels are drawn
from ``N(0, 1/alpha)``; given ``y`` a row is an inlier with probability
``alpha_y`` (then ``x`` follows the Gaussian regression model with
``beta = rho v``) and otherwise its ``v``-coordinate is ``rho T + sigma Z``
with ``T ~ F_y``. Orthogonal to ``v`` everything is standard Gaussian.
"""

from __future__ import annotations

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from scipy.optimize import nnls

from .errors import Infeasible, NumericalRankFailure, PackingExhausted
from .hermite import HermiteSeries, hermite_table, ou_pushforward, weighted_hermite_table
from .moments import (
    DEFAULT_GRID,
    MIXTURE_TOL,
    DiscreteDistribution,
    SpikeMixture,
    _row_scale,
    caratheodory_reduce,
    default_bound,
    default_order,
    inlier_weight,
    solve_complement,
    target_complement_hermite,
)
from .rng import BLOCK_ROWS, pmap, substream

log = logging.getLogger(__name__)

UNIT_TOL = 1e-12


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InstanceParams:
    """Full configuration of a hard instance.

    ``sigma`` is derived as ``sqrt(1 - rho^2)`` when omitted; ``m`` and ``B``
    default to ``floor(0.3/sqrt(alpha))`` (at least 1) and ``4 sqrt(m)``.
    """

    alpha: float
    rho: float
    d: int
    c: float = 0.3
    m: int | None = None
    B: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 1/2), got {self.alpha}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if not 0.0 < self.c < 0.5:
            raise ValueError("c must lie in (0, 1/2)")
        m = default_order(self.alpha) if self.m is None else int(self.m)
        if m < 1:
            raise ValueError("m must be >= 1")
        B = default_bound(m) if self.B is None else float(self.B)
        sigma = math.sqrt(1.0 - self.rho**2) if self.sigma is None else float(self.sigma)
        if abs(sigma**2 + self.rho**2 - 1.0) > 1e-12:
            raise ValueError("sigma^2 + rho^2 must equal 1")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "d", int(self.d))

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "rho": self.rho,
            "sigma": self.sigma,
            "m": self.m,
            "B": self.B,
            "d": self.d,
            "c": self.c,
        }


# --------------------------------------------------------------------------
# Directions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DirectionSet:
    vectors: np.ndarray
    dot_bound: float

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        if np.any(np.abs(np.linalg.norm(V, axis=1) - 1.0) > UNIT_TOL):
            raise ValueError("direction vectors must be unit norm")
        V.setflags(write=False)
        object.__setattr__(self, "vectors", V)
        if self.max_abs_dot() > self.dot_bound:
            raise ValueError(f"pairwise |dot| {self.max_abs_dot():.4f} exceeds bound {self.dot_bound:.4f}")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, i) -> np.ndarray:
        return self.vectors[i]

    def max_abs_dot(self) -> float:
        if len(self) < 2:
            return 0.0
        G = np.abs(self.vectors @ self.vectors.T)
        np.fill_diagonal(G, 0.0)
        return float(G.max())


def direction_dot_bound(d: int, c: float) -> float:
    """``3 d^(c - 1/2)``, capped at ``1 - 1/d`` so the bound never goes vacuous."""
    return min(3.0 * d ** (c - 0.5), 1.0 - 1.0 / d)


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    return v / np.linalg.norm(v)


def make_direction_set(d: int, c: float, count: int, seed: int, max_tries: int = 10_000) -> DirectionSet:
    """Greedy rejection sampling of near-orthogonal unit vectors.

    Candidates are normalized Gaussian draws taken sequentially from one
    stream, so the first ``k`` vectors do not depend on ``count``.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    if not 0.0 < c < 0.5:
        raise ValueError("c must lie in (0, 1/2)")
    if count < 1:
        raise ValueError("count must be >= 1")
    tau = direction_dot_bound(d, c)
    rng = substream(seed, "directions", d)
    V = np.empty((count, d))
    k = rejections = 0
    while k < count:
        g = unit(rng.standard_normal(d))
        if k == 0 or np.max(np.abs(V[:k] @ g)) <= tau:
            V[k] = g
            k += 1
            continue
        rejections += 1
        if rejections >= max_tries:
            raise PackingExhausted(
                f"placed {k} of {count} directions in d={d} with |dot| <= {tau:.4f} "
                f"before {max_tries} rejections"
            )
    return DirectionSet(V, tau)


def planted_direction(d: int, c: float, seed: int, direction_id: int) -> np.ndarray:
    """Direction ``direction_id`` of the seeded direction set."""
    return make_direction_set(d, c, direction_id + 1, seed).vectors[direction_id].copy()


def householder_frame_apply(v: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Map frame coordinates (column 0 along ``v``) to ambient coordinates.

    Uses the reflection that swaps ``e_1`` and ``v``; its columns are an
    orthonormal basis whose first element is ``v``.
    """
    u = v.copy()
    u[0] -= 1.0
    uu = float(u @ u)
    if uu < 1e-30:
        return S.copy()
    return S - np.outer(S @ u, u) * (2.0 / uu)


# --------------------------------------------------------------------------
# Complement family cache
# --------------------------------------------------------------------------


class ComplementFamily:
    """Solved ``F_y`` on a fixed label grid, plus exact per-label refits.

    Nodes are spaced ``0.05/sqrt(alpha)`` over ``[-8/sqrt(alpha), 8/sqrt(alpha)]``
    and solved lazily. For an arbitrary label the weights are re-solved
    exactly on the support of a nearby node (neighbouring nodes are tried
    next, then a full LP), so every label gets its own moment-exact ``F_y``.
    """

    def __init__(self, alpha: float, m: int, B: float, grid_points: int = DEFAULT_GRID,
                 stride: float | None = None, half_width: float | None = None):
        self.alpha, self.m, self.B = float(alpha), int(m), float(B)
        self.grid_points = grid_points
        self.stride = 0.05 / math.sqrt(alpha) if stride is None else float(stride)
        hw = 8.0 / math.sqrt(alpha) if half_width is None else float(half_width)
        self.n_side = int(round(hw / self.stride))
        self._nodes: dict[int, DiscreteDistribution] = {}
        self._local = threading.local()
        self._lock = threading.Lock()
        self.exact_solves = 0

    @classmethod
    def for_params(cls, params: InstanceParams, **kw) -> "ComplementFamily":
        return cls(params.alpha, params.m, params.B, **kw)

    def node_y(self, i: int) -> float:
        return i * self.stride

    def node_index(self, y) -> np.ndarray:
        idx = np.rint(np.asarray(y, dtype=float) / self.stride).astype(np.int64)
        return np.clip(idx, -self.n_side, self.n_side)

    def _solve_node(self, i: int) -> DiscreteDistribution:
        return solve_complement(self.node_y(i), self.alpha, self.m, self.B, self.grid_points)

    @property
    def _frozen(self) -> bool:
        return getattr(self._local, "frozen", False)

    def populate(self, indices) -> None:
        if self._frozen:
            raise RuntimeError("family is frozen")
        todo = sorted({int(i) for i in np.ravel(indices)} - self._nodes.keys())
        solved = pmap(self._solve_node, todo)
        with self._lock:
            for i, dist in zip(todo, solved):
                self._nodes.setdefault(i, dist)

    def populate_for(self, ys) -> None:
        """Solve every node that a refit for these labels may consult."""
        ys = np.asarray(ys, dtype=float)
        lo = np.floor(ys / self.stride).astype(np.int64)
        idx = np.concatenate([self.node_index(ys), lo, lo + 1])
        self.populate(np.unique(np.clip(idx, -self.n_side, self.n_side)))

    @contextmanager
    def frozen(self):
        """Read-only phase for the calling thread: node solves are refused while sampling."""
        prev = self._frozen
        self._local.frozen = True
        try:
            yield self
        finally:
            self._local.frozen = prev

    def node(self, i: int) -> DiscreteDistribution:
        i = int(i)
        if i not in self._nodes:
            if self._frozen:
                raise KeyError(f"node {i} not populated and family is frozen")
            with self._lock:
                if i not in self._nodes:
                    self._nodes[i] = self._solve_node(i)
        return self._nodes[i]

    def __contains__(self, i) -> bool:
        return int(i) in self._nodes

    def _refit(self, ys: np.ndarray, dist: DiscreteDistribution):
        """Batched weight solve on ``dist``'s atoms; returns (weights, ok mask)."""
        r = 2 * self.m + 1
        ay, E = self._targets(ys)
        M = hermite_table(2 * self.m, dist.atoms)
        s = _row_scale(M, np.max(np.abs(E), axis=1))
        Ms, Es = M / s[:, None], E / s[:, None]
        if M.shape[1] == r:
            try:
                W = np.linalg.solve(Ms, Es)
            except np.linalg.LinAlgError:
                W, *_ = np.linalg.lstsq(Ms, Es, rcond=None)
        else:
            W, *_ = np.linalg.lstsq(Ms, Es, rcond=None)
        ok = np.all(W >= -1e-14, axis=0)
        W = np.clip(W, 0.0, None)
        tot = W.sum(axis=0)
        ok &= tot > 0
        W = W / np.where(tot > 0, tot, 1.0)
        resid = np.max(np.abs((M @ W - E)[1:]), axis=0) * (1.0 - ay)
        ok &= resid <= MIXTURE_TOL
        return W, ok

    def complements(self, ys) -> tuple[np.ndarray, np.ndarray]:
        """Padded ``(atoms, weights)`` arrays of shape ``(len(ys), 2m+1)``."""
        atoms, weights, _ = self._complements(ys)
        return atoms, weights

    def _node_or_none(self, i):
        i = int(np.clip(i, -self.n_side, self.n_side))
        if self._frozen and i not in self._nodes:
            return None
        return self.node(i)

    def _targets(self, ys: np.ndarray):
        ay = inlier_weight(ys, self.alpha)
        with np.errstate(divide="ignore"):
            log_ay = np.where(ay > 0, np.log(np.where(ay > 0, ay, 1.0)), -np.inf)
        E = -weighted_hermite_table(2 * self.m, ys, log_ay) / (1.0 - ay)
        E[0] = 1.0
        return ay, E

    def _bracket_fit(self, ys: np.ndarray, lo: int):
        """NNLS on the union of the supports of nodes ``lo`` and ``lo + 1``.

        Returns per-row ``(atoms, weights, bound)`` or ``None`` for rows that
        could not be matched this way.
        """
        dists = [d for d in (self._node_or_none(lo), self._node_or_none(lo + 1)) if d is not None]
        if not dists:
            return [None] * ys.size
        atoms = np.unique(np.concatenate([d.atoms for d in dists]))
        bound = max(d.support_bound for d in dists)
        ay, E = self._targets(ys)
        M = hermite_table(2 * self.m, atoms)
        sc = np.maximum(np.max(np.abs(M), axis=1), 1.0)
        Ms = M / sc[:, None]
        out = []
        for j in range(ys.size):
            w, _ = nnls(Ms, E[:, j] / sc)
            tot = w.sum()
            if tot <= 0:
                out.append(None)
                continue
            w = w / tot
            if np.max(np.abs((M @ w - E[:, j])[1:])) * (1.0 - ay[j]) > MIXTURE_TOL:
                out.append(None)
                continue
            keep = w > 0
            if keep.sum() > 2 * self.m + 1:
                try:
                    dist = caratheodory_reduce(DiscreteDistribution(atoms[keep], w[keep], bound), self.m)
                except NumericalRankFailure:
                    out.append(None)
                    continue
                out.append((dist.atoms, dist.weights, bound))
            else:
                out.append((atoms[keep], w[keep], bound))
        return out

    def _complements(self, ys):
        ys = np.asarray(ys, dtype=float).ravel()
        r = 2 * self.m + 1
        atoms = np.zeros((ys.size, r))
        weights = np.zeros((ys.size, r))
        bounds = np.full(ys.size, self.B)
        pending = np.ones(ys.size, dtype=bool)
        idx = self.node_index(ys)
        inside = np.abs(ys) <= (self.n_side + 0.5) * self.stride

        # Fast path: exact square solve on the nearest node's support.
        for i in np.unique(idx[inside]):
            dist = self._node_or_none(i)
            if dist is None:
                continue
            rows = np.flatnonzero(inside & (idx == i))
            W, ok = self._refit(ys[rows], dist)
            good = rows[ok]
            k = dist.atoms.size
            atoms[good, :k] = dist.atoms
            weights[good, :k] = W[:, ok].T
            bounds[good] = dist.support_bound
            pending[good] = False

        # Second path: bracketing-node supports, grouped by bracket.
        lo = np.floor(ys / self.stride).astype(np.int64)
        for b in np.unique(lo[pending & inside]):
            rows = np.flatnonzero(pending & inside & (lo == b))
            for j, fit in zip(rows, self._bracket_fit(ys[rows], int(b))):
                if fit is None:
                    continue
                t, w, bd = fit
                atoms[j, : t.size] = t
                weights[j, : t.size] = w
                bounds[j] = bd
                pending[j] = False

        for j in np.flatnonzero(pending):
            dist = solve_complement(ys[j], self.alpha, self.m, self.B, self.grid_points)
            self.exact_solves += 1
            k = dist.atoms.size
            atoms[j, :k] = dist.atoms
            weights[j, :k] = dist.weights
            bounds[j] = dist.support_bound
        return atoms, weights, bounds

    def complement(self, y: float) -> DiscreteDistribution:
        """Moment-exact ``F_y`` for a single label."""
        a, w, b = self._complements([y])
        keep = w[0] > 0
        return DiscreteDistribution(a[0, keep], w[0, keep], b[0])


# --------------------------------------------------------------------------
# Conditional model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionalModel:
    """``A_y = U_rho(alpha_y delta_y + (1 - alpha_y) F_y)``.

    Explicitly a Gaussian mixture: the inlier part ``N(rho y, 1 - rho^2)``
    with weight ``alpha_y`` and ``Q_y`` with components ``N(rho t_j, 1 - rho^2)``.
    """

    rho: float
    mixture: SpikeMixture

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")

    @property
    def y(self) -> float:
        return self.mixture.y

    @property
    def variance(self) -> float:
        return 1.0 - self.rho**2

    def component_means(self) -> np.ndarray:
        return self.rho * np.concatenate([[self.mixture.y], self.mixture.complement.atoms])

    def component_weights(self) -> np.ndarray:
        ay = self.mixture.alpha_y
        return np.concatenate([[ay], (1.0 - ay) * self.mixture.complement.weights])

    def hermite_coefficients(self, kmax: int) -> HermiteSeries:
        return ou_pushforward(HermiteSeries(self.mixture.hermite_moments(kmax)), self.rho)

    def max_matched_coefficient(self) -> float:
        return float(np.max(np.abs(self.hermite_coefficients(2 * self.mixture.m).coeffs[1:])))


def conditional_density(model: ConditionalModel, z):
    """Density of ``A_y`` at ``z``."""
    z = np.asarray(z, dtype=float)
    s2 = model.variance
    mu = model.component_means()
    w = model.component_weights()
    diff = z[..., None] - mu
    out = np.exp(-0.5 * diff * diff / s2) @ w / math.sqrt(2.0 * math.pi * s2)
    return float(out) if out.ndim == 0 else out


def build_conditional(y: float, params: InstanceParams, family: ComplementFamily | None = None) -> ConditionalModel:
    family = family or ComplementFamily.for_params(params)
    dist = family.complement(y)
    mix = SpikeMixture(float(y), inlier_weight(y, params.alpha), dist, params.m, params.alpha)
    model = ConditionalModel(params.rho, mix)
    worst = model.max_matched_coefficient()
    if worst > MIXTURE_TOL:
        raise Infeasible(f"A_y coefficients up to order {2 * params.m} do not vanish at y={y:g}", worst, y)
    return model


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


@dataclass
class LabeledDataset:
    """Rows ``(x, y)`` with optional inlier flags and a manifest.

    ``beta`` holds the planted regressor in memory when known; it is not
    serialized (the manifest identifies the direction instead).
    """

    x: np.ndarray
    y: np.ndarray
    provenance: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)
    beta: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.x.shape[0] != self.y.size:
            if self.y.size == 0 and self.x.size == 0:
                self.x = self.x.reshape(0, self.manifest.get("d", 0) or 0)
            else:
                raise ValueError("x and y row counts differ")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")
        if self.provenance is not None:
            self.provenance = np.asarray(self.provenance, dtype=bool).ravel()
            if self.provenance.size == 0:
                self.provenance = None
            elif self.provenance.size != self.n:
                raise ValueError("provenance length must be 0 or n")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, rows) -> "LabeledDataset":
        prov = None if self.provenance is None else self.provenance[rows]
        return LabeledDataset(self.x[rows], self.y[rows], prov, dict(self.manifest), self.beta)

    def halves(self) -> tuple["LabeledDataset", "LabeledDataset"]:
        h = self.n // 2
        return self.subset(slice(0, h)), self.subset(slice(h, 2 * h))

    def rotated(self, A: np.ndarray) -> "LabeledDataset":
        """Covariates mapped ``x -> A x``; the planted regressor follows."""
        beta = None if self.beta is None else A @ self.beta
        return LabeledDataset(self.x @ A.T, self.y.copy(), self.provenance, dict(self.manifest), beta)


def _manifest(params: InstanceParams, seed: int, planted: bool, direction_id) -> dict:
    out = params.to_dict()
    out.update(seed=int(seed), planted=bool(planted), direction_id=direction_id)
    return out


def _blocks(n: int):
    for b in range(-(-n // BLOCK_ROWS)):
        lo = b * BLOCK_ROWS
        yield b, lo, min(n, lo + BLOCK_ROWS)


def sample_null(params: InstanceParams, n: int, seed: int) -> LabeledDataset:
    """``x ~ N(0, I_d)`` independent of ``y ~ N(0, 1/alpha)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    d, scale = params.d, 1.0 / math.sqrt(params.alpha)

    def block(args):
        b, lo, hi = args
        rng = substream(seed, "null-rows", b)
        y = rng.standard_normal(BLOCK_ROWS) * scale
        x = rng.standard_normal((BLOCK_ROWS, d))
        return x[: hi - lo], y[: hi - lo]

    parts = pmap(block, list(_blocks(n)))
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    return LabeledDataset(x, y, None, _manifest(params, seed, False, None))


def sample_planted(
    params: InstanceParams,
    v,
    n: int,
    seed: int,
    keep_provenance: bool = False,
    family: ComplementFamily | None = None,
    frame: np.ndarray | None = None,
    direction_id: int | None = None,
) -> LabeledDataset:
    """Draw ``n`` rows from the planted hard distribution along ``v``.

    ``frame`` optionally fixes the orthonormal basis (first column ``v``) used
    for the orthogonal coordinates; by default a Householder completion of
    ``v`` is used. Randomness comes from per-block substreams of ``seed``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    v = np.asarray(v, dtype=float)
    if v.shape != (params.d,) or abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise ValueError("v must be a unit vector of dimension d")
    if frame is not None:
        frame = np.asarray(frame, dtype=float)
        if frame.shape != (params.d, params.d) or not np.allclose(frame[:, 0], v, atol=1e-12):
            raise ValueError("frame must be d x d with first column v")
    d, rho, sigma = params.d, params.rho, params.sigma
    scale = 1.0 / math.sqrt(params.alpha)

    def block(args):
        b, lo, hi = args
        rng = substream(seed, "planted-rows", b)
        k = hi - lo
        y = rng.standard_normal(BLOCK_ROWS)[:k] * scale
        u = rng.random(BLOCK_ROWS)[:k]
        z = rng.standard_normal(BLOCK_ROWS)[:k]
        pick = rng.random(BLOCK_ROWS)[:k]
        g = rng.standard_normal((BLOCK_ROWS, d - 1))[:k]
        return y, u, z, pick, g

    parts = pmap(block, list(_blocks(n)))
    y, u, z, pick, g = (np.concatenate([p[i] for p in parts]) for i in range(5))

    inlier = u < inlier_weight(y, params.alpha)
    family = family or ComplementFamily.for_params(params)
    out_rows = np.flatnonzero(~inlier)
    family.populate_for(y[out_rows])
    with family.frozen():
        atoms, weights = family.complements(y[out_rows])
    cdf = np.cumsum(weights, axis=1)
    j = np.minimum((pick[out_rows, None] >= cdf).sum(axis=1), atoms.shape[1] - 1)
    T = atoms[np.arange(out_rows.size), j]

    along = np.empty(n)
    along[inlier] = rho * y[inlier] + sigma * z[inlier]
    along[out_rows] = rho * T + sigma * z[out_rows]
    S = np.column_stack([along, g])
    x = S @ frame.T if frame is not None else householder_frame_apply(v, S)
    prov = inlier if keep_provenance else None
    return LabeledDataset(x, y, prov, _manifest(params, seed, True, direction_id), beta=rho * v)
