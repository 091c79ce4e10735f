"""Hypothesis testing between the null and planted laws, via list decoding.

A decoder is any callable ``decoder(dataset, seed) -> list of vectors``. The
reduction splits the data in halves, rotates the second half by a random
orthogonal ``A``, decodes both, and declares the planted hypothesis when the
two lists contain a pair of norm in ``[3 rho/4, 5 rho/4]`` that agree to
within ``rho/2`` after undoing the rotation.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .decoder import DecoderParams, list_decode
from .errors import DecoderFailure, SQForgeError
from .instance import (
    ComplementFamily,
    InstanceParams,
    LabeledDataset,
    make_direction_set,
    sample_null,
    sample_planted,
)
from .rng import derive_seed, substream
from .verify import Z_THRESHOLD, sample_moment_audit

log = logging.getLogger(__name__)

H0, H1 = "H0", "H1"

Decoder = Callable[[LabeledDataset, int], Sequence[np.ndarray]]


# --------------------------------------------------------------------------
# Decoders
# --------------------------------------------------------------------------


def random_vectors(count: int, d: int, norm: float, seed: int) -> list[np.ndarray]:
    rng = substream(seed, "random-vectors", d)
    g = rng.standard_normal((count, d))
    g *= norm / np.linalg.norm(g, axis=1, keepdims=True)
    return list(g)


@dataclass(frozen=True)
class OracleDecoder:
    """Returns the planted regressor when the dataset carries it, plus ``decoys`` random vectors.

    Without a planted regressor it returns ``list_size`` random vectors of
    norm ``rho``.
    """

    rho: float
    list_size: int = 5
    decoys: int = 0

    def __call__(self, dataset: LabeledDataset, seed: int) -> list[np.ndarray]:
        if dataset.beta is None:
            return random_vectors(self.list_size, dataset.d, self.rho, seed)
        return [np.asarray(dataset.beta, dtype=float)] + random_vectors(self.decoys, dataset.d, self.rho, seed)


@dataclass(frozen=True)
class RandomDecoder:
    """Ignores the data and returns ``list_size`` random vectors of norm ``rho``."""

    rho: float
    list_size: int = 5

    def __call__(self, dataset: LabeledDataset, seed: int) -> list[np.ndarray]:
        return random_vectors(self.list_size, dataset.d, self.rho, seed)


def empty_decoder(dataset: LabeledDataset, seed: int) -> list[np.ndarray]:
    return []


@dataclass(frozen=True)
class GridDecoder:
    params: DecoderParams

    def __call__(self, dataset: LabeledDataset, seed: int) -> list[np.ndarray]:
        return list_decode(dataset, self.params)


def make_decoder(name: str, params: InstanceParams, **kw) -> Decoder:
    if name == "oracle":
        return OracleDecoder(params.rho, **kw)
    if name == "grid":
        return GridDecoder(DecoderParams(alpha=params.alpha, sigma=params.sigma, **kw))
    if name == "empty":
        return empty_decoder
    if name == "random":
        return RandomDecoder(params.rho, **kw)
    raise ValueError(f"unknown decoder {name!r}")


# --------------------------------------------------------------------------
# Reduction
# --------------------------------------------------------------------------


def random_rotation(d: int, seed: int) -> np.ndarray:
    """Haar-random orthogonal matrix: QR of a Gaussian matrix with ``diag(R) > 0``."""
    g = substream(seed, "rotation", d).standard_normal((d, d))
    q, r = np.linalg.qr(g)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def lists_match(L1, L2, A: np.ndarray, rho: float) -> tuple[int, int] | None:
    """First pair ``(i, j)`` meeting the norm window and distance test, or ``None``."""
    lo, hi = 0.75 * rho, 1.25 * rho
    for i, a in enumerate(L1):
        na = float(np.linalg.norm(a))
        if not lo <= na <= hi:
            continue
        for j, b in enumerate(L2):
            nb = float(np.linalg.norm(b))
            if lo <= nb <= hi and float(np.linalg.norm(a - A.T @ b)) <= rho / 2:
                return i, j
    return None


@dataclass
class Verdict:
    verdict: str
    list_sizes: tuple[int, int]
    match: tuple[int, int] | None

    def __str__(self) -> str:
        return self.verdict


def reduce_to_testing(dataset: LabeledDataset, decoder: Decoder, rho: float, seed: int) -> Verdict:
    """Run the two-arm reduction and return the verdict with list sizes."""
    if dataset.n % 2:
        raise ValueError("dataset row count must be even")
    first, second = dataset.halves()
    A = random_rotation(dataset.d, derive_seed(seed, "reduction-rotation"))
    lists = []
    for arm, part in enumerate((first, second.rotated(A))):
        try:
            lists.append([np.asarray(b, dtype=float) for b in decoder(part, derive_seed(seed, "decoder-arm", arm))])
        except Exception as exc:
            raise DecoderFailure(f"decoder failed on arm {arm + 1}: {exc}", arm + 1) from exc
    hit = lists_match(lists[0], lists[1], A, rho)
    return Verdict(H1 if hit else H0, (len(lists[0]), len(lists[1])), hit)


def regression_to_testing(dataset: LabeledDataset, decoder: Decoder, rho: float, seed: int) -> str:
    """``"H1"`` if the decoded lists agree across a random rotation, else ``"H0"``."""
    return reduce_to_testing(dataset, decoder, rho, seed).verdict


# --------------------------------------------------------------------------
# Trials
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialConfig:
    """``n`` is the per-arm sample count; each trial draws ``2n`` rows."""

    params: InstanceParams
    n: int
    trials: int
    seed: int
    decoder: str = "oracle"

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass
class TrialRecord:
    index: int
    truth: str
    verdict: str | None
    list_sizes: tuple[int, int] | None = None
    error: str | None = None

    @property
    def correct(self) -> bool:
        return self.verdict == self.truth


@dataclass
class TrialReport:
    config: TrialConfig
    records: list = field(default_factory=list)

    @property
    def confusion(self) -> dict:
        out = {f"{t}->{v}": 0 for t in (H0, H1) for v in (H0, H1, "failed")}
        for r in self.records:
            out[f"{r.truth}->{r.verdict or 'failed'}"] += 1
        return out

    @property
    def failed(self) -> int:
        return sum(r.verdict is None for r in self.records)

    @property
    def accuracy(self) -> float:
        return sum(r.correct for r in self.records) / len(self.records)

    @property
    def rows_per_trial(self) -> int:
        return 2 * self.config.n

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "truth", "verdict", "correct", "list1", "list2", "error"])
        for r in self.records:
            l1, l2 = r.list_sizes or ("", "")
            w.writerow([r.index, r.truth, r.verdict or "", int(r.correct), l1, l2, r.error or ""])
        return buf.getvalue()

    def summary(self) -> str:
        c = self.confusion
        lines = [
            f"trials {len(self.records)}  rows/trial {self.rows_per_trial}  decoder {self.config.decoder}",
            f"accuracy {self.accuracy:.4f}  failed {self.failed}",
            "confusion " + " ".join(f"{k}={v}" for k, v in c.items()),
        ]
        return "\n".join(lines) + "\n"


def trial_dataset(config: TrialConfig, index: int, family: ComplementFamily | None = None):
    """Ground truth and ``2n`` rows for trial ``index`` (even indices null, odd planted)."""
    p = config.params
    data_seed = derive_seed(config.seed, "trial-data", index)
    if index % 2 == 0:
        return H0, sample_null(p, 2 * config.n, data_seed)
    dirs = make_direction_set(p.d, p.c, 1, derive_seed(config.seed, "trial-direction", index))
    return H1, sample_planted(p, dirs[0], 2 * config.n, data_seed, family=family)


def run_trials(config: TrialConfig, decoder: Decoder | None = None) -> TrialReport:
    """Alternate null and planted trials and tally verdicts; failures are recorded."""
    decoder = decoder or make_decoder(config.decoder, config.params)
    family = ComplementFamily.for_params(config.params)
    report = TrialReport(config)
    for i in range(config.trials):
        truth = H0 if i % 2 == 0 else H1
        try:
            truth, data = trial_dataset(config, i, family)
            v = reduce_to_testing(data, decoder, config.params.rho, derive_seed(config.seed, "trial-reduction", i))
            report.records.append(TrialRecord(i, truth, v.verdict, v.list_sizes))
        except (SQForgeError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("trial %d failed: %s", i, exc)
            report.records.append(TrialRecord(i, truth, None, None, f"{type(exc).__name__}: {exc}"))
    return report


# --------------------------------------------------------------------------
# Low-degree probe
# --------------------------------------------------------------------------


def low_degree_probe(dataset: LabeledDataset, degree: int, directions: int, seed: int,
                     alpha: float | None = None) -> float:
    """Largest ``|z|`` of the moment audit over random unit directions and orders up to ``degree``."""
    if degree < 1:
        raise ValueError("degree must be >= 1")
    if directions < 1:
        raise ValueError("directions must be >= 1")
    rng = substream(seed, "probe-directions", dataset.d)
    worst = 0.0
    for _ in range(directions):
        g = rng.standard_normal(dataset.d)
        rep = sample_moment_audit(dataset, g / np.linalg.norm(g), degree, alpha=alpha)
        worst = max(worst, rep.max_abs_z)
    return worst


def probe_passes(z: float) -> bool:
    return math.isfinite(z) and z <= Z_THRESHOLD
