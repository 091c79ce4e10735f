"""Acceptance gate: one check per criterion at the agreed tolerances.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from sqforge.cli import main, manifest_path
from sqforge.decoder import DecoderParams, decode, sample_regression_mixture
from sqforge.harness import TrialConfig, low_degree_probe, run_trials
from sqforge.hermite import hermite_tail_sups
from sqforge.instance import (
    ComplementFamily,
    ConditionalModel,
    InstanceParams,
    build_conditional,
    make_direction_set,
    planted_direction,
    sample_planted,
)
from sqforge.moments import (
    SpikeMixture,
    default_bound,
    default_order,
    dual_certificate_check,
    gauss_positivity_margin,
    inlier_weight,
    solve_complement,
    sup_ratio_value,
)
from sqforge.rng import derive_seed
from sqforge.verify import (
    CRAMER,
    chi2_converged,
    chi2_density_quadrature,
    chi2_of_conditional,
    expected_chi2,
    sample_moment_audit,
)

ALPHAS = (0.25, 0.1, 0.01)


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, f"{key}: {detail}"


def y_grid(alpha):
    return np.linspace(-4 / math.sqrt(alpha), 4 / math.sqrt(alpha), 41)


@pytest.fixture(scope="module")
def solved():
    """All A1 nodes: {alpha: [(y, mixture)]} plus the elapsed time."""
    start = time.perf_counter()
    out = {}
    for a in ALPHAS:
        m = default_order(a)
        B = default_bound(m)
        out[a] = [(float(y), SpikeMixture(float(y), inlier_weight(y, a), solve_complement(y, a, m, B), m, a))
                  for y in y_grid(a)]
    return out, time.perf_counter() - start


def test_a1_moment_matching(solved):
    nodes, elapsed = solved
    worst_res, worst_atoms, outside = 0.0, 0, 0
    for a, rows in nodes.items():
        m = default_order(a)
        B = default_bound(m)
        for y, mix in rows:
            worst_res = max(worst_res, mix.max_residual())
            worst_atoms = max(worst_atoms, len(mix.complement) - (2 * m + 1))
            outside += int(np.any(np.abs(mix.complement.atoms) > B * (1 + 1e-12)))
    ok = worst_res <= 1e-7 and worst_atoms <= 0 and outside == 0 and elapsed < 60
    record("A1", ok, f"123 nodes solved, max residual {worst_res:.2e}, atom excess {worst_atoms}, "
                     f"outside [-B,B] {outside}, {elapsed:.1f}s")


def test_a2_dual_certificates(solved):
    nodes, _ = solved
    worst = math.inf
    count = 0
    for a, rows in nodes.items():
        for i, (y, mix) in enumerate(rows):
            rep = dual_certificate_check(mix, trials=1000, seed=derive_seed(0, "a2", i), raise_on_violation=False)
            worst = min(worst, rep.min_slack)
            count += 1
    record("A2", worst >= -1e-9, f"{count} nodes x 2000 polynomials, min slack {worst:.3e}")


def test_a3_lemma_suite():
    sup = max(sup_ratio_value(float(y), a, default_order(a)) for a in ALPHAS for y in y_grid(a))
    margin = min(gauss_positivity_margin(m, 4 * math.sqrt(m), 1000, m) for m in range(1, 6))
    k = np.arange(1, 201)
    scaled = hermite_tail_sups(200) * k ** (1 / 6)
    ok = sup <= 0.5 + 1e-9 and margin >= -1e-9 and scaled.max() <= CRAMER**2
    record("A3", ok, f"sup ratio max {sup:.4f}; gauss positivity min {margin:.4f}; "
                     f"tail sup * k^(1/6) in [{scaled.min():.4f}, {scaled.max():.4f}] <= {CRAMER**2:.4f}")


def test_a4_chi2_oracle_agreement():
    g = np.random.default_rng(2024)
    worst = 0.0
    families = {}
    for _ in range(50):
        a = float(g.choice(ALPHAS))
        rho = float(g.uniform(0.05, 0.8))
        y = float(g.normal()) / math.sqrt(a)
        p = InstanceParams(alpha=a, rho=rho, d=4)
        fam = families.setdefault(a, ComplementFamily.for_params(p))
        model = build_conditional(y, p, fam)
        series, _ = chi2_converged(model, rel=1e-10)
        quad = chi2_density_quadrature(model)
        worst = max(worst, abs(series - quad) / quad)
    model = build_conditional(0.3, InstanceParams(alpha=0.25, rho=0.5, d=4))
    zero = chi2_of_conditional(ConditionalModel(0.0, model.mixture), 120)
    record("A4", worst <= 1e-6 and abs(zero) <= 1e-12,
           f"50 configurations, max relative gap {worst:.2e}; rho=0 gives {zero:.1e}")


@pytest.fixture(scope="module")
def a5_data():
    p = InstanceParams(alpha=0.1, rho=0.5, d=8, m=2)
    v = planted_direction(8, p.c, 11, 0)
    start = time.perf_counter()
    ds = sample_planted(p, v, 200_000, 11, keep_provenance=True)
    return p, v, ds, time.perf_counter() - start


def test_a5_sampler_audit(a5_data):
    p, v, ds, elapsed = a5_data
    rate = ds.provenance.mean()
    audit = sample_moment_audit(ds, v, 2 * p.m)
    s = math.sqrt(p.alpha) * ds.y
    marg = []
    for k, want in zip(range(1, 5), (0, 1, 0, 3)):
        f = s**k
        marg.append((f.mean() - want) / (f.std(ddof=1) / math.sqrt(ds.n)))
    ok = abs(rate - 0.1) <= 0.005 and audit.passed() and max(map(abs, marg)) <= 5 and elapsed < 30
    record("A5", ok, f"inlier rate {rate:.4f}; max |z| orders<=4 {audit.max_abs_z:.2f}; "
                     f"y-marginal max |z| {max(map(abs, marg)):.2f}; sampled in {elapsed:.1f}s")


def test_a6_detectability(a5_data):
    p, v, ds, _ = a5_data
    order = 2 * p.m + 2
    audit = sample_moment_audit(ds, v, order, orders=[order])
    z_top = max(abs(r[4]) for r in audit.rows)
    probe = low_degree_probe(ds, 2 * p.m, 20, 3)
    e_chi2 = expected_chi2(p, ComplementFamily.for_params(p), quad_points=32)
    ok = z_top > 5 and probe <= 5 and e_chi2 > 0
    record("A6", ok, f"order-{order} |z| along v {z_top:.2f}; random probes order<=4 max |z| {probe:.2f}; "
                     f"expected chi2 {e_chi2:.3e}")


def test_a7_direction_packing():
    d = 1000
    s = make_direction_set(d, 0.3, 50, 7)
    G = np.abs(s.vectors @ s.vectors.T)[np.triu_indices(50, 1)]
    ref = 5 / math.sqrt(d)
    ok = G.max() <= 3 * d ** (-0.2) and 0.5 * ref <= G.max() <= 1.5 * ref
    record("A7", ok, f"max |dot| {G.max():.4f} (bound {3 * d ** -0.2:.4f}, 5/sqrt(d) = {ref:.4f})")


def test_a8_decoder():
    p = DecoderParams(alpha=0.3, sigma=0.05)
    start = time.perf_counter()
    hits = 0
    sizes = []
    for seed in range(10):
        g = np.random.default_rng(seed)
        b1, b2 = g.standard_normal((2, 2))
        b1 *= g.uniform(0.3, 1.0) / np.linalg.norm(b1)
        b2 *= g.uniform(0.3, 1.0) / np.linalg.norm(b2)
        ds = sample_regression_mixture([b1, b2], [0.6, 0.4], 0.05, 2000, seed)
        res = decode(ds, p)
        sizes.append(len(res))
        hits += len(res) <= 4 / p.alpha and res.min_distance(b1) <= p.gamma
    elapsed = time.perf_counter() - start
    record("A8", hits >= 9 and elapsed < 120,
           f"{hits}/10 runs within gamma={p.gamma:.3g}, list sizes {sizes}, {elapsed:.1f}s")


def test_a9_reduction():
    oracle = run_trials(TrialConfig(InstanceParams(alpha=0.1, rho=0.5, d=64), n=1000, trials=100, seed=1))
    grid = run_trials(TrialConfig(InstanceParams(alpha=0.3, rho=math.sqrt(1 - 0.0025), d=2), n=1000, trials=20,
                                  seed=2, decoder="grid"))
    ok = oracle.accuracy == 1.0 and grid.accuracy >= 0.9
    record("A9", ok, f"oracle d=64 accuracy {oracle.accuracy:.2f} (100 trials); "
                     f"grid d=2 accuracy {grid.accuracy:.2f} (20 trials)")


def test_a10_reproducibility(tmp_path):
    ds = tmp_path / "h1.ds"
    runs = [
        ["generate", "--planted", "--alpha", "0.25", "--rho", "0.99874921777190895", "--d", "2", "--n", "2000",
         "--seed", "3", "--provenance", "--out", str(ds)],
        ["verify", "--in", str(ds), "--y-grid", "9", "--cert-trials", "100", "--out", str(tmp_path / "v.txt")],
        ["decode", "--in", str(ds), "--out", str(tmp_path / "l.txt")],
        ["test", "--alpha", "0.1", "--d", "16", "--n", "200", "--trials", "6", "--out", str(tmp_path / "t.csv")],
    ]
    same = []
    for argv in runs:
        assert main(argv) == 0
        out = argv[-1]
        again = out + ".again"
        assert main(["replay", str(manifest_path(out)), "--out", again]) == 0
        same.append(open(out, "rb").read() == open(again, "rb").read())
    record("A10", all(same), f"byte-identical replays for generate/verify/decode/test: {same}")
