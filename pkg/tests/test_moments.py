import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sqforge.errors import CertificateViolation, Infeasible
from sqforge.hermite import hermite_eval
from sqforge.moments import (
    DiscreteDistribution,
    SpikeMixture,
    caratheodory_reduce,
    chebyshev_grid,
    default_bound,
    default_order,
    dual_certificate_check,
    gauss_positivity_margin,
    gauss_positivity_value,
    inlier_weight,
    solve_complement,
    solve_mixture,
    sup_ratio_value,
    target_complement_hermite,
)


def gaussian_raw(i):
    return 0.0 if i % 2 else float(np.prod(np.arange(i - 1, 0, -2))) if i else 1.0


# -- basic quantities ------------------------------------------------------


def test_inlier_weight_examples():
    assert inlier_weight(0.0, 0.25) == pytest.approx(0.5, rel=1e-15)
    assert inlier_weight(0.0, 0.01) == pytest.approx(0.1, rel=1e-15)
    assert inlier_weight(1.0, 0.25) == pytest.approx(0.5 * math.exp(-0.375), rel=1e-14)
    assert 0.5 * math.exp(-0.375) == pytest.approx(0.34364463, rel=1e-7)


def test_default_order_and_bound():
    assert default_order(0.25) == 1
    assert default_order(0.1) == 1
    assert default_order(0.01) == 3
    assert default_order(0.4) == 1
    assert default_bound(3) == pytest.approx(4 * math.sqrt(3))


def test_target_examples():
    e = target_complement_hermite(0.0, 0.5, 1).coeffs
    np.testing.assert_allclose(e, [1, 0, 1 / math.sqrt(2)], atol=1e-15)
    ay = 0.5 * math.exp(-0.375)
    e = target_complement_hermite(1.0, ay, 1).coeffs
    assert e[1] == pytest.approx(-ay / (1 - ay), rel=1e-13)
    assert e[1] == pytest.approx(-0.52358, abs=2e-5)
    assert e[2] == pytest.approx(0.0, abs=1e-15)
    e = target_complement_hermite(3.0, 0.0, 3).coeffs
    np.testing.assert_array_equal(e[1:], 0.0)


def test_chebyshev_grid_endpoints():
    g = chebyshev_grid(3.0, 11)
    assert g[0] == -3.0 and g[-1] == 3.0 and np.all(np.diff(g) > 0)


# -- DiscreteDistribution --------------------------------------------------


def test_distribution_canonical_form():
    d = DiscreteDistribution([1.0, -1.0, 1.0, 0.5], [0.25, 0.25, 0.25, 0.25], 2.0)
    np.testing.assert_array_equal(d.atoms, [-1.0, 0.5, 1.0])
    np.testing.assert_allclose(d.weights, [0.25, 0.25, 0.5])
    d = DiscreteDistribution([0.0, 1.0], [1.0, 0.0], 2.0)
    assert len(d) == 1


@pytest.mark.parametrize(
    "atoms,weights,B",
    [([0.0], [0.9], 1.0), ([0.0, 1.0], [1.2, -0.2], 2.0), ([3.0], [1.0], 2.0), ([], [], 1.0), ([np.nan], [1.0], 1.0)],
)
def test_distribution_rejects_invalid(atoms, weights, B):
    with pytest.raises(ValueError):
        DiscreteDistribution(atoms, weights, B)


# -- solve_complement ------------------------------------------------------


def test_solve_symmetric_example():
    F = solve_complement(0.0, 0.25, 1, 4.0)
    mix = SpikeMixture(0.0, 0.5, F, 1, 0.25)
    assert mix.max_residual() <= 1e-7
    assert len(F) <= 3 and np.all(np.abs(F.atoms) <= 4.0)
    # the hand-built two-atom solution satisfies the same equations
    r2 = math.sqrt(2)
    hand = SpikeMixture(0.0, 0.5, DiscreteDistribution([-r2, r2], [0.5, 0.5], 4.0), 1, 0.25)
    assert hand.max_residual() <= 1e-15
    assert 0.5 * hermite_eval(2, 0.0) + 0.5 / r2 == pytest.approx(0.0, abs=1e-15)


def test_solve_vanishing_spike():
    F = solve_complement(60.0, 0.25, 2)
    assert np.max(np.abs(F.hermite_moments(4)[1:])) <= 1e-7


@pytest.mark.parametrize("y", [0.0, 5.0, -5.0, 10.0, -10.0])
def test_solve_small_alpha(y):
    mix = solve_mixture(y, 0.01, 3, 4 * math.sqrt(3))
    assert len(mix.complement) <= 7
    assert mix.max_residual() <= 1e-7


def test_raw_moment_equivalence():
    for y in (0.0, 7.0, -13.0):
        mix = solve_mixture(y, 0.01, 3)
        F = mix.complement
        # brute force over atoms, independent of the Hermite basis
        raw = [mix.alpha_y * y**i + (1 - mix.alpha_y) * sum(w * t**i for t, w in zip(F.atoms, F.weights))
               for i in range(7)]
        for i in range(1, 7):
            want = gaussian_raw(i)
            assert abs(raw[i] - want) <= 1e-6 * max(1.0, abs(want))


def test_infeasible_large_m():
    with pytest.raises(Infeasible) as info:
        solve_complement(2.0, 0.25, 50)
    assert info.value.residual > 1e-9


def test_solve_rejects_bad_inputs():
    with pytest.raises(ValueError):
        solve_complement(0.0, 0.25, 0)
    with pytest.raises(ValueError):
        solve_complement(0.0, 0.25, 2, grid_points=5)


def test_solve_is_deterministic():
    a = solve_complement(1.3, 0.1, 1)
    b = solve_complement(1.3, 0.1, 1)
    np.testing.assert_array_equal(a.atoms, b.atoms)
    np.testing.assert_array_equal(a.weights, b.weights)


# -- Caratheodory ----------------------------------------------------------


def test_caratheodory_noop():
    d = DiscreteDistribution([-1.0, 0.0, 2.0], [0.2, 0.5, 0.3], 3.0)
    assert caratheodory_reduce(d, 1) == d


def test_caratheodory_four_atoms():
    d = DiscreteDistribution([-2.0, -0.5, 1.0, 2.5], [0.1, 0.4, 0.3, 0.2], 3.0)
    r = caratheodory_reduce(d, 1)
    assert len(r) <= 3
    np.testing.assert_allclose(r.raw_moments(2), d.raw_moments(2), atol=1e-10)


def test_caratheodory_grid_measure():
    t = np.linspace(-3, 3, 101)
    d = DiscreteDistribution(t, np.full(101, 1 / 101), 3.0)
    r = caratheodory_reduce(d, 2)
    assert len(r) <= 5
    np.testing.assert_allclose(r.raw_moments(4), d.raw_moments(4), atol=1e-9)


@given(st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_caratheodory_moment_exact(m, seed):
    g = np.random.default_rng(seed)
    k = int(g.integers(2 * m + 2, 40))
    t = g.uniform(-4, 4, k)
    w = g.random(k) + 0.01
    d = DiscreteDistribution(t, w / w.sum(), 4.0)
    r = caratheodory_reduce(d, m)
    assert len(r) <= 2 * m + 1
    np.testing.assert_allclose(r.hermite_moments(2 * m), d.hermite_moments(2 * m), atol=1e-9)


# -- certificates and lemmas -----------------------------------------------


def test_certificate_constant_polynomial():
    mix = solve_mixture(2.0, 0.01, 3)
    rep = dual_certificate_check(mix, trials=1000, seed=3)
    assert rep.ok and rep.min_scaled_slack >= -1e-9
    assert rep.max_identity_gap <= 1e-9
    assert rep.slacks[0] == pytest.approx(1 - mix.alpha_y, abs=1e-12)


def test_certificate_without_spike():
    F = solve_complement(80.0, 0.1, 1)
    mix = SpikeMixture(80.0, 0.0, F, 1)
    rep = dual_certificate_check(mix, trials=200, seed=0)
    assert rep.min_slack >= 0


def test_certificate_detects_infeasible_spike():
    # a heavy spike far out: p = h_1^2 gives E[p] = 1 < 0.9 * 9
    bad = SpikeMixture(3.0, 0.9, DiscreteDistribution([0.0], [1.0], 4.0), 1)
    with pytest.raises(CertificateViolation) as info:
        dual_certificate_check(bad, trials=50, seed=0)
    assert info.value.slack < 0
    rep = dual_certificate_check(bad, trials=50, seed=0, raise_on_violation=False)
    assert not rep.ok


def test_identity_gap_flags_wrong_complement():
    wrong = SpikeMixture(0.0, 0.5, DiscreteDistribution([0.0], [1.0], 4.0), 1)
    rep = dual_certificate_check(wrong, trials=50, seed=0, raise_on_violation=False)
    assert rep.max_identity_gap > 1e-3


def test_sup_ratio_examples():
    assert sup_ratio_value(0.0, 0.25, 2) == pytest.approx(0.25, rel=1e-14)
    assert sup_ratio_value(0.0, 0.1, 1) == 0.0
    ys = np.linspace(-40, 40, 801)
    assert max(sup_ratio_value(y, 0.01, 3) for y in ys) <= 0.5


def test_gauss_positivity_examples():
    assert gauss_positivity_value([1.0], 2.0) == pytest.approx(2.0, abs=1e-13)
    assert gauss_positivity_value([0.0, 1.0], 4.0) == pytest.approx(10.0, abs=1e-12)
    assert gauss_positivity_margin(5, 4 * math.sqrt(5), 1000, 0) >= 0
