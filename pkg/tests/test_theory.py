import math

import numpy as np
import pytest

from symphony_moe import fixture_path
from symphony_moe.errors import ArgumentError
from symphony_moe.noise import NoiseKind, clip_norm, outward_ball_push, sample_noise
from symphony_moe.theory import (
    RegionSpec,
    adversarial_escape_exact_2d,
    allowed_violation_rate,
    analytic_measure_2d,
    check_prop1,
    check_theorem1,
    coselect_consistency,
    confidence_radius,
    empirical_ajk,
    escape_fraction,
    escape_upper_bound,
    expansion_measure,
    lens_area,
    monte_carlo_measure,
    oracle_coselect_measure,
    perturb,
    random_sinkhorn_adjacency,
    two_circle_fixture,
)

LENS_MU = (2 * math.pi / 3 - math.sqrt(3) / 2) / 20


def test_lens_closed_form():
    assert lens_area(1, 1, 1) == pytest.approx(2 * math.pi / 3 - math.sqrt(3) / 2, abs=1e-12)
    assert lens_area(1, 1, 2) == 0.0
    assert lens_area(1, 0.5, 0.2) == pytest.approx(math.pi / 4)


def test_oracle_examples():
    assert oracle_coselect_measure(two_circle_fixture(2.0), 0, 1) == 0.0
    same = RegionSpec([[0, 0], [0, 0]], [0.5, 0.5], [-1, -1], [1, 1])
    assert oracle_coselect_measure(same, 0, 1) == pytest.approx(math.pi * 0.25 / 4)
    spec = two_circle_fixture()
    assert spec.box_volume == 20
    assert oracle_coselect_measure(spec, 0, 1) == pytest.approx(0.06142, abs=5e-6)


def test_montecarlo_oracle_cross_check():
    mu, se = oracle_coselect_measure(two_circle_fixture(), 0, 1, "montecarlo", seed=1, return_stderr=True)
    assert abs(mu - LENS_MU) <= 3 * se


def test_montecarlo_requires_dense_sampling():
    with pytest.raises(ArgumentError):
        oracle_coselect_measure(two_circle_fixture(), 0, 1, "montecarlo", n_samples=1000)


def test_random_configurations_agree():
    rng = np.random.default_rng(0)
    for i in range(20):
        r = rng.uniform(0.3, 1.0, size=2)
        c = rng.uniform(-1, 1, size=(2, 2))
        spec = RegionSpec(c, r, [-2.5, -2.5], [2.5, 2.5])
        p, se = monte_carlo_measure(spec, 0, 1, 400_000, seed=i)
        assert abs(p - analytic_measure_2d(spec, 0, 1)) <= 4 * max(se, 1 / 400_000)


def test_measure_monotone_in_distance():
    vals = [oracle_coselect_measure(two_circle_fixture(d), 0, 1) for d in np.linspace(0, 2, 21)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_empirical_ajk_large_n():
    spec = two_circle_fixture()
    a = empirical_ajk(spec, 0, 1, 1_000_000, seed=2)
    assert abs(a - LENS_MU) <= 3 * math.sqrt(LENS_MU * (1 - LENS_MU) / 1_000_000)


def test_empirical_ajk_degenerate():
    apart = RegionSpec([[-1, 0], [1.5, 0]], [0.8, 0.8], [-2, -1], [3, 1])
    for eps in (0.0, 0.1, 0.4):
        for kind in NoiseKind:
            assert empirical_ajk(apart, 0, 1, 5000, eps, kind, seed=3) == 0.0
    covering = RegionSpec([[0, 0], [0, 0]], [0.5, 0.5], [-1, -1], [1, 1]).with_radii([2.0, 2.0])
    assert empirical_ajk(covering, 0, 1, 5000, seed=4) == 1.0


def test_empirical_ajk_symmetric():
    spec = two_circle_fixture()
    for kind in NoiseKind:
        assert empirical_ajk(spec, 0, 1, 3000, 0.05, kind, seed=5) == empirical_ajk(spec, 1, 0, 3000, 0.05, kind, seed=5)


def test_gamma_example():
    assert confidence_radius(2000, 0.0, 0.05, 0.0) == pytest.approx(math.sqrt(math.log(40) / 4000))
    assert confidence_radius(2000, 0.0, 0.05, 0.0) == pytest.approx(0.03037, abs=5e-6)
    assert allowed_violation_rate(0.05, 500) == pytest.approx(0.0695, abs=5e-5)


def test_theorem1_small_run_at_zero_epsilon():
    res = check_theorem1(two_circle_fixture(), [(0, 1)], 500, 0.0, 0.05, 100, seed=6)
    assert res.passed and len(res.results) == 100
    with pytest.raises(ArgumentError):
        check_theorem1(two_circle_fixture(), [(0, 1)], 500, 0.1, 0.05, 10)


def test_noise_norm_bounds():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5000, 3))
    spec = RegionSpec([[0, 0, 0], [0.5, 0, 0]], [1, 1], [-2] * 3, [2] * 3)
    for kind in NoiseKind:
        moved = perturb(spec, x, 0, 1, 0.05, kind, rng)
        assert np.linalg.norm(moved - x, axis=1).max() <= 0.05
    assert np.linalg.norm(clip_norm(rng.normal(size=(100, 2)), 0.1), axis=1).max() <= 0.1


def test_uniform_ball_mean_norm():
    rng = np.random.default_rng(8)
    for d in (1, 2, 5):
        norms = np.linalg.norm(sample_noise(rng, 200_000, d, 0.3), axis=1)
        assert norms.mean() == pytest.approx(0.3 * d / (d + 1), rel=5e-3)


def test_outward_push_leaves_intersection():
    spec = two_circle_fixture()
    rng = np.random.default_rng(9)
    x = spec.sample(rng, 20000)
    x = x[spec.in_coselect(x, 0, 1)]
    step = outward_ball_push(x, spec.centers, spec.radii, 0.05)
    slack = np.minimum(spec.radii[0] - np.linalg.norm(x - spec.centers[0], axis=1),
                       spec.radii[1] - np.linalg.norm(x - spec.centers[1], axis=1))
    escaped = ~spec.in_coselect(x + step, 0, 1)
    np.testing.assert_array_equal(escaped[slack < 0.049], True)


def test_escape_fraction_examples():
    spec = two_circle_fixture()
    assert escape_fraction(spec, 0, 1, 0.0) == 0.0
    assert escape_fraction(spec, 0, 1, spec.diameter) == 1.0
    v = escape_fraction(spec, 0, 1, 0.05, seed=10)
    assert 0 < v < 1
    assert v == pytest.approx(adversarial_escape_exact_2d(spec, 0, 1, 0.05), abs=0.01)
    assert v <= escape_upper_bound(spec, 0, 1, 0.05)
    assert escape_fraction(spec, 0, 1, 0.05, NoiseKind.UNIFORM_BALL, seed=11) < v


def test_expansion_measure_methods_agree():
    spec = two_circle_fixture()
    mc = expansion_measure(spec, 0, 1, 0.05, n_samples=2_000_000, seed=12)
    an = expansion_measure(spec, 0, 1, 0.05, method="analytic")
    assert mc == pytest.approx(an, rel=0.05)


def test_region_file_roundtrip(tmp_path):
    spec = RegionSpec.load(fixture_path("two_circles.txt"))
    np.testing.assert_array_equal(spec.centers, two_circle_fixture().centers)
    spec.save(tmp_path / "r.txt")
    again = RegionSpec.load(tmp_path / "r.txt")
    np.testing.assert_array_equal(again.radii, spec.radii)
    with pytest.raises(ArgumentError):
        RegionSpec([[0, 0]], [2.0], [-1, -1], [1, 1])


def test_prop1_examples():
    rep = check_prop1(np.full((4, 4), 0.25), trials=200, k=1)
    assert rep.passed and rep.rho == pytest.approx(0.0, abs=1e-12)
    v = np.random.default_rng(13).normal(size=4)
    v -= v.mean()
    np.testing.assert_allclose(np.full((4, 4), 0.25) @ v, 0.0, atol=1e-15)
    rep = check_prop1(np.eye(3), trials=10)
    assert not rep.applicable and "disconnected" in rep.reason and not rep.checks
    A = np.array([[0.6, 0.4], [0.4, 0.6]])
    v = np.array([1.0, -1.0]) / math.sqrt(2)
    np.testing.assert_allclose(A @ v, 0.2 * v, atol=1e-15)
    assert np.linalg.norm(A @ v) == pytest.approx(0.2, abs=1e-12)
    rep = check_prop1(A, trials=200, k=1)
    assert rep.passed and rep.rho == pytest.approx(0.2, abs=1e-12)


def test_prop1_not_doubly_stochastic_is_reported():
    rep = check_prop1(np.array([[0.9, 0.1], [0.5, 0.5]]))
    assert not rep.applicable and not rep.doubly_stochastic


def test_prop1_random_adjacencies():
    rng = np.random.default_rng(14)
    for _ in range(10):
        A = random_sinkhorn_adjacency(int(rng.integers(3, 12)), rng)
        assert check_prop1(A, trials=200, seed=int(rng.integers(1 << 30))).passed


def test_coselect_consistency_when_balls_cover():
    # radii large enough that every point lies in its two nearest balls
    spec = RegionSpec([[-0.5, 0], [0.5, 0], [0, 0.6]], [2.0, 2.0, 2.0], [-2.6, -2.6], [2.6, 2.6])
    spec.box_lo, spec.box_hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    res = coselect_consistency(spec, 20000, seed=15)
    assert res.covering_holds
    np.testing.assert_allclose(res.pair_fraction_graph, res.pair_fraction_geometry, atol=1e-15)
    np.testing.assert_allclose(res.rownorm_recovered, res.pair_fraction_graph, atol=1e-12)
