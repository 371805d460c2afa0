"""Tests for sensitivity bounds, the threshold extremizer and interval estimation."""

import numpy as np
import pytest
from scipy.special import expit, logit

from core import ContrastSpec, ObservationalDataset, PositivityError
from sens import (
    DomainError,
    SensitivitySpec,
    UnitBounds,
    arm_extremes,
    brute_force_extremum,
    compute_z_bounds,
    estimate_interval,
    extremize_weighted_mean,
    shifted_propensity,
    sipw_arm_means,
    sweep_point_intervals,
)

GAMMA0_GRID = [0.0, 0.1, 0.2, 0.5, 1.0, 2.0]


def random_gps(rng, n, n_arms):
    """Row-stochastic matrix bounded away from 0 and 1."""
    raw = rng.uniform(0.2, 1.0, size=(n, n_arms))
    return raw / raw.sum(axis=1, keepdims=True)


def random_instance(rng):
    n_arms = int(rng.choice([2, 3, 4]))
    n = int(rng.integers(20, 201))
    treatment = rng.integers(1, n_arms + 1, size=n)
    treatment[:n_arms] = np.arange(1, n_arms + 1)
    dataset = ObservationalDataset(covariates=np.ones((n, 1)), treatment=treatment,
                                   outcome=rng.normal(size=n), n_arms=n_arms)
    return dataset, random_gps(rng, n, n_arms)


class TestSensitivitySpec:
    def test_Gamma0(self):
        assert SensitivitySpec(np.log(2.5)).Gamma0 == pytest.approx(2.5)
        assert SensitivitySpec.from_Gamma0(1.75).gamma0 == pytest.approx(np.log(1.75))

    def test_rejects_negative_gamma0(self):
        with pytest.raises(ValueError):
            SensitivitySpec(-0.1)
        with pytest.raises(ValueError):
            SensitivitySpec.from_Gamma0(0.9)

    def test_rejects_unknown_family(self):
        with pytest.raises(ValueError):
            SensitivitySpec(0.5, 'hazard-ratio')


class TestZBounds:
    def test_risk_ratio_box(self):
        bounds = compute_z_bounds(np.array([0.8, 0.3]), SensitivitySpec.from_Gamma0(2.0))

        np.testing.assert_allclose(bounds.z_lo, [0.8, 0.5])
        np.testing.assert_allclose(bounds.z_hi, [2.0, 2.0])

    def test_risk_ratio_keeps_true_propensity_below_one(self, rng):
        e = rng.uniform(0.01, 0.99, size=500)
        bounds = compute_z_bounds(e, SensitivitySpec(1.5))
        e_lo, e_hi = bounds.implied_propensity_range(e)

        assert np.all(e_hi <= 1.0)
        assert np.all(e_lo > 0.0)
        np.testing.assert_allclose(shifted_propensity(e, bounds.z_lo), e_hi)

    def test_no_confounding_collapses_box(self, rng):
        e = rng.uniform(0.05, 0.95, size=50)
        for family in ('risk-ratio', 'odds-ratio'):
            bounds = compute_z_bounds(e, SensitivitySpec(0.0, family))
            np.testing.assert_allclose(bounds.z_lo, 1.0, rtol=1e-12)
            np.testing.assert_allclose(bounds.z_hi, 1.0, rtol=1e-12)

    def test_odds_ratio_box(self):
        e = np.array([0.2, 0.6])
        bounds = compute_z_bounds(e, SensitivitySpec(0.7, 'odds-ratio'))
        e_lo, e_hi = bounds.implied_propensity_range(e)

        np.testing.assert_allclose(e_lo, expit(logit(e) - 0.7))
        np.testing.assert_allclose(e_hi, expit(logit(e) + 0.7))

    @pytest.mark.parametrize('bad', [0.0, 1.0, np.nan])
    def test_propensity_outside_unit_interval(self, bad):
        with pytest.raises(DomainError):
            compute_z_bounds(np.array([0.4, bad]), SensitivitySpec(0.5))

    def test_unit_bounds_invariants(self):
        with pytest.raises(ValueError):
            UnitBounds(np.array([2.0]), np.array([1.0]))
        with pytest.raises(ValueError):
            UnitBounds(np.array([0.0]), np.array([1.0]))


class TestExtremize:
    def test_hand_computed_example(self):
        y, u = np.array([1.0, 0.0]), np.ones(2)
        z_lo, z_hi = np.full(2, 0.5), np.full(2, 2.0)

        high, z_high = extremize_weighted_mean(y, u, z_lo, z_hi, 'max')
        low, z_low = extremize_weighted_mean(y, u, z_lo, z_hi, 'min')

        assert high == pytest.approx(0.8)
        assert low == pytest.approx(0.2)
        np.testing.assert_array_equal(z_high, [2.0, 0.5])
        np.testing.assert_array_equal(z_low, [0.5, 2.0])

    def test_matches_corner_enumeration(self):
        rng = np.random.default_rng(2024)
        for _ in range(500):
            m = int(rng.integers(1, 13))
            y = rng.normal(size=m)
            if rng.random() < 0.2:
                y = np.round(y)
            u = rng.uniform(0.5, 20.0, size=m)
            z_lo = rng.uniform(0.1, 1.0, size=m)
            z_hi = z_lo * rng.uniform(1.0, 8.0, size=m)
            for direction in ('min', 'max'):
                fast, _ = extremize_weighted_mean(y, u, z_lo, z_hi, direction)
                exact, _ = brute_force_extremum(y, u, z_lo, z_hi, direction)
                assert fast == pytest.approx(exact, rel=1e-12, abs=1e-12)

    def test_constant_outcome(self, rng):
        u = rng.uniform(1, 5, size=10)
        value, _ = extremize_weighted_mean(np.full(10, 3.25), u, np.full(10, 0.5), np.full(10, 2.0), 'max')
        assert value == 3.25

    def test_single_unit(self):
        value, z = extremize_weighted_mean(np.array([-1.5]), np.array([4.0]), np.array([0.5]), np.array([2.0]), 'min')
        assert value == -1.5
        assert 0.5 <= z[0] <= 2.0

    def test_degenerate_box_gives_weighted_mean(self, rng):
        y, u = rng.normal(size=8), rng.uniform(1, 3, size=8)
        z = np.ones(8)
        expected = np.dot(y, u) / u.sum()

        assert extremize_weighted_mean(y, u, z, z, 'min')[0] == pytest.approx(expected, rel=1e-12)
        assert extremize_weighted_mean(y, u, z, z, 'max')[0] == pytest.approx(expected, rel=1e-12)

    def test_optimizer_lies_in_box_and_attains_value(self, rng):
        y, u = rng.normal(size=30), rng.uniform(1, 3, size=30)
        z_lo, z_hi = rng.uniform(0.3, 1.0, size=30), rng.uniform(1.0, 3.0, size=30)
        value, z = extremize_weighted_mean(y, u, z_lo, z_hi, 'max')

        assert np.all((z >= z_lo) & (z <= z_hi))
        assert value == pytest.approx(np.dot(y * u, z) / np.dot(u, z))

    def test_rejects_empty_and_bad_direction(self):
        with pytest.raises(ValueError):
            extremize_weighted_mean(np.array([]), np.array([]), np.array([]), np.array([]), 'max')
        with pytest.raises(ValueError):
            extremize_weighted_mean(np.ones(2), np.ones(2), np.ones(2), np.ones(2), 'sideways')


class TestEstimateInterval:
    def test_no_confounding_equals_sipw(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            dataset, gps = random_instance(rng)
            contrast = ContrastSpec.pairwise(1, dataset.n_arms, dataset.n_arms)
            estimate = estimate_interval(dataset, gps, contrast, SensitivitySpec(0.0))

            direct = []
            for arm in (1, dataset.n_arms):
                mask = dataset.treatment == arm
                weights = 1.0 / gps[mask, arm - 1]
                direct.append(np.sum(weights * dataset.outcome[mask]) / np.sum(weights))

            assert abs(estimate.point_upper - estimate.point_lower) < 1e-10
            assert estimate.point_lower == pytest.approx(direct[0] - direct[1], abs=1e-10)

    def test_intervals_nest_in_gamma0(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            dataset, gps = random_instance(rng)
            contrast = ContrastSpec.pairwise(1, 2, dataset.n_arms)
            estimates = [estimate_interval(dataset, gps, contrast, SensitivitySpec(g)) for g in GAMMA0_GRID]
            lowers = np.array([e.point_lower for e in estimates])
            uppers = np.array([e.point_upper for e in estimates])

            assert np.all(np.diff(lowers) <= 1e-12)
            assert np.all(np.diff(uppers) >= -1e-12)

    def test_matches_joint_vertex_enumeration(self):
        rng = np.random.default_rng(17)
        n = 8
        vertices = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(bool)
        for _ in range(50):
            treatment = rng.integers(1, 3, size=n)
            treatment[:2] = [1, 2]
            dataset = ObservationalDataset(covariates=np.ones((n, 1)), treatment=treatment,
                                           outcome=rng.normal(size=n), n_arms=2)
            gps = random_gps(rng, n, 2)
            gamma0 = float(rng.choice([0.1, 0.5, 1.0]))

            received = gps[np.arange(n), treatment - 1]
            z = np.where(vertices, np.exp(gamma0), np.maximum(received, np.exp(-gamma0)))
            weights = z / received
            means = []
            for arm in (1, 2):
                w = weights[:, treatment == arm]
                means.append(w @ dataset.outcome[treatment == arm] / w.sum(axis=1))
            tau = means[0] - means[1]

            estimate = estimate_interval(dataset, gps, ContrastSpec.pairwise(1, 2, 2), SensitivitySpec(gamma0))
            assert estimate.point_lower == pytest.approx(tau.min(), abs=1e-12)
            assert estimate.point_upper == pytest.approx(tau.max(), abs=1e-12)

    def test_affine_outcome_transform(self, rng):
        dataset, gps = random_instance(rng)
        shifted = ObservationalDataset(covariates=dataset.covariates, treatment=dataset.treatment,
                                       outcome=2.0 * dataset.outcome + 1.0, n_arms=dataset.n_arms)
        contrast = ContrastSpec.pairwise(1, 2, dataset.n_arms)
        spec = SensitivitySpec(0.5)

        base = estimate_interval(dataset, gps, contrast, spec)
        scaled = estimate_interval(shifted, gps, contrast, spec)

        assert scaled.point_lower == pytest.approx(2.0 * base.point_lower, abs=1e-9)
        assert scaled.point_upper == pytest.approx(2.0 * base.point_upper, abs=1e-9)

    def test_sign_flip_swaps_endpoints(self, rng):
        dataset, gps = random_instance(rng)
        flipped = ObservationalDataset(covariates=dataset.covariates, treatment=dataset.treatment,
                                       outcome=-dataset.outcome, n_arms=dataset.n_arms)
        contrast = ContrastSpec.pairwise(1, 2, dataset.n_arms)
        spec = SensitivitySpec(1.0)

        base = estimate_interval(dataset, gps, contrast, spec)
        mirrored = estimate_interval(flipped, gps, contrast, spec)

        assert mirrored.point_lower == pytest.approx(-base.point_upper, abs=1e-10)
        assert mirrored.point_upper == pytest.approx(-base.point_lower, abs=1e-10)

    def test_empty_arm_in_contrast(self):
        dataset = ObservationalDataset(covariates=np.ones((4, 1)), treatment=[1, 2, 1, 2],
                                       outcome=[0.0, 1.0, 2.0, 3.0], n_arms=3)
        gps = np.full((4, 3), 1 / 3)

        with pytest.raises(PositivityError):
            estimate_interval(dataset, gps, ContrastSpec.pairwise(1, 3, 3), SensitivitySpec(0.2))
        estimate = estimate_interval(dataset, gps, ContrastSpec.pairwise(1, 2, 3), SensitivitySpec(0.2))
        assert estimate.point_lower <= estimate.point_upper

    def test_sweep_matches_single_estimates(self, three_arm_dataset, rng):
        gps = random_gps(rng, three_arm_dataset.n, 3)
        contrasts = [ContrastSpec.pairwise(1, 3, 3), ContrastSpec.pairwise(2, 3, 3)]
        specs = [SensitivitySpec(g) for g in (0.0, 0.5)] + [SensitivitySpec(0.5, 'odds-ratio')]
        sweep = sweep_point_intervals(three_arm_dataset, gps, contrasts, specs)

        for c, contrast in enumerate(contrasts):
            for s, spec in enumerate(specs):
                single = estimate_interval(three_arm_dataset, gps, contrast, spec)
                assert sweep[c][s].point_lower == single.point_lower
                assert sweep[c][s].point_upper == single.point_upper

    def test_arm_extremes_bracket_sipw_means(self, three_arm_dataset, rng):
        gps = random_gps(rng, three_arm_dataset.n, 3)
        lows, highs = arm_extremes(three_arm_dataset, gps, SensitivitySpec(0.3))
        means = sipw_arm_means(three_arm_dataset, gps)

        assert np.all(lows <= means + 1e-12)
        assert np.all(highs >= means - 1e-12)

    def test_gps_shape_mismatch(self, three_arm_dataset):
        with pytest.raises(ValueError):
            estimate_interval(three_arm_dataset, np.full((5, 3), 1 / 3),
                              ContrastSpec.pairwise(1, 2, 3), SensitivitySpec(0.1))
