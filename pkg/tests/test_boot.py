"""Tests for the percentile bootstrap."""

import numpy as np
import pytest

import boot
from boot import (
    ATTEMPT_CAP_FACTOR,
    BootstrapConfig,
    BootstrapInstabilityError,
    attach_intervals,
    bootstrap_endpoint_draws,
    percentile_bootstrap_ci,
    percentile_interval,
)
from core import ContrastSpec, ObservationalDataset
from gps import fit_gps, predict_gps
from sens import SensitivitySpec, estimate_interval, sweep_point_intervals
from sim import scenario_preset, generate_scenario


def constant_outcome(dataset):
    return ObservationalDataset(covariates=dataset.covariates, treatment=dataset.treatment,
                                outcome=np.zeros(dataset.n), n_arms=dataset.n_arms)


class TestBootstrapConfig:
    def test_defaults(self):
        config = BootstrapConfig()
        assert (config.reps, config.alpha, config.refit_gps) == (1000, 0.10, True)

    @pytest.mark.parametrize('kwargs', [
        {'reps': 1},
        {'reps': 10, 'alpha': 0.1},
        {'alpha': 0.0},
        {'alpha': 1.0},
        {'seed': -1},
        {'threads': -2},
    ])
    def test_rejects_invalid_settings(self, kwargs):
        with pytest.raises(ValueError):
            BootstrapConfig(**kwargs)

    def test_zero_threads_means_all_cores(self):
        assert BootstrapConfig(threads=0).workers >= 1


class TestPercentileInterval:
    def test_matches_linear_quantiles(self, rng):
        lower, upper = rng.normal(size=57), rng.normal(size=57) + 1.0
        ci = percentile_interval(lower, upper, 0.1)

        assert ci[0] == np.quantile(lower, 0.05, method='linear')
        assert ci[1] == np.quantile(upper, 0.95, method='linear')


class TestBootstrapDraws:
    def test_constant_outcome_gives_zero_interval(self, binary_dataset):
        dataset = constant_outcome(binary_dataset)
        config = BootstrapConfig(reps=20, seed=3)
        estimate = percentile_bootstrap_ci(dataset, 'logistic', ContrastSpec.binary_ate(), SensitivitySpec(0.5), config)

        assert (estimate.point_lower, estimate.point_upper) == (0.0, 0.0)
        assert (estimate.ci_lower, estimate.ci_upper) == (0.0, 0.0)

    def test_identical_across_thread_counts(self, three_arm_dataset):
        contrasts = [ContrastSpec.pairwise(1, 3, 3), ContrastSpec.pairwise(2, 3, 3)]
        specs = [SensitivitySpec(0.0), SensitivitySpec(0.4)]

        single = bootstrap_endpoint_draws(three_arm_dataset, 'mlogit', contrasts, specs,
                                          BootstrapConfig(reps=20, seed=11, threads=1))
        pooled = bootstrap_endpoint_draws(three_arm_dataset, 'mlogit', contrasts, specs,
                                          BootstrapConfig(reps=20, seed=11, threads=4))

        np.testing.assert_array_equal(single.lower, pooled.lower)
        np.testing.assert_array_equal(single.upper, pooled.upper)
        assert single.attempts == pooled.attempts

    def test_seed_changes_draws(self, three_arm_dataset):
        contrasts, specs = [ContrastSpec.pairwise(1, 2, 3)], [SensitivitySpec(0.2)]
        first = bootstrap_endpoint_draws(three_arm_dataset, 'mlogit', contrasts, specs, BootstrapConfig(reps=20, seed=1))
        second = bootstrap_endpoint_draws(three_arm_dataset, 'mlogit', contrasts, specs, BootstrapConfig(reps=20, seed=2))

        assert not np.array_equal(first.lower, second.lower)

    def test_fixed_gps_replicate_matches_manual_resample(self, three_arm_dataset):
        gps = predict_gps(fit_gps(three_arm_dataset, 'mlogit'), three_arm_dataset.covariates)
        contrast, spec = ContrastSpec.pairwise(1, 3, 3), SensitivitySpec(0.3)
        config = BootstrapConfig(reps=20, seed=99, refit_gps=False)
        draws = bootstrap_endpoint_draws(three_arm_dataset, 'mlogit', [contrast], [spec], config, full_gps=gps)

        n = three_arm_dataset.n
        indices = np.random.default_rng(np.random.SeedSequence([99, 0, 0])).integers(0, n, size=n)
        manual = estimate_interval(three_arm_dataset.subset(indices), gps[indices], contrast, spec)

        assert draws.lower[0, 0, 0] == manual.point_lower
        assert draws.upper[0, 0, 0] == manual.point_upper

    def test_draws_are_ordered(self, three_arm_dataset):
        draws = bootstrap_endpoint_draws(three_arm_dataset, 'mlogit', [ContrastSpec.pairwise(1, 2, 3)],
                                         [SensitivitySpec(0.0), SensitivitySpec(0.5)], BootstrapConfig(reps=20))

        assert draws.lower.shape == (20, 1, 2)
        assert np.all(draws.lower <= draws.upper)
        assert np.all(draws.lower[:, :, 1] <= draws.lower[:, :, 0] + 1e-12)

    def test_failed_refits_exhaust_budget(self, three_arm_dataset, monkeypatch):
        monkeypatch.setattr(boot, '_resample_gps', lambda *args, **kwargs: None)

        with pytest.raises(BootstrapInstabilityError) as excinfo:
            bootstrap_endpoint_draws(three_arm_dataset, 'mlogit', [ContrastSpec.pairwise(1, 2, 3)],
                                     [SensitivitySpec(0.1)], BootstrapConfig(reps=20))

        assert excinfo.value.attempts == ATTEMPT_CAP_FACTOR * 20

    def test_sparse_arm_resamples_are_redrawn(self, rng):
        treatment = np.array([1, 2] * 15)
        treatment[0] = 3
        dataset = ObservationalDataset(covariates=np.ones((30, 1)), treatment=treatment,
                                       outcome=rng.normal(size=30), n_arms=3)
        config = BootstrapConfig(reps=20, seed=5, refit_gps=False)
        draws = bootstrap_endpoint_draws(dataset, 'mlogit', [ContrastSpec.pairwise(1, 3, 3)],
                                         [SensitivitySpec(0.2)], config, full_gps=np.full((30, 3), 1 / 3))

        assert draws.discarded > 0
        assert draws.attempts == 20 + draws.discarded

    def test_attach_intervals_records_metadata(self, three_arm_dataset):
        gps = predict_gps(fit_gps(three_arm_dataset, 'mlogit'), three_arm_dataset.covariates)
        contrasts, specs = [ContrastSpec.pairwise(1, 2, 3)], [SensitivitySpec(0.2)]
        config = BootstrapConfig(reps=20, seed=8)
        points = sweep_point_intervals(three_arm_dataset, gps, contrasts, specs)
        draws = bootstrap_endpoint_draws(three_arm_dataset, 'mlogit', contrasts, specs, config)
        estimate = attach_intervals(points, draws, config, 'mlogit')[0][0]

        assert estimate.bootstrap_reps == 20
        assert estimate.metadata['quantile_method'] == 'linear'
        assert estimate.metadata['seed'] == 8
        assert estimate.metadata['contrast'] == 'tau_1,2'


@pytest.mark.slow
class TestBootstrapBehaviour:
    def test_width_scales_with_root_n(self):
        contrast = ContrastSpec.pairwise(1, 3, 3)
        widths = []
        for n in (500, 2000, 8000):
            dataset, _, _ = generate_scenario(scenario_preset('I', n=n, seed=17), 0)
            estimate = percentile_bootstrap_ci(dataset, 'mlogit', contrast, SensitivitySpec(0.0),
                                               BootstrapConfig(reps=400, seed=4, threads=0))
            widths.append(estimate.ci_upper - estimate.ci_lower)

        # root-n scaling: quadrupling n halves the width
        ratios = np.array(widths[:-1]) / np.array(widths[1:])
        np.testing.assert_allclose(ratios, 2.0, rtol=0.2)

    def test_ci_contains_point_interval(self):
        dataset, _, _ = generate_scenario(scenario_preset('I', n=750, seed=23), 0)
        estimate = percentile_bootstrap_ci(dataset, 'mlogit', ContrastSpec.pairwise(1, 2, 3),
                                           SensitivitySpec(0.5), BootstrapConfig(reps=200, threads=0))

        assert estimate.ci_lower <= estimate.point_lower
        assert estimate.ci_upper >= estimate.point_upper
