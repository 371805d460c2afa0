"""
Percentile bootstrap for partially identified intervals.
Resamples units with replacement, refits the GPS model per resample and collects the
interval endpoints for every requested contrast and sensitivity setting at once.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from itertools import count
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from core import ContrastSpec, IntervalEstimate, ObservationalDataset, SensitivityAnalysisError, worker_count
from gps import GpsFitError, GpsFitOptions, fit_gps, predict_gps
from sens import SensitivitySpec, arm_extremes, combine_contrast, estimate_interval

logger = logging.getLogger(__name__)

QUANTILE_METHOD = 'linear'
ATTEMPT_CAP_FACTOR = 10


class BootstrapInstabilityError(SensitivityAnalysisError):
    """Too many resamples had to be discarded."""

    def __init__(self, message: str, attempts: int, discarded: int):
        super().__init__(message)
        self.attempts = attempts
        self.discarded = discarded


@dataclass(frozen=True)
class BootstrapConfig:
    """Percentile bootstrap settings."""
    reps: int = 1000
    alpha: float = 0.10
    seed: int = 20240101
    refit_gps: bool = True
    threads: int = 1
    show_progress: bool = False

    def __post_init__(self):
        if int(self.reps) < 2:
            raise ValueError(f"Bootstrap needs at least 2 replicates, got {self.reps}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.reps * min(self.alpha / 2, 1 - self.alpha / 2) < 1:
            raise ValueError(f"{self.reps} replicates are too few for alpha={self.alpha}; "
                             f"need at least {int(np.ceil(2 / self.alpha))}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if int(self.threads) < 0:
            raise ValueError("threads must be >= 0 (0 = all cores)")

    @property
    def workers(self) -> int:
        return worker_count(self.threads)


@dataclass(frozen=True)
class BootstrapDraws:
    """
    Endpoint draws indexed [replicate, contrast, spec].

    `attempts` counts every resample drawn, `discarded` the ones that were redrawn.
    """
    lower: np.ndarray
    upper: np.ndarray
    attempts: int
    discarded: int

    @property
    def reps(self) -> int:
        return int(self.lower.shape[0])


class _AttemptBudget:
    """Shared counter enforcing the total-draw cap across worker threads."""

    def __init__(self, cap: int):
        self.cap = cap
        self.used = 0
        self._lock = threading.Lock()

    def take(self) -> bool:
        with self._lock:
            if self.used >= self.cap:
                return False
            self.used += 1
            return True


def _replicate_rng(seed: int, replicate: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), replicate, attempt]))


def _resample_gps(sample: ObservationalDataset, gps_family: str, options: GpsFitOptions) -> Optional[np.ndarray]:
    """Refit on the resample; None when the fit fails or does not converge."""
    try:
        model = fit_gps(sample, gps_family, options)
    except GpsFitError as e:
        logger.debug(f"Discarding resample: {e}")
        return None
    if not model.converged:
        logger.debug(f"Discarding resample: {gps_family} refit did not converge")
        return None
    return predict_gps(model, sample.covariates)


def _endpoints(sample: ObservationalDataset, gps: np.ndarray, contrasts: Sequence[ContrastSpec],
               specs: Sequence[SensitivitySpec], arms: List[int]):
    lower = np.empty((len(contrasts), len(specs)))
    upper = np.empty((len(contrasts), len(specs)))
    for s, spec in enumerate(specs):
        lows, highs = arm_extremes(sample, gps, spec, arms)
        for c, contrast in enumerate(contrasts):
            lower[c, s], upper[c, s] = combine_contrast(contrast, lows, highs)
    return lower, upper


def bootstrap_endpoint_draws(dataset: ObservationalDataset, gps_family: str,
                             contrasts: Sequence[ContrastSpec], specs: Sequence[SensitivitySpec],
                             config: BootstrapConfig, options: Optional[GpsFitOptions] = None,
                             full_gps: Optional[np.ndarray] = None) -> BootstrapDraws:
    """
    Draw (L_b, U_b) for every (contrast, spec) pair from the same B resamples.

    Replicate b uses the random stream derived from (seed, b, attempt), so the draws do
    not depend on the thread count or scheduling order.

    Args:
        dataset: full sample
        gps_family: 'logistic', 'mlogit' or 'cratio'
        contrasts: contrasts to evaluate on each resample
        specs: sensitivity settings to evaluate on each resample
        config: bootstrap settings
        options: GPS fitting options
        full_gps: full-sample GPS rows, used instead of refitting when refit_gps is False

    Returns:
        BootstrapDraws with arrays of shape (B, len(contrasts), len(specs))
    """
    options = options or GpsFitOptions()
    if not contrasts or not specs:
        raise ValueError("At least one contrast and one sensitivity spec are required")
    for contrast in contrasts:
        if contrast.n_arms != dataset.n_arms:
            raise ValueError(f"Contrast {contrast.label} has {contrast.n_arms} entries, dataset has {dataset.n_arms} arms")

    if not config.refit_gps and full_gps is None:
        full_gps = predict_gps(fit_gps(dataset, gps_family, options), dataset.covariates)

    arms = sorted({int(a) + 1 for contrast in contrasts for a in np.flatnonzero(contrast.c)})
    budget = _AttemptBudget(ATTEMPT_CAP_FACTOR * config.reps)
    n = dataset.n

    def run_replicate(replicate: int):
        for attempt in count():
            if not budget.take():
                return None
            indices = _replicate_rng(config.seed, replicate, attempt).integers(0, n, size=n)
            sample = dataset.subset(indices)
            if np.any(sample.arm_counts() == 0):
                logger.debug(f"Replicate {replicate}: resample has an empty arm, redrawing")
                continue
            gps = _resample_gps(sample, gps_family, options) if config.refit_gps else full_gps[indices]
            if gps is None:
                continue
            return _endpoints(sample, gps, contrasts, specs, arms)

    lower = np.empty((config.reps, len(contrasts), len(specs)))
    upper = np.empty_like(lower)
    failed = False

    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        futures = {executor.submit(run_replicate, b): b for b in range(config.reps)}
        with tqdm(total=config.reps, desc="Bootstrap", unit="rep", disable=not config.show_progress) as pbar:
            for future in as_completed(futures):
                result = future.result()
                if result is None:
                    failed = True
                else:
                    lower[futures[future]], upper[futures[future]] = result
                pbar.update(1)

    discarded = budget.used - config.reps
    if failed:
        raise BootstrapInstabilityError(
            f"Bootstrap gave up after {budget.used} resamples ({ATTEMPT_CAP_FACTOR}x{config.reps}): "
            f"too many resamples had an empty arm or a failed GPS fit. "
            f"Use a larger sample or merge sparse treatment arms.",
            attempts=budget.used, discarded=max(discarded, 0),
        )
    if discarded:
        logger.warning(f"Discarded {discarded} degenerate resamples out of {budget.used} drawn")

    logger.info(f"Bootstrap finished: B={config.reps}, {len(contrasts)} contrast(s) x {len(specs)} setting(s), "
                f"refit_gps={config.refit_gps}")
    return BootstrapDraws(lower=lower, upper=upper, attempts=budget.used, discarded=discarded)


def percentile_interval(lower_draws: np.ndarray, upper_draws: np.ndarray, alpha: float):
    """alpha/2 quantile of the lower draws and 1 - alpha/2 quantile of the upper draws."""
    ci_lower = float(np.quantile(lower_draws, alpha / 2, method=QUANTILE_METHOD))
    ci_upper = float(np.quantile(upper_draws, 1 - alpha / 2, method=QUANTILE_METHOD))
    return ci_lower, ci_upper


def _ci_metadata(config: BootstrapConfig, draws: BootstrapDraws, gps_family: str) -> Dict[str, Any]:
    return {
        'quantile_method': QUANTILE_METHOD,
        'attempts': draws.attempts,
        'discarded': draws.discarded,
        'refit_gps': config.refit_gps,
        'gps_family': gps_family,
        'seed': int(config.seed),
    }


def attach_intervals(points: Sequence[Sequence[IntervalEstimate]], draws: BootstrapDraws,
                     config: BootstrapConfig, gps_family: str) -> List[List[IntervalEstimate]]:
    """Combine point intervals [contrast][spec] with the matching percentile CIs."""
    results = []
    for c, row in enumerate(points):
        results.append([])
        for s, point in enumerate(row):
            ci_lower, ci_upper = percentile_interval(draws.lower[:, c, s], draws.upper[:, c, s], config.alpha)
            results[-1].append(IntervalEstimate(
                point_lower=point.point_lower,
                point_upper=point.point_upper,
                gamma0=point.gamma0,
                ci_lower=ci_lower,
                ci_upper=ci_upper,
                alpha=config.alpha,
                bootstrap_reps=config.reps,
                metadata={**point.metadata, **_ci_metadata(config, draws, gps_family)},
            ))
    return results


def percentile_bootstrap_ci(dataset: ObservationalDataset, gps_family: str, contrast: ContrastSpec,
                            spec: SensitivitySpec, config: BootstrapConfig,
                            options: Optional[GpsFitOptions] = None) -> IntervalEstimate:
    """
    Point interval on the full sample plus its 100(1 - alpha)% percentile bootstrap CI.

    Raises:
        BootstrapInstabilityError: more than 10*B resamples were needed
    """
    options = options or GpsFitOptions()
    gps = predict_gps(fit_gps(dataset, gps_family, options), dataset.covariates)
    point = estimate_interval(dataset, gps, contrast, spec)
    draws = bootstrap_endpoint_draws(dataset, gps_family, [contrast], [spec], config, options, full_gps=gps)
    return attach_intervals([[point]], draws, config, gps_family)[0][0]
