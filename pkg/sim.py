"""
Simulation study for the sensitivity interval estimator.
Generates three-arm data with tunable overlap, computes true partially identified
intervals by large-sample numerical approximation, and aggregates bias and coverage
across Monte Carlo replicates.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax
from tqdm import tqdm

from boot import BootstrapConfig, bootstrap_endpoint_draws, percentile_interval, QUANTILE_METHOD
from core import INTERCEPT_NAME, ContrastSpec, ObservationalDataset, SensitivityAnalysisError, worker_count
from gps import GpsFitOptions, fit_multinomial_logit, predict_gps
from sens import SensitivitySpec, arm_extremes, combine_contrast

logger = logging.getLogger(__name__)

N_ARMS = 3
DEFAULT_GAMMA0_GRID = (0.0, 0.1, 0.2, 0.5, 1.0, 2.0)
SCENARIOS = {'I': (0.1, -0.1), 'II': (3.0, 3.0)}
MIN_ORACLE_UNITS = 100_000
FAILURE_RATE_LIMIT = 0.05
REPORT_SCHEMA_VERSION = 1
NA_MARKER = 'NA'
# X3 ~ N(0, X3_SCALE) with X3_SCALE read as a standard deviation unless x3_scale is "variance"
X3_SCALE = 0.5
COVARIATE_NAMES = (INTERCEPT_NAME, 'x1', 'x2', 'x3')

# rows are arms, columns multiply (1, X1, X2, X3); treatment rows are scaled by (0, k2, k3)
TREATMENT_DIRECTIONS = np.array([
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 1.0, 1.0],
    [0.0, 1.0, 1.0, -1.0],
])
OUTCOME_COEFFICIENTS = np.array([
    [1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0, -1.0],
])


class StudyAbortedError(SensitivityAnalysisError):
    """Too many simulation replicates failed."""

    def __init__(self, message: str, failures: List[Dict[str, Any]]):
        super().__init__(message)
        self.failures = failures


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario: sample size, overlap knobs, replicate counts and seeds."""
    n: int = 750
    k2: float = 0.1
    k3: float = -0.1
    seed: int = 20240101
    gamma0_grid: Tuple[float, ...] = DEFAULT_GAMMA0_GRID
    reps: int = 200
    bootstrap: BootstrapConfig = field(default_factory=lambda: BootstrapConfig(reps=200))
    name: str = 'I'
    n_oracle: int = 1_000_000
    oracle_seed: Optional[int] = None
    x3_scale: str = 'sd'
    threads: int = 1
    show_progress: bool = False
    gps_warn: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, 'gamma0_grid', tuple(float(g) for g in self.gamma0_grid))
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.reps < 1:
            raise ValueError(f"reps must be >= 1, got {self.reps}")
        if not self.gamma0_grid or any(g < 0 for g in self.gamma0_grid):
            raise ValueError("gamma0_grid must be non-empty with every value >= 0")
        if self.x3_scale not in ('variance', 'sd'):
            raise ValueError("x3_scale must be 'variance' or 'sd'")
        if self.n_oracle < MIN_ORACLE_UNITS:
            raise ValueError(f"n_oracle must be >= {MIN_ORACLE_UNITS}, got {self.n_oracle}")
        if self.threads < 0:
            raise ValueError("threads must be >= 0 (0 = all cores)")

    @property
    def effective_oracle_seed(self) -> int:
        return self.seed if self.oracle_seed is None else self.oracle_seed


SCENARIO_I = ScenarioConfig(name='I', k2=SCENARIOS['I'][0], k3=SCENARIOS['I'][1])
SCENARIO_II = ScenarioConfig(name='II', k2=SCENARIOS['II'][0], k3=SCENARIOS['II'][1])


def scenario_preset(name: str, **overrides) -> ScenarioConfig:
    """Named scenario ('I' adequate overlap, 'II' limited overlap) with field overrides."""
    presets = {'I': SCENARIO_I, 'II': SCENARIO_II}
    if name not in presets:
        raise ValueError(f"Unknown scenario '{name}', expected one of {', '.join(presets)}")
    return replace(presets[name], **overrides)


def default_contrasts() -> List[ContrastSpec]:
    return [ContrastSpec.pairwise(1, 2, N_ARMS), ContrastSpec.pairwise(1, 3, N_ARMS),
            ContrastSpec.pairwise(2, 3, N_ARMS)]


def oracle_monte_carlo_error(n_oracle: int) -> float:
    """Binomial-scale Monte Carlo error of an arm mean with about N/3 units per arm."""
    return 0.5 / np.sqrt(n_oracle / N_ARMS)


def treatment_coefficients(k2: float, k3: float) -> np.ndarray:
    return TREATMENT_DIRECTIONS * np.array([0.0, k2, k3])[:, None]


def true_gps(covariates: np.ndarray, k2: float, k3: float) -> np.ndarray:
    """Arm probabilities r_a(x) proportional to exp(x'beta_a)."""
    return softmax(covariates @ treatment_coefficients(k2, k3).T, axis=1)


def outcome_probabilities(covariates: np.ndarray) -> np.ndarray:
    """Category probabilities of the potential-outcome draw, proportional to exp(x'delta_a)."""
    return softmax(covariates @ OUTCOME_COEFFICIENTS.T, axis=1)


def _draw_covariates(rng: np.random.Generator, n: int, x3_scale: str) -> np.ndarray:
    x3_sd = np.sqrt(X3_SCALE) if x3_scale == 'variance' else X3_SCALE
    x1 = rng.binomial(1, 0.5, size=n).astype(float)
    x2 = rng.uniform(-1.0, 1.0, size=n)
    x3 = rng.normal(0.0, x3_sd, size=n)
    return np.column_stack([np.ones(n), x1, x2, x3])


def _draw_categories(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row, returned as 0-based indices."""
    u = rng.random(probs.shape[0])
    index = (u[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1)
    return np.minimum(index, probs.shape[1] - 1)


def _simulate_units(rng: np.random.Generator, n: int, k2: float, k3: float, x3_scale: str):
    X = _draw_covariates(rng, n, x3_scale)
    gps = true_gps(X, k2, k3)
    treatment = _draw_categories(rng, gps) + 1
    category = _draw_categories(rng, outcome_probabilities(X))
    potential = np.eye(N_ARMS)[category]
    outcome = potential[np.arange(n), treatment - 1]
    dataset = ObservationalDataset(
        covariates=X,
        treatment=treatment,
        outcome=outcome,
        n_arms=N_ARMS,
        covariate_names=COVARIATE_NAMES,
    )
    return dataset, gps, potential


def generate_scenario(config: ScenarioConfig, replicate: int):
    """
    Draw one simulated dataset.

    Returns:
        (dataset, true GPS n x 3, potential outcomes n x 3); each row of the potential
        outcomes is one-hot since all arms share a single categorical draw
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), int(replicate)]))
    return _simulate_units(rng, config.n, config.k2, config.k3, config.x3_scale)


def oracle_intervals(contrasts: Sequence[ContrastSpec], gamma0_grid: Sequence[float], k2: float, k3: float,
                     n_oracle: int, seed: int, model_family: str = 'risk-ratio',
                     x3_scale: str = 'sd') -> np.ndarray:
    """
    True partially identified intervals on one large draw with the true GPS.

    Returns:
        array of shape (len(contrasts), len(gamma0_grid), 2)
    """
    if n_oracle < MIN_ORACLE_UNITS:
        raise ValueError(f"n_oracle must be >= {MIN_ORACLE_UNITS}, got {n_oracle}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    dataset, gps, _ = _simulate_units(rng, n_oracle, k2, k3, x3_scale)

    intervals = np.empty((len(contrasts), len(gamma0_grid), 2))
    for s, gamma0 in enumerate(gamma0_grid):
        lows, highs = arm_extremes(dataset, gps, SensitivitySpec(gamma0, model_family))
        for c, contrast in enumerate(contrasts):
            intervals[c, s] = combine_contrast(contrast, lows, highs)
    logger.info(f"Oracle intervals computed on {n_oracle} units (k2={k2}, k3={k3}, "
                f"Monte Carlo error ~{oracle_monte_carlo_error(n_oracle):.4f})")
    return intervals


def true_partially_identified_interval(contrast: ContrastSpec, gamma0: float, k2: float, k3: float,
                                       n_oracle: int = 1_000_000, seed: int = 20240101,
                                       model_family: str = 'risk-ratio',
                                       x3_scale: str = 'sd') -> Tuple[float, float]:
    lower, upper = oracle_intervals([contrast], [gamma0], k2, k3, n_oracle, seed, model_family, x3_scale)[0, 0]
    return float(lower), float(upper)


@dataclass(frozen=True)
class StudyRow:
    """Aggregated results for one (scenario, contrast, gamma0) cell."""
    scenario: str
    contrast: str
    gamma0: float
    Gamma0: float
    true_lower: float
    true_upper: float
    pct_bias_lower: float
    pct_bias_upper: float
    non_coverage: float
    median_point_lower: float
    median_point_upper: float
    median_ci_lower: float
    median_ci_upper: float
    overlap_warning: bool
    min_fitted_gps: float
    replicates: int
    failed_replicates: int

    @property
    def true_interval(self) -> Tuple[float, float]:
        return self.true_lower, self.true_upper

    @property
    def median_point_interval(self) -> Tuple[float, float]:
        return self.median_point_lower, self.median_point_upper

    @property
    def median_ci(self) -> Tuple[float, float]:
        return self.median_ci_lower, self.median_ci_upper


@dataclass(frozen=True)
class StudyReport:
    """Table of bias, coverage and median intervals for one scenario."""
    rows: Tuple[StudyRow, ...]
    metadata: Dict[str, Any] = field(default_factory=dict)
    failures: Tuple[Dict[str, Any], ...] = ()

    def row(self, contrast: str, gamma0: float) -> StudyRow:
        for row in self.rows:
            if row.contrast == contrast and np.isclose(row.gamma0, gamma0):
                return row
        raise KeyError(f"No row for {contrast} at gamma0={gamma0}")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.rows])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.6f', na_rep=NA_MARKER)
        logger.info(f"Wrote study table to {path}")
        return path

    def to_dict(self) -> Dict[str, Any]:
        def clean(value):
            if isinstance(value, (bool, np.bool_)):
                return bool(value)
            if isinstance(value, (float, np.floating)):
                return None if not np.isfinite(value) else float(value)
            return value

        return {
            'schema_version': REPORT_SCHEMA_VERSION,
            'metadata': self.metadata,
            'rows': [{key: clean(value) for key, value in asdict(row).items()} for row in self.rows],
            'failures': list(self.failures),
        }

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding='utf-8')
        logger.info(f"Wrote study report to {path}")
        return path


def _bootstrap_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(replicate)]).generate_state(1, dtype=np.uint64)[0])


def _run_replicate(config: ScenarioConfig, replicate: int, contrasts: Sequence[ContrastSpec],
                   specs: Sequence[SensitivitySpec], options: GpsFitOptions) -> Dict[str, Any]:
    dataset, _, _ = generate_scenario(config, replicate)
    model = fit_multinomial_logit(dataset, options)
    gps = predict_gps(model, dataset.covariates)

    point_lower = np.empty((len(contrasts), len(specs)))
    point_upper = np.empty_like(point_lower)
    for s, spec in enumerate(specs):
        lows, highs = arm_extremes(dataset, gps, spec)
        for c, contrast in enumerate(contrasts):
            point_lower[c, s], point_upper[c, s] = combine_contrast(contrast, lows, highs)

    boot_config = replace(config.bootstrap, seed=_bootstrap_seed(config.bootstrap.seed, replicate),
                          threads=1, show_progress=False)
    draws = bootstrap_endpoint_draws(dataset, 'mlogit', contrasts, specs, boot_config, options, full_gps=gps)

    ci_lower = np.empty_like(point_lower)
    ci_upper = np.empty_like(point_lower)
    for c in range(len(contrasts)):
        for s in range(len(specs)):
            ci_lower[c, s], ci_upper[c, s] = percentile_interval(
                draws.lower[:, c, s], draws.upper[:, c, s], boot_config.alpha)

    return {
        'point_lower': point_lower,
        'point_upper': point_upper,
        'ci_lower': ci_lower,
        'ci_upper': ci_upper,
        'min_gps': float(gps.min()),
    }


def _pct_bias(estimates: np.ndarray, truth: float) -> float:
    """100 * mean(estimate - truth) / SD(estimate); NaN when the SD is undefined or zero."""
    if estimates.size < 2:
        return float('nan')
    sd = float(np.std(estimates, ddof=1))
    if sd == 0.0:
        return float('nan')
    return 100.0 * float(np.mean(estimates - truth)) / sd


def run_study(config: ScenarioConfig, contrasts: Optional[Sequence[ContrastSpec]] = None,
              options: Optional[GpsFitOptions] = None) -> StudyReport:
    """
    Run every replicate of the scenario and aggregate per contrast and gamma0.

    Each replicate fits a multinomial logit GPS, computes point intervals and
    bootstrap CIs over the gamma0 grid. Failed replicates are recorded; more than
    5% failures aborts the study.

    Raises:
        StudyAbortedError: replicate failure rate above 5%
    """
    contrasts = list(contrasts) if contrasts else default_contrasts()
    options = options or GpsFitOptions()
    specs = [SensitivitySpec(g) for g in config.gamma0_grid]

    logger.info(f"Scenario {config.name}: n={config.n}, (k2, k3)=({config.k2}, {config.k3}), "
                f"reps={config.reps}, B={config.bootstrap.reps}, gamma0 grid={list(config.gamma0_grid)}")

    truth = oracle_intervals(contrasts, config.gamma0_grid, config.k2, config.k3, config.n_oracle,
                             config.effective_oracle_seed, x3_scale=config.x3_scale)

    results: List[Optional[Dict[str, Any]]] = [None] * config.reps
    failures: List[Dict[str, Any]] = []
    workers = worker_count(config.threads)

    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(_run_replicate, config, r, contrasts, specs, options): r
                   for r in range(config.reps)}
        with tqdm(total=config.reps, desc=f"Scenario {config.name}", unit="rep",
                  disable=not config.show_progress) as pbar:
            for future in as_completed(futures):
                replicate = futures[future]
                try:
                    results[replicate] = future.result()
                except SensitivityAnalysisError as e:
                    logger.warning(f"Replicate {replicate} failed: {type(e).__name__}: {e}")
                    failures.append({'replicate': replicate, 'error': type(e).__name__, 'message': str(e)})
                pbar.update(1)

    failures.sort(key=lambda f: f['replicate'])
    if len(failures) > FAILURE_RATE_LIMIT * config.reps:
        raise StudyAbortedError(
            f"Scenario {config.name}: {len(failures)} of {config.reps} replicates failed "
            f"(limit {FAILURE_RATE_LIMIT:.0%})", failures)

    completed = [result for result in results if result is not None]
    stacked = {key: np.stack([result[key] for result in completed])
               for key in ('point_lower', 'point_upper', 'ci_lower', 'ci_upper')}
    min_gps = min(result['min_gps'] for result in completed)

    rows = []
    for c, contrast in enumerate(contrasts):
        for s, spec in enumerate(specs):
            true_lower, true_upper = truth[c, s]
            est_lower = stacked['point_lower'][:, c, s]
            est_upper = stacked['point_upper'][:, c, s]
            ci_lower = stacked['ci_lower'][:, c, s]
            ci_upper = stacked['ci_upper'][:, c, s]
            covered = (ci_lower <= true_lower) & (ci_upper >= true_upper)
            rows.append(StudyRow(
                scenario=config.name,
                contrast=contrast.label,
                gamma0=spec.gamma0,
                Gamma0=spec.Gamma0,
                true_lower=float(true_lower),
                true_upper=float(true_upper),
                pct_bias_lower=_pct_bias(est_lower, true_lower),
                pct_bias_upper=_pct_bias(est_upper, true_upper),
                non_coverage=float(1.0 - covered.mean()),
                median_point_lower=float(np.median(est_lower)),
                median_point_upper=float(np.median(est_upper)),
                median_ci_lower=float(np.median(ci_lower)),
                median_ci_upper=float(np.median(ci_upper)),
                overlap_warning=bool(min_gps < config.gps_warn),
                min_fitted_gps=min_gps,
                replicates=len(completed),
                failed_replicates=len(failures),
            ))

    if min_gps < config.gps_warn:
        logger.warning(f"Scenario {config.name}: fitted GPS as low as {min_gps:.2e}; "
                       f"interpret results with caution under limited overlap")

    metadata = {
        'scenario': config.name,
        'k2': config.k2,
        'k3': config.k3,
        'n': config.n,
        'reps': config.reps,
        'bootstrap_reps': config.bootstrap.reps,
        'alpha': config.bootstrap.alpha,
        'seed': int(config.seed),
        'n_oracle': config.n_oracle,
        'oracle_seed': int(config.effective_oracle_seed),
        'oracle_monte_carlo_error': oracle_monte_carlo_error(config.n_oracle),
        'x3_scale': config.x3_scale,
        'gps_family': 'mlogit',
        'quantile_method': QUANTILE_METHOD,
        'pct_bias_definition': '100 * mean(estimate - true bound) / SD(estimate), SD with ddof=1',
        'non_coverage_definition': 'share of replicates whose CI does not contain the whole true interval',
    }
    logger.info(f"Scenario {config.name} complete: {len(completed)} replicates, {len(failures)} failed")
    return StudyReport(rows=tuple(rows), metadata=metadata, failures=tuple(failures))
