"""
Sensitivity bounds and interval estimation.
Computes per-unit weight boxes under the risk-ratio and odds-ratio marginal sensitivity
models and extremizes the shifted stabilized IPW estimate over them.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logit

from core import (
    ContrastSpec,
    IntervalEstimate,
    ObservationalDataset,
    PositivityError,
    SensitivityAnalysisError,
)

logger = logging.getLogger(__name__)

MODEL_FAMILIES = ('risk-ratio', 'odds-ratio')
BRUTE_FORCE_LIMIT = 20


class DomainError(SensitivityAnalysisError):
    """A propensity value lies outside the open unit interval."""


@dataclass(frozen=True)
class SensitivitySpec:
    """Log-scale sensitivity parameter gamma0 (Gamma0 = exp(gamma0)) and model family."""
    gamma0: float = 0.0
    model_family: str = 'risk-ratio'

    def __post_init__(self):
        if not np.isfinite(self.gamma0) or self.gamma0 < 0:
            raise ValueError(f"gamma0 must be a finite value >= 0, got {self.gamma0}")
        if self.model_family not in MODEL_FAMILIES:
            raise ValueError(f"model_family must be one of {', '.join(MODEL_FAMILIES)}")
        object.__setattr__(self, 'gamma0', float(self.gamma0))

    @property
    def Gamma0(self) -> float:
        return float(np.exp(self.gamma0))

    @classmethod
    def from_Gamma0(cls, Gamma0: float, model_family: str = 'risk-ratio') -> 'SensitivitySpec':
        if Gamma0 < 1:
            raise ValueError(f"Gamma0 must be >= 1, got {Gamma0}")
        return cls(float(np.log(Gamma0)), model_family)


@dataclass(frozen=True)
class UnitBounds:
    """Admissible range [z_lo, z_hi] of z = exp(l) for each unit's received arm."""
    z_lo: np.ndarray
    z_hi: np.ndarray

    def __post_init__(self):
        z_lo = np.array(self.z_lo, dtype=float, copy=True).reshape(-1)
        z_hi = np.array(self.z_hi, dtype=float, copy=True).reshape(-1)
        if z_lo.shape != z_hi.shape:
            raise ValueError("z_lo and z_hi must have the same length")
        if np.any(z_lo <= 0) or np.any(z_lo > z_hi):
            raise ValueError("Bounds must satisfy 0 < z_lo <= z_hi")
        z_lo.setflags(write=False)
        z_hi.setflags(write=False)
        object.__setattr__(self, 'z_lo', z_lo)
        object.__setattr__(self, 'z_hi', z_hi)

    def implied_propensity_range(self, gps_received: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Range of the true propensity e_beta / z over the box."""
        e = np.asarray(gps_received, dtype=float)
        return e / self.z_hi, e / self.z_lo


def compute_z_bounds(gps_received: np.ndarray, spec: SensitivitySpec) -> UnitBounds:
    """
    Per-unit bounds on z under the chosen sensitivity model.

    Risk-ratio: z in [max(e_beta, 1/Gamma0), Gamma0], so e_beta / z stays in (0, 1].
    Odds-ratio: the true propensity lies in [expit(logit e - lambda), expit(logit e + lambda)]
    with lambda = gamma0, mapped onto z = e_beta / e.
    """
    e = np.asarray(gps_received, dtype=float).reshape(-1)
    if not np.all(np.isfinite(e)) or np.any(e <= 0.0) or np.any(e >= 1.0):
        raise DomainError("Received-arm propensities must lie strictly inside (0, 1)")

    if spec.model_family == 'risk-ratio':
        Gamma0 = spec.Gamma0
        z_lo = np.maximum(e, 1.0 / Gamma0)
        z_hi = np.full_like(e, Gamma0)
    else:
        log_odds = logit(e)
        e_hi = expit(log_odds + spec.gamma0)
        e_lo = expit(log_odds - spec.gamma0)
        z_lo = e / e_hi
        z_hi = e / e_lo
    return UnitBounds(np.minimum(z_lo, z_hi), z_hi)


unit_bounds = compute_z_bounds


def shifted_propensity(e_beta, z):
    """The candidate true propensity e_beta / z implied by z = exp(l)."""
    return np.asarray(e_beta, dtype=float) / np.asarray(z, dtype=float)


def _check_extremize_inputs(y, u, z_lo, z_hi, direction):
    y = np.asarray(y, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    z_lo = np.asarray(z_lo, dtype=float).reshape(-1)
    z_hi = np.asarray(z_hi, dtype=float).reshape(-1)
    if y.size == 0:
        raise ValueError("Cannot extremize a weighted mean over zero units")
    if not (y.size == u.size == z_lo.size == z_hi.size):
        raise ValueError("y, u, z_lo and z_hi must have equal lengths")
    if np.any(u <= 0):
        raise ValueError("Base weights u must be positive")
    if np.any(z_lo <= 0) or np.any(z_lo > z_hi):
        raise ValueError("Bounds must satisfy 0 < z_lo <= z_hi")
    if direction not in ('min', 'max'):
        raise ValueError("direction must be 'min' or 'max'")
    return y, u, z_lo, z_hi


def _suffix_sums(values: np.ndarray) -> np.ndarray:
    """s[t] = sum(values[t:]) for t = 0..m, with s[m] = 0."""
    return np.append(np.cumsum(values[::-1])[::-1], 0.0)


def _prefix_sums(values: np.ndarray) -> np.ndarray:
    """p[t] = sum(values[:t]) for t = 0..m."""
    return np.concatenate([[0.0], np.cumsum(values)])


def extremize_weighted_mean(y, u, z_lo, z_hi, direction: str = 'max') -> Tuple[float, np.ndarray]:
    """
    Exact optimum of M(z) = sum(y*u*z) / sum(u*z) over the box z_lo <= z <= z_hi.

    The optimizer gives the upper bound to a prefix of units ranked by y (descending for
    max, ascending for min) and the lower bound to the rest, so all m+1 thresholds are
    scored with prefix sums.

    Returns:
        (optimal value, optimizing z in the original unit order)
    """
    y, u, z_lo, z_hi = _check_extremize_inputs(y, u, z_lo, z_hi, direction)

    if np.all(y == y[0]):
        return float(y[0]), z_lo.copy()

    order = np.argsort(-y if direction == 'max' else y, kind='stable')
    ys, us = y[order], u[order]
    w_hi, w_lo = us * z_hi[order], us * z_lo[order]

    numerators = _prefix_sums(ys * w_hi) + _suffix_sums(ys * w_lo)
    denominators = _prefix_sums(w_hi) + _suffix_sums(w_lo)
    scores = numerators / denominators
    threshold = int(np.argmax(scores) if direction == 'max' else np.argmin(scores))

    z = np.empty_like(y)
    z[order] = np.where(np.arange(y.size) < threshold, z_hi[order], z_lo[order])
    value = float(np.dot(y * u, z) / np.dot(u, z))
    return value, z


def brute_force_extremum(y, u, z_lo, z_hi, direction: str = 'max') -> Tuple[float, np.ndarray]:
    """Exhaustive evaluation of all 2^m box corners; an audit oracle for small m."""
    y, u, z_lo, z_hi = _check_extremize_inputs(y, u, z_lo, z_hi, direction)
    m = y.size
    if m > BRUTE_FORCE_LIMIT:
        raise ValueError(f"Corner enumeration is limited to {BRUTE_FORCE_LIMIT} units, got {m}")

    bits = ((np.arange(2 ** m)[:, None] >> np.arange(m)) & 1).astype(bool)
    corners = np.where(bits, z_hi, z_lo)
    values = (corners @ (y * u)) / (corners @ u)
    best = int(np.argmax(values) if direction == 'max' else np.argmin(values))
    return float(values[best]), corners[best].copy()


def _check_gps(dataset: ObservationalDataset, gps: np.ndarray) -> np.ndarray:
    gps = np.asarray(gps, dtype=float)
    if gps.shape != (dataset.n, dataset.n_arms):
        raise ValueError(f"GPS matrix has shape {gps.shape}, expected ({dataset.n}, {dataset.n_arms})")
    return gps


def sipw_arm_means(dataset: ObservationalDataset, gps: np.ndarray) -> np.ndarray:
    """Plain stabilized IPW mean of each arm; NaN for empty arms."""
    gps = _check_gps(dataset, gps)
    means = np.full(dataset.n_arms, np.nan)
    for arm in range(1, dataset.n_arms + 1):
        mask = dataset.arm_mask(arm)
        if mask.any():
            weights = 1.0 / gps[mask, arm - 1]
            means[arm - 1] = float(np.dot(dataset.outcome[mask], weights) / weights.sum())
    return means


def arm_extremes(dataset: ObservationalDataset, gps: np.ndarray, spec: SensitivitySpec,
                 arms: Optional[Iterable[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Minimum and maximum shifted SIPW mean of each requested arm.

    Returns:
        (lows, highs), length-J arrays with NaN for arms not requested
    """
    gps = _check_gps(dataset, gps)
    arms = range(1, dataset.n_arms + 1) if arms is None else arms
    lows = np.full(dataset.n_arms, np.nan)
    highs = np.full(dataset.n_arms, np.nan)

    for arm in arms:
        mask = dataset.arm_mask(arm)
        if not mask.any():
            raise PositivityError(f"Arm {arm} has no units; its mean is not estimable")
        received = gps[mask, arm - 1]
        bounds = compute_z_bounds(received, spec)
        y = dataset.outcome[mask]
        u = 1.0 / received
        lows[arm - 1], _ = extremize_weighted_mean(y, u, bounds.z_lo, bounds.z_hi, 'min')
        highs[arm - 1], _ = extremize_weighted_mean(y, u, bounds.z_lo, bounds.z_hi, 'max')

    return lows, highs


def combine_contrast(contrast: ContrastSpec, lows: np.ndarray, highs: np.ndarray) -> Tuple[float, float]:
    """Interval of sum_a c_a m(a) when each arm mean ranges independently over [low, high]."""
    c = contrast.c
    active = c != 0
    upper = float(np.sum(np.where(c[active] > 0, c[active] * highs[active], c[active] * lows[active])))
    lower = float(np.sum(np.where(c[active] > 0, c[active] * lows[active], c[active] * highs[active])))
    return min(lower, upper), max(lower, upper)


def estimate_interval(dataset: ObservationalDataset, gps: np.ndarray, contrast: ContrastSpec,
                      spec: SensitivitySpec) -> IntervalEstimate:
    """Partially identified point-estimate interval of tau(c) under the sensitivity model."""
    if contrast.n_arms != dataset.n_arms:
        raise ValueError(f"Contrast has {contrast.n_arms} entries, dataset has {dataset.n_arms} arms")
    arms = [int(a) + 1 for a in np.flatnonzero(contrast.c)]
    lows, highs = arm_extremes(dataset, gps, spec, arms)
    lower, upper = combine_contrast(contrast, lows, highs)
    logger.debug(f"{contrast.label} at gamma0={spec.gamma0:g} ({spec.model_family}): ({lower:.6f}, {upper:.6f})")
    return IntervalEstimate(
        point_lower=lower,
        point_upper=upper,
        gamma0=spec.gamma0,
        metadata={'contrast': contrast.label, 'model_family': spec.model_family},
    )


def sweep_point_intervals(dataset: ObservationalDataset, gps: np.ndarray, contrasts: Sequence[ContrastSpec],
                          specs: Sequence[SensitivitySpec]) -> List[List[IntervalEstimate]]:
    """
    Point intervals for every contrast (outer) and sensitivity setting (inner).

    Arm extremes are computed once per setting and shared by all contrasts.
    """
    for contrast in contrasts:
        if contrast.n_arms != dataset.n_arms:
            raise ValueError(f"Contrast {contrast.label} has {contrast.n_arms} entries, dataset has {dataset.n_arms} arms")
    arms = sorted({int(a) + 1 for contrast in contrasts for a in np.flatnonzero(contrast.c)})
    results: List[List[IntervalEstimate]] = [[] for _ in contrasts]
    for spec in specs:
        lows, highs = arm_extremes(dataset, gps, spec, arms)
        for c, contrast in enumerate(contrasts):
            lower, upper = combine_contrast(contrast, lows, highs)
            results[c].append(IntervalEstimate(
                point_lower=lower,
                point_upper=upper,
                gamma0=spec.gamma0,
                metadata={'contrast': contrast.label, 'model_family': spec.model_family},
            ))
    return results
