"""
Generalized propensity score models.
Fits binary logistic, multinomial logit and continuation-ratio models by Newton iterations
and predicts per-unit arm probabilities.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from core import ObservationalDataset, SensitivityAnalysisError

logger = logging.getLogger(__name__)

FAMILIES = ('logistic', 'mlogit', 'cratio')
FAMILY_ALIASES = {
    'logistic': 'logistic', 'binary-logistic': 'logistic',
    'mlogit': 'mlogit', 'multinomial-logit': 'mlogit',
    'cratio': 'cratio', 'continuation-ratio': 'cratio',
}
MODEL_SCHEMA_VERSION = 1
PROB_FLOOR = 1e-12
SEPARATION_LIMIT = 30.0

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray, np.ndarray]]


class GpsFitError(SensitivityAnalysisError):
    """The propensity model could not be fitted."""


class SingularSystemError(GpsFitError):
    """Rank-deficient design or singular Newton system."""


class StageDegenerateError(GpsFitError):
    """A continuation-ratio stage has a response of a single class."""

    def __init__(self, stage: int, message: str):
        super().__init__(message)
        self.stage = stage


class NonConvergedModelError(GpsFitError):
    """Prediction was requested from a model that did not converge."""


class DimensionMismatchError(SensitivityAnalysisError):
    """Covariate dimension does not match the fitted model."""


@dataclass(frozen=True)
class GpsFitOptions:
    """Optimizer and model-variant settings shared by all families."""
    max_iter: int = 100
    coef_tol: float = 1e-8
    loglik_tol: float = 1e-10
    max_halvings: int = 20
    ridge: float = 0.0
    cr_direction: str = 'forward'
    cr_shared_slopes: bool = False

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.cr_direction not in ('forward', 'backward'):
            raise ValueError("cr_direction must be 'forward' or 'backward'")


@dataclass(frozen=True)
class GpsModel:
    """
    A fitted propensity model.

    Coefficient layout by family:
        logistic: shape (d,), modeling P(A=2 | x)
        mlogit:   shape (J-1, d), row k for arm k+2 against reference arm 1
        cratio:   shape (J-1, d), row s for stage s+1; with shared slopes only column 0 varies
    """
    family: str
    coefficients: np.ndarray
    n_arms: int
    converged: bool
    iterations: int
    log_likelihood: float
    n_obs: int = 0
    ridge: float = 0.0
    direction: str = 'forward'
    shared_slopes: bool = False
    warnings: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        coefficients = np.array(self.coefficients, dtype=float, copy=True)
        coefficients.setflags(write=False)
        object.__setattr__(self, 'coefficients', coefficients)
        object.__setattr__(self, 'warnings', tuple(self.warnings))

    @property
    def d(self) -> int:
        return int(self.coefficients.shape[-1])

    def parameter_vector(self) -> np.ndarray:
        """Free parameters in the order used by the model's log-likelihood."""
        if self.family == 'cratio' and self.shared_slopes:
            return np.concatenate([self.coefficients[:, 0], self.coefficients[0, 1:]])
        return self.coefficients.reshape(-1).copy()

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': MODEL_SCHEMA_VERSION,
            'family': self.family,
            'n_arms': self.n_arms,
            'coefficients': self.coefficients.tolist(),
            'converged': self.converged,
            'iterations': self.iterations,
            'log_likelihood': self.log_likelihood,
            'n_obs': self.n_obs,
            'ridge': self.ridge,
            'direction': self.direction,
            'shared_slopes': self.shared_slopes,
            'warnings': list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'GpsModel':
        version = payload.get('schema_version')
        if version != MODEL_SCHEMA_VERSION:
            raise ValueError(f"Unsupported GPS model schema version: {version}")
        return cls(
            family=payload['family'],
            coefficients=np.asarray(payload['coefficients'], dtype=float),
            n_arms=int(payload['n_arms']),
            converged=bool(payload['converged']),
            iterations=int(payload['iterations']),
            log_likelihood=float(payload['log_likelihood']),
            n_obs=int(payload.get('n_obs', 0)),
            ridge=float(payload.get('ridge', 0.0)),
            direction=payload.get('direction', 'forward'),
            shared_slopes=bool(payload.get('shared_slopes', False)),
            warnings=tuple(payload.get('warnings', ())),
        )

    @classmethod
    def from_json(cls, text: str) -> 'GpsModel':
        return cls.from_dict(json.loads(text))


@dataclass
class _NewtonResult:
    params: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    hessian: np.ndarray


# --- Log-likelihood objectives: each returns (loglik, gradient, hessian) ---

def _penalty_mask(d: int, has_intercept: bool, rows: int = 1) -> np.ndarray:
    mask = np.ones((rows, d))
    if has_intercept:
        mask[:, 0] = 0.0
    return mask.reshape(-1)


def _logistic_objective(X: np.ndarray, y: np.ndarray, ridge: float = 0.0,
                        penalty_mask: Optional[np.ndarray] = None) -> Objective:
    mask = np.ones(X.shape[1]) if penalty_mask is None else penalty_mask

    def evaluate(beta: np.ndarray):
        eta = X @ beta
        loglik = float(np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))
        p = expit(eta)
        gradient = X.T @ (y - p)
        hessian = -(X.T * (p * (1.0 - p))) @ X
        if ridge > 0:
            loglik -= 0.5 * ridge * float(np.sum(mask * beta ** 2))
            gradient = gradient - ridge * mask * beta
            hessian = hessian - np.diag(ridge * mask)
        return loglik, gradient, hessian

    return evaluate


def _mlogit_objective(X: np.ndarray, treatment: np.ndarray, n_arms: int, ridge: float = 0.0,
                      penalty_mask: Optional[np.ndarray] = None) -> Objective:
    n, d = X.shape
    k = n_arms - 1
    indicators = np.zeros((n, n_arms))
    indicators[np.arange(n), treatment - 1] = 1.0
    mask = np.ones(k * d) if penalty_mask is None else penalty_mask

    def evaluate(theta: np.ndarray):
        B = theta.reshape(k, d)
        eta = np.column_stack([np.zeros(n), X @ B.T])
        log_prob = eta - logsumexp(eta, axis=1, keepdims=True)
        loglik = float(np.sum(indicators * log_prob))
        prob = np.exp(log_prob)
        residual = indicators[:, 1:] - prob[:, 1:]
        gradient = (residual.T @ X).reshape(-1)
        hessian = np.zeros((k * d, k * d))
        for a in range(k):
            for b in range(a, k):
                weight = prob[:, a + 1] * ((1.0 if a == b else 0.0) - prob[:, b + 1])
                block = -(X.T * weight) @ X
                hessian[a * d:(a + 1) * d, b * d:(b + 1) * d] = block
                if a != b:
                    hessian[b * d:(b + 1) * d, a * d:(a + 1) * d] = block.T
        if ridge > 0:
            loglik -= 0.5 * ridge * float(np.sum(mask * theta ** 2))
            gradient = gradient - ridge * mask * theta
            hessian = hessian - np.diag(ridge * mask)
        return loglik, gradient, hessian

    return evaluate


def _newton(objective: Objective, start: np.ndarray, options: GpsFitOptions, label: str) -> _NewtonResult:
    """
    Maximize a concave log-likelihood with Newton steps and step-halving.

    The log-likelihood never decreases between accepted iterates.
    """
    params = np.array(start, dtype=float)
    loglik, gradient, hessian = objective(params)
    converged = False
    iterations = 0

    for iterations in range(1, options.max_iter + 1):
        try:
            step = np.linalg.solve(-hessian, gradient)
        except np.linalg.LinAlgError as e:
            if iterations == 1:
                raise SingularSystemError(f"{label}: singular Newton system at the starting values: {e}")
            logger.debug(f"{label}: Newton system became singular at iteration {iterations}")
            break
        if not np.all(np.isfinite(step)):
            if iterations == 1:
                raise SingularSystemError(f"{label}: non-finite Newton step at the starting values")
            logger.debug(f"{label}: non-finite Newton step at iteration {iterations}")
            break

        if np.max(np.abs(step)) < options.coef_tol:
            params = params + step
            loglik, gradient, hessian = objective(params)
            converged = True
            break

        scale = 1.0
        accepted = False
        slack = 64 * np.finfo(float).eps * max(1.0, abs(loglik))
        for _ in range(options.max_halvings + 1):
            candidate = params + scale * step
            cand_loglik, cand_gradient, cand_hessian = objective(candidate)
            if np.isfinite(cand_loglik) and cand_loglik >= loglik - slack:
                accepted = True
                break
            scale *= 0.5

        if not accepted:
            logger.debug(f"{label}: line search failed at iteration {iterations}")
            break

        change = np.max(np.abs(scale * step))
        relative = abs(cand_loglik - loglik) / max(abs(loglik), 1e-300)
        params, loglik, gradient, hessian = candidate, cand_loglik, cand_gradient, cand_hessian
        logger.debug(f"{label}: iteration {iterations} loglik={loglik:.12g} step={change:.3g} scale={scale:g}")

        if change < options.coef_tol or relative < options.loglik_tol:
            converged = True
            # one refinement step so the returned gradient sits at the Newton fixed point
            try:
                polish = np.linalg.solve(-hessian, gradient)
                candidate = params + polish
                cand_loglik, cand_gradient, cand_hessian = objective(candidate)
                if np.isfinite(cand_loglik) and cand_loglik >= loglik:
                    params, loglik, gradient, hessian = candidate, cand_loglik, cand_gradient, cand_hessian
            except np.linalg.LinAlgError:
                pass
            break

    return _NewtonResult(params, converged, iterations, loglik, hessian)


def _check_rank(X: np.ndarray, label: str) -> None:
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise SingularSystemError(f"{label}: rank-deficient design (rank {rank} < {X.shape[1]} columns)")


def _separation_warnings(X: np.ndarray, coefficients: np.ndarray, label: str) -> List[str]:
    """Flag any coefficient whose magnitude on the standardized covariate scale exceeds the limit."""
    scale = X.std(axis=0)
    varying = scale > 0
    standardized = np.abs(np.atleast_2d(coefficients)[:, varying] * scale[varying])
    if standardized.size and np.max(standardized) > SEPARATION_LIMIT:
        message = (f"{label}: possible complete separation, standardized coefficient "
                   f"{np.max(standardized):.1f} exceeds {SEPARATION_LIMIT:g}")
        logger.warning(message)
        return [message]
    return []


def _fit_logistic_core(X: np.ndarray, y: np.ndarray, options: GpsFitOptions, has_intercept: bool,
                       label: str, penalty_mask: Optional[np.ndarray] = None) -> Tuple[_NewtonResult, List[str]]:
    _check_rank(X, label)
    mask = _penalty_mask(X.shape[1], has_intercept) if penalty_mask is None else penalty_mask
    start = np.zeros(X.shape[1])
    if has_intercept and penalty_mask is None:
        share = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        start[0] = np.log(share / (1 - share))
    result = _newton(_logistic_objective(X, y, options.ridge, mask), start, options, label)
    warnings = _separation_warnings(X, result.params, label)
    if not result.converged:
        warnings.append(f"{label}: no convergence within {options.max_iter} iterations")
    return result, warnings


def fit_binary_logistic(dataset: ObservationalDataset, options: Optional[GpsFitOptions] = None) -> GpsModel:
    """Logistic regression of 1{A=2} on the covariates by IRLS."""
    options = options or GpsFitOptions()
    if dataset.n_arms != 2:
        raise GpsFitError(f"Binary logistic model needs J=2 arms, got {dataset.n_arms}")

    y = (dataset.treatment == 2).astype(float)
    result, warnings = _fit_logistic_core(dataset.covariates, y, options, dataset.has_intercept, 'logistic')

    model = GpsModel(
        family='logistic',
        coefficients=result.params,
        n_arms=2,
        converged=result.converged and not warnings,
        iterations=result.iterations,
        log_likelihood=result.log_likelihood,
        n_obs=dataset.n,
        ridge=options.ridge,
        warnings=tuple(warnings),
    )
    logger.info(f"Fitted binary logistic GPS: converged={model.converged}, iterations={model.iterations}, "
                f"loglik={model.log_likelihood:.4f}")
    return model


def fit_multinomial_logit(dataset: ObservationalDataset, options: Optional[GpsFitOptions] = None) -> GpsModel:
    """Baseline-category logit with arm 1 as reference, Newton on all (J-1)*d parameters."""
    options = options or GpsFitOptions()
    J, d = dataset.n_arms, dataset.d
    if J < 2:
        raise GpsFitError("Multinomial logit needs at least two arms")
    X = dataset.covariates
    _check_rank(X, 'mlogit')

    start = np.zeros((J - 1, d))
    if dataset.has_intercept:
        shares = np.clip(dataset.arm_counts() / dataset.n, 1e-6, None)
        start[:, 0] = np.log(shares[1:] / shares[0])

    mask = _penalty_mask(d, dataset.has_intercept, rows=J - 1)
    objective = _mlogit_objective(X, dataset.treatment, J, options.ridge, mask)
    result = _newton(objective, start.reshape(-1), options, 'mlogit')
    coefficients = result.params.reshape(J - 1, d)

    warnings = _separation_warnings(X, coefficients, 'mlogit')
    if not result.converged:
        warnings.append(f"mlogit: no convergence within {options.max_iter} iterations")

    model = GpsModel(
        family='mlogit',
        coefficients=coefficients,
        n_arms=J,
        converged=result.converged and not warnings,
        iterations=result.iterations,
        log_likelihood=result.log_likelihood,
        n_obs=dataset.n,
        ridge=options.ridge,
        warnings=tuple(warnings),
    )
    logger.info(f"Fitted multinomial logit GPS (J={J}): converged={model.converged}, "
                f"iterations={model.iterations}, loglik={model.log_likelihood:.4f}")
    return model


def _stage_labels(treatment: np.ndarray, n_arms: int, direction: str) -> np.ndarray:
    """Arm labels in the order the stages visit them."""
    return treatment if direction == 'forward' else n_arms + 1 - treatment


def _shared_slope_design(X: np.ndarray, stage_labels: np.ndarray, n_arms: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked person-stage rows: stage dummies followed by the non-intercept covariates."""
    blocks, responses = [], []
    for stage in range(1, n_arms):
        at_risk = stage_labels >= stage
        dummies = np.zeros((int(at_risk.sum()), n_arms - 1))
        dummies[:, stage - 1] = 1.0
        blocks.append(np.column_stack([dummies, X[at_risk, 1:]]))
        responses.append((stage_labels[at_risk] == stage).astype(float))
    return np.vstack(blocks), np.concatenate(responses)


def fit_continuation_ratio(dataset: ObservationalDataset, ordered: bool = True,
                           options: Optional[GpsFitOptions] = None) -> GpsModel:
    """
    Continuation-ratio model for ordinal treatments.

    Forward stage s models P(A=s | A>=s, X) on the units with A>=s. The backward direction
    runs the same construction on reversed arm order.
    """
    options = options or GpsFitOptions()
    J, d = dataset.n_arms, dataset.d
    if J < 3:
        raise GpsFitError(f"Continuation-ratio model needs J>=3 arms, got {J}")
    if not ordered:
        raise GpsFitError("Continuation-ratio model requires ordinal treatment levels")

    X = dataset.covariates
    labels = _stage_labels(dataset.treatment, J, options.cr_direction)

    for stage in range(1, J):
        at_risk = labels >= stage
        response = labels[at_risk] == stage
        if response.all() or not response.any():
            raise StageDegenerateError(
                stage, f"cratio: stage {stage} has a degenerate response (all one class among {int(at_risk.sum())} units)")

    warnings: List[str] = []
    if options.cr_shared_slopes:
        if not dataset.has_intercept:
            raise GpsFitError("Shared-slope continuation-ratio model needs an intercept column")
        design, response = _shared_slope_design(X, labels, J)
        mask = np.concatenate([np.zeros(J - 1), np.ones(d - 1)])
        result, warnings = _fit_logistic_core(design, response, options, False, 'cratio-shared', penalty_mask=mask)
        coefficients = np.zeros((J - 1, d))
        coefficients[:, 0] = result.params[:J - 1]
        coefficients[:, 1:] = result.params[J - 1:]
        converged = result.converged
        iterations = result.iterations
        loglik = result.log_likelihood
    else:
        coefficients = np.zeros((J - 1, d))
        converged, iterations, loglik = True, 0, 0.0
        for stage in range(1, J):
            at_risk = labels >= stage
            response = (labels[at_risk] == stage).astype(float)
            result, stage_warnings = _fit_logistic_core(
                X[at_risk], response, options, dataset.has_intercept, f"cratio stage {stage}")
            coefficients[stage - 1] = result.params
            converged = converged and result.converged
            iterations = max(iterations, result.iterations)
            loglik += result.log_likelihood
            warnings.extend(stage_warnings)

    model = GpsModel(
        family='cratio',
        coefficients=coefficients,
        n_arms=J,
        converged=converged and not warnings,
        iterations=iterations,
        log_likelihood=loglik,
        n_obs=dataset.n,
        ridge=options.ridge,
        direction=options.cr_direction,
        shared_slopes=options.cr_shared_slopes,
        warnings=tuple(warnings),
    )
    logger.info(f"Fitted continuation-ratio GPS (J={J}, {options.cr_direction}, "
                f"{'shared' if options.cr_shared_slopes else 'stage-specific'} slopes): "
                f"converged={model.converged}, loglik={model.log_likelihood:.4f}")
    return model


def fit_gps(dataset: ObservationalDataset, family: str, options: Optional[GpsFitOptions] = None) -> GpsModel:
    """Fit the named model family."""
    name = FAMILY_ALIASES.get(family)
    if name is None:
        raise ValueError(f"Unknown GPS family '{family}', expected one of {', '.join(FAMILIES)}")
    if name == 'logistic':
        return fit_binary_logistic(dataset, options)
    if name == 'mlogit':
        return fit_multinomial_logit(dataset, options)
    return fit_continuation_ratio(dataset, ordered=True, options=options)


def _assemble_continuation(stage_prob: np.ndarray) -> np.ndarray:
    """Arm probabilities from stage stopping probabilities, shape (n, J-1) -> (n, J)."""
    n, stages = stage_prob.shape
    survival = np.ones(n)
    probs = np.zeros((n, stages + 1))
    for s in range(stages):
        probs[:, s] = stage_prob[:, s] * survival
        survival = survival * (1.0 - stage_prob[:, s])
    probs[:, stages] = survival
    return probs


def _raw_probabilities(model: GpsModel, X: np.ndarray) -> np.ndarray:
    if model.family == 'logistic':
        p = expit(X @ model.coefficients)
        return np.column_stack([1.0 - p, p])
    if model.family == 'mlogit':
        eta = np.column_stack([np.zeros(X.shape[0]), X @ model.coefficients.T])
        return softmax(eta, axis=1)
    if model.family == 'cratio':
        probs = _assemble_continuation(expit(X @ model.coefficients.T))
        return probs if model.direction == 'forward' else probs[:, ::-1]
    raise ValueError(f"Unknown GPS family '{model.family}'")


def predict_gps(model: GpsModel, covariates: np.ndarray, allow_unconverged: bool = False) -> np.ndarray:
    """
    Per-unit arm probabilities.

    Returns:
        n x J row-stochastic matrix, clamped to [1e-12, 1-1e-12] and renormalized
    """
    X = np.atleast_2d(np.asarray(covariates, dtype=float))
    if X.shape[1] != model.d:
        raise DimensionMismatchError(f"Covariates have {X.shape[1]} columns, model expects {model.d}")
    if not model.converged and not allow_unconverged:
        raise NonConvergedModelError(
            f"{model.family} model did not converge ({'; '.join(model.warnings) or 'iteration cap reached'})")

    probs = np.clip(_raw_probabilities(model, X), PROB_FLOOR, 1.0 - PROB_FLOOR)
    return probs / probs.sum(axis=1, keepdims=True)


def _model_objective(model: GpsModel, dataset: ObservationalDataset) -> Objective:
    """The log-likelihood the model maximized, as a function of its parameter vector."""
    X = dataset.covariates
    if model.family == 'logistic':
        mask = _penalty_mask(X.shape[1], dataset.has_intercept)
        return _logistic_objective(X, (dataset.treatment == 2).astype(float), model.ridge, mask)
    if model.family == 'mlogit':
        mask = _penalty_mask(X.shape[1], dataset.has_intercept, rows=model.n_arms - 1)
        return _mlogit_objective(X, dataset.treatment, model.n_arms, model.ridge, mask)

    J, d = model.n_arms, X.shape[1]
    labels = _stage_labels(dataset.treatment, J, model.direction)
    if model.shared_slopes:
        design, response = _shared_slope_design(X, labels, J)
        mask = np.concatenate([np.zeros(J - 1), np.ones(d - 1)])
        return _logistic_objective(design, response, model.ridge, mask)

    stage_objectives = []
    for stage in range(1, J):
        at_risk = labels >= stage
        stage_objectives.append(_logistic_objective(
            X[at_risk], (labels[at_risk] == stage).astype(float), model.ridge,
            _penalty_mask(d, dataset.has_intercept)))

    def evaluate(params: np.ndarray):
        rows = params.reshape(J - 1, d)
        parts = [objective(rows[s]) for s, objective in enumerate(stage_objectives)]
        loglik = sum(part[0] for part in parts)
        gradient = np.concatenate([part[1] for part in parts])
        hessian = np.zeros((len(params), len(params)))
        for s, part in enumerate(parts):
            hessian[s * d:(s + 1) * d, s * d:(s + 1) * d] = part[2]
        return loglik, gradient, hessian

    return evaluate


def log_likelihood_at(model: GpsModel, dataset: ObservationalDataset, params: np.ndarray) -> float:
    """Log-likelihood at an arbitrary parameter vector in the model's parameterization."""
    return _model_objective(model, dataset)(np.asarray(params, dtype=float))[0]


def log_likelihood_gradient(model: GpsModel, dataset: ObservationalDataset,
                            params: Optional[np.ndarray] = None) -> np.ndarray:
    """Analytic gradient of the log-likelihood, at the fitted parameters unless `params` is given."""
    params = model.parameter_vector() if params is None else np.asarray(params, dtype=float)
    return _model_objective(model, dataset)(params)[1]


def standard_errors(model: GpsModel, dataset: ObservationalDataset) -> np.ndarray:
    """Wald standard errors from the observed information, shaped like the parameter vector."""
    hessian = _model_objective(model, dataset)(model.parameter_vector())[2]
    return np.sqrt(np.diag(np.linalg.inv(-hessian)))
