"""
Core data model for the sensitivity analysis toolkit.
Handles dataset ingestion from CSV, treatment re-encoding, covariate expansion and validation.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

INTERCEPT_NAME = '(intercept)'
CSV_FLOAT_FORMAT = '%.17g'


def worker_count(threads: int) -> int:
    """Worker threads to start; 0 means one per CPU."""
    return int(threads) or os.cpu_count() or 1


class SensitivityAnalysisError(Exception):
    """Base class for every error raised by this toolkit."""


class SchemaError(SensitivityAnalysisError):
    """The CSV does not match the declared column roles."""


class CsvParseError(SensitivityAnalysisError):
    """The file or one of its cells could not be parsed."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column


class DatasetValidationError(SensitivityAnalysisError):
    """The dataset violates one or more invariants."""

    def __init__(self, findings: List['Finding']):
        self.findings = findings
        summary = '; '.join(f.message for f in findings if f.severity == 'error')
        super().__init__(f"Dataset validation failed: {summary}")


class PositivityError(SensitivityAnalysisError):
    """An arm needed by the estimand contains no units."""


@dataclass(frozen=True)
class Finding:
    """A single validation finding."""
    severity: str
    message: str
    row: Optional[int] = None


@dataclass(frozen=True)
class DatasetSchema:
    """
    Column roles for CSV ingestion.

    `categorical` maps a covariate column to its level list; the first level is the
    reference and is dropped during one-hot expansion. When `treatment_levels` is
    given the arms follow that order (ordinal treatments), otherwise arms follow
    first appearance in the file.
    """
    treatment: str
    outcome: str
    covariates: Sequence[str]
    categorical: Mapping[str, Sequence[str]] = field(default_factory=dict)
    treatment_levels: Optional[Sequence[str]] = None
    ordinal: bool = False
    intercept_present: bool = False

    def __post_init__(self):
        if not self.treatment or not self.outcome:
            raise SchemaError("Schema must name one treatment column and one outcome column")
        if len(self.covariates) == 0:
            raise SchemaError("Schema must name at least one covariate column")
        unknown = [name for name in self.categorical if name not in self.covariates]
        if unknown:
            raise SchemaError(f"Categorical columns not listed as covariates: {', '.join(unknown)}")
        for name, levels in self.categorical.items():
            if len(levels) < 2:
                raise SchemaError(f"Categorical covariate '{name}' needs at least two levels")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> 'DatasetSchema':
        """Build a schema from the nested `SCHEMA__*` config mapping."""
        def as_list(value):
            if value is None or value == '':
                return None
            if isinstance(value, str):
                return [item.strip() for item in value.split(',') if item.strip()]
            return [str(item) for item in value]

        categorical = {
            str(name): as_list(levels) or []
            for name, levels in (mapping.get('categorical') or {}).items()
        }
        covariates = as_list(mapping.get('covariates')) or []
        for name in categorical:
            if name not in covariates:
                covariates.append(name)

        return cls(
            treatment=str(mapping.get('treatment') or ''),
            outcome=str(mapping.get('outcome') or ''),
            covariates=covariates,
            categorical=categorical,
            treatment_levels=as_list(mapping.get('treatment_levels')),
            ordinal=_as_bool(mapping.get('ordinal', False)),
            intercept_present=_as_bool(mapping.get('intercept_present', False)),
        )


def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ('1', 'true', 'yes', 'on')


@dataclass(frozen=True)
class ObservationalDataset:
    """
    Covariates, treatment arms and outcomes for n units.

    Treatment labels are integers 1..J. Arrays are made read-only on construction.
    """
    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    n_arms: int
    covariate_names: Sequence[str] = ()
    arm_labels: Sequence[str] = ()
    has_intercept: bool = True
    ordinal: bool = False

    def __post_init__(self):
        covariates = np.array(self.covariates, dtype=float, copy=True)
        if covariates.ndim == 1:
            covariates = covariates.reshape(-1, 1)
        treatment = np.array(self.treatment, dtype=np.int64, copy=True).reshape(-1)
        outcome = np.array(self.outcome, dtype=float, copy=True).reshape(-1)
        for array in (covariates, treatment, outcome):
            array.setflags(write=False)

        object.__setattr__(self, 'covariates', covariates)
        object.__setattr__(self, 'treatment', treatment)
        object.__setattr__(self, 'outcome', outcome)
        object.__setattr__(self, 'n_arms', int(self.n_arms))

        if not self.covariate_names:
            names = [f"x{j}" for j in range(covariates.shape[1])]
            if self.has_intercept and names:
                names[0] = INTERCEPT_NAME
            object.__setattr__(self, 'covariate_names', tuple(names))
        else:
            object.__setattr__(self, 'covariate_names', tuple(self.covariate_names))
        if not self.arm_labels:
            object.__setattr__(self, 'arm_labels', tuple(str(a) for a in range(1, self.n_arms + 1)))
        else:
            object.__setattr__(self, 'arm_labels', tuple(str(a) for a in self.arm_labels))

    @property
    def n(self) -> int:
        return int(self.outcome.shape[0])

    @property
    def d(self) -> int:
        return int(self.covariates.shape[1])

    def arm_counts(self) -> np.ndarray:
        """Units per arm, index 0 holding arm 1."""
        return np.array([int(np.sum(self.treatment == arm)) for arm in range(1, self.n_arms + 1)], dtype=np.int64)

    def arm_mask(self, arm: int) -> np.ndarray:
        return self.treatment == arm

    def subset(self, indices: np.ndarray) -> 'ObservationalDataset':
        """Rows at `indices` (repeats allowed) as a new dataset."""
        indices = np.asarray(indices, dtype=np.int64)
        return ObservationalDataset(
            covariates=self.covariates[indices],
            treatment=self.treatment[indices],
            outcome=self.outcome[indices],
            n_arms=self.n_arms,
            covariate_names=self.covariate_names,
            arm_labels=self.arm_labels,
            has_intercept=self.has_intercept,
            ordinal=self.ordinal,
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.covariates, columns=list(self.covariate_names))
        frame.insert(0, 'treatment', self.treatment)
        frame.insert(1, 'outcome', self.outcome)
        return frame

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Write the dataset so that `load_csv(path, self.dataset_schema())` reproduces it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        logger.info(f"Wrote dataset with {self.n} units to {path}")
        return path

    def dataset_schema(self) -> DatasetSchema:
        return DatasetSchema(
            treatment='treatment',
            outcome='outcome',
            covariates=list(self.covariate_names),
            treatment_levels=[str(a) for a in range(1, self.n_arms + 1)],
            ordinal=self.ordinal,
            intercept_present=self.has_intercept,
        )


@dataclass(frozen=True)
class ContrastSpec:
    """Contrast vector c over J arms defining tau(c) = sum_a c_a m(a)."""
    c: np.ndarray
    label: str = ''

    def __post_init__(self):
        c = np.array(self.c, dtype=float, copy=True).reshape(-1)
        if c.size == 0 or not np.any(c != 0):
            raise ValueError("Contrast must have at least one nonzero entry")
        if not np.all(np.isfinite(c)):
            raise ValueError("Contrast coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, 'c', c)
        if not self.label:
            object.__setattr__(self, 'label', 'c(' + ','.join(f"{v:g}" for v in c) + ')')

    @property
    def n_arms(self) -> int:
        return int(self.c.shape[0])

    @classmethod
    def pairwise(cls, i: int, j: int, n_arms: int) -> 'ContrastSpec':
        """tau_{i,j} = m(i) - m(j), arms numbered from 1."""
        if not (1 <= i <= n_arms and 1 <= j <= n_arms) or i == j:
            raise ValueError(f"Invalid pairwise contrast {i}:{j} for {n_arms} arms")
        c = np.zeros(n_arms)
        c[i - 1] = 1.0
        c[j - 1] = -1.0
        return cls(c, label=f"tau_{i},{j}")

    @classmethod
    def binary_ate(cls) -> 'ContrastSpec':
        return cls(np.array([-1.0, 1.0]), label='ATE')


@dataclass(frozen=True)
class IntervalEstimate:
    """Partially identified point-estimate interval with optional bootstrap CI."""
    point_lower: float
    point_upper: float
    gamma0: float
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    alpha: Optional[float] = None
    bootstrap_reps: Optional[int] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.point_lower > self.point_upper:
            raise ValueError(f"point_lower {self.point_lower} exceeds point_upper {self.point_upper}")
        if (self.ci_lower is None) != (self.ci_upper is None):
            raise ValueError("ci_lower and ci_upper must be given together")
        if self.ci_lower is not None and self.ci_lower > self.ci_upper:
            raise ValueError(f"ci_lower {self.ci_lower} exceeds ci_upper {self.ci_upper}")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.bootstrap_reps is not None and self.bootstrap_reps < 1:
            raise ValueError("bootstrap_reps must be positive")
        if self.gamma0 < 0:
            raise ValueError("gamma0 must be non-negative")

    @property
    def Gamma0(self) -> float:
        return float(np.exp(self.gamma0))

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.point_lower + self.point_upper)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'point_lower': self.point_lower,
            'point_upper': self.point_upper,
            'ci_lower': self.ci_lower,
            'ci_upper': self.ci_upper,
            'alpha': self.alpha,
            'bootstrap_reps': self.bootstrap_reps,
            'gamma0': self.gamma0,
            'Gamma0': self.Gamma0,
            'metadata': dict(self.metadata),
        }


def _parse_float(cell: str) -> float:
    try:
        return float(cell)
    except ValueError:
        return np.nan


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    """Parse a string column as correctly rounded floats, failing on the first bad cell with its row index."""
    raw = frame[column]
    parsed = raw.str.strip().map(_parse_float).to_numpy(dtype=float)
    bad = np.isnan(parsed)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise CsvParseError(
            f"Non-numeric value {raw.iloc[row]!r} in column '{column}' at row {row}",
            row=row, column=column,
        )
    return parsed


def _encode_treatment(values: pd.Series, schema: DatasetSchema) -> Tuple[np.ndarray, List[str]]:
    observed = [str(v).strip() for v in pd.unique(values.str.strip())]
    if schema.treatment_levels:
        levels = [str(level) for level in schema.treatment_levels]
        unseen = [level for level in observed if level not in levels]
        if unseen:
            logger.warning(f"Treatment levels not listed in schema, appended as new arms: {', '.join(unseen)}")
            levels.extend(unseen)
    else:
        levels = observed
    codes = {level: index + 1 for index, level in enumerate(levels)}
    treatment = values.str.strip().map(codes).to_numpy(dtype=np.int64)
    return treatment, levels


def load_csv(path: Union[str, Path], schema: DatasetSchema) -> ObservationalDataset:
    """
    Load and validate an observational dataset.

    Args:
        path: CSV file with a header row
        schema: column roles

    Returns:
        Validated dataset with arms re-encoded to 1..J and an intercept column prepended
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise CsvParseError(f"Could not read {path.name} as UTF-8 CSV: {e}") from e
    logger.info(f"Loaded {len(frame)} rows from {path}")

    required = [schema.treatment, schema.outcome, *schema.covariates]
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise SchemaError(f"Missing columns in {path.name}: {', '.join(missing)}")
    if frame.empty:
        raise DatasetValidationError([Finding('error', 'dataset has 0 units')])

    outcome = _numeric_column(frame, schema.outcome)

    blocks: List[np.ndarray] = []
    names: List[str] = []
    for column in schema.covariates:
        if column in schema.categorical:
            levels = [str(level) for level in schema.categorical[column]]
            values = frame[column].str.strip()
            unknown = sorted(set(values) - set(levels))
            if unknown:
                row = int(np.flatnonzero(~values.isin(levels).to_numpy())[0])
                raise CsvParseError(
                    f"Unknown level {values.iloc[row]!r} for categorical '{column}' at row {row}",
                    row=row, column=column,
                )
            # reference level dropped
            for level in levels[1:]:
                blocks.append((values == level).to_numpy(dtype=float))
                names.append(f"{column}[{level}]")
        else:
            blocks.append(_numeric_column(frame, column))
            names.append(column)

    covariates = np.column_stack(blocks)
    if not schema.intercept_present:
        covariates = np.column_stack([np.ones(len(frame)), covariates])
        names.insert(0, INTERCEPT_NAME)

    treatment, levels = _encode_treatment(frame[schema.treatment], schema)

    dataset = ObservationalDataset(
        covariates=covariates,
        treatment=treatment,
        outcome=outcome,
        n_arms=len(levels),
        covariate_names=names,
        arm_labels=levels,
        has_intercept=True,
        ordinal=schema.ordinal,
    )

    findings = validate(dataset)
    for finding in findings:
        if finding.severity == 'warning':
            logger.warning(finding.message)
    if any(f.severity == 'error' for f in findings):
        raise DatasetValidationError(findings)

    logger.info(f"Dataset ready: n={dataset.n}, d={dataset.d}, J={dataset.n_arms}, arm sizes={dataset.arm_counts().tolist()}")
    return dataset


def validate(dataset: ObservationalDataset) -> List[Finding]:
    """Check dataset invariants; one finding per violation, never raises."""
    findings: List[Finding] = []

    n = dataset.covariates.shape[0]
    if n < 1:
        findings.append(Finding('error', 'dataset has 0 units'))
    if dataset.treatment.shape[0] != n or dataset.outcome.shape[0] != n:
        findings.append(Finding(
            'error',
            f"row count mismatch: covariates {n}, treatment {dataset.treatment.shape[0]}, "
            f"outcome {dataset.outcome.shape[0]}",
        ))
        return findings

    bad_rows = np.flatnonzero(~np.isfinite(dataset.covariates).all(axis=1))
    for row in bad_rows:
        findings.append(Finding('error', f"non-finite covariate at row {int(row)}", int(row)))
    for row in np.flatnonzero(~np.isfinite(dataset.outcome)):
        findings.append(Finding('error', f"non-finite outcome at row {int(row)}", int(row)))

    out_of_range = np.flatnonzero((dataset.treatment < 1) | (dataset.treatment > dataset.n_arms))
    for row in out_of_range:
        findings.append(Finding(
            'error',
            f"treatment label {int(dataset.treatment[row])} outside 1..{dataset.n_arms} at row {int(row)}",
            int(row),
        ))

    for arm, count in enumerate(dataset.arm_counts(), start=1):
        if count == 0:
            findings.append(Finding('error', f"arm {arm} has 0 units"))

    if dataset.has_intercept and n > 0 and not np.allclose(dataset.covariates[:, 0], 1.0):
        findings.append(Finding('warning', 'first covariate column is flagged as intercept but is not constant 1'))

    return findings
