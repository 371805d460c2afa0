"""
Output layer for sensitivity sweeps.
Builds the results table, plot data and GPS range report, and writes them as CSV/JSON.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from core import IntervalEstimate, ObservationalDataset

logger = logging.getLogger(__name__)

RESULTS_SCHEMA_VERSION = 1
CSV_FLOAT_FORMAT = '%.8f'
RESULT_COLUMNS = [
    'estimand', 'model_family', 'Gamma0', 'gamma0', 'point_lower', 'point_upper',
    'ci_lower', 'ci_upper', 'alpha', 'bootstrap_reps',
]
PLOT_COLUMNS = [
    'estimand', 'model_family', 'Gamma0', 'gamma0', 'solid_lower', 'solid_upper',
    'dashed_lower', 'dashed_upper', 'midpoint',
]


def format_interval(lower, upper, digits: int = 2) -> str:
    """Format an interval the way the results table prints it, e.g. (1.97, 2.02)."""
    if lower is None or upper is None:
        return '-'
    return f"({lower:.{digits}f}, {upper:.{digits}f})"


def results_frame(estimates: Sequence[IntervalEstimate]) -> pd.DataFrame:
    """One row per (estimand, model family, Gamma0)."""
    rows = []
    for estimate in estimates:
        rows.append({
            'estimand': estimate.metadata.get('contrast', ''),
            'model_family': estimate.metadata.get('model_family', 'risk-ratio'),
            'Gamma0': estimate.Gamma0,
            'gamma0': estimate.gamma0,
            'point_lower': estimate.point_lower,
            'point_upper': estimate.point_upper,
            'ci_lower': estimate.ci_lower,
            'ci_upper': estimate.ci_upper,
            'alpha': estimate.alpha,
            'bootstrap_reps': estimate.bootstrap_reps,
        })
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def plot_frame(estimates: Sequence[IntervalEstimate]) -> pd.DataFrame:
    """Error-bar data: solid bars are point intervals, dashed bars the bootstrap CIs."""
    frame = results_frame(estimates)
    plot = pd.DataFrame({
        'estimand': frame['estimand'],
        'model_family': frame['model_family'],
        'Gamma0': frame['Gamma0'],
        'gamma0': frame['gamma0'],
        'solid_lower': frame['point_lower'],
        'solid_upper': frame['point_upper'],
        'dashed_lower': frame['ci_lower'],
        'dashed_upper': frame['ci_upper'],
        'midpoint': 0.5 * (frame['point_lower'] + frame['point_upper']),
    })
    return plot[PLOT_COLUMNS]


def gps_range_report(dataset: ObservationalDataset, gps: np.ndarray, threshold: float = 0.01) -> pd.DataFrame:
    """Min/mean/max of each arm's GPS column and how many units fall below `threshold`."""
    gps = np.asarray(gps, dtype=float)
    rows = []
    for arm in range(1, dataset.n_arms + 1):
        column = gps[:, arm - 1]
        rows.append({
            'arm': arm,
            'label': dataset.arm_labels[arm - 1],
            'units': int(dataset.arm_counts()[arm - 1]),
            'gps_min': float(column.min()),
            'gps_mean': float(column.mean()),
            'gps_max': float(column.max()),
            'below_threshold': int(np.sum(column < threshold)),
        })
    report = pd.DataFrame(rows)
    low = report[report['below_threshold'] > 0]
    for _, row in low.iterrows():
        logger.warning(f"Arm {row['arm']} ({row['label']}): {row['below_threshold']} units with GPS below "
                       f"{threshold}; minimum {row['gps_min']:.2e}. Overlap is limited, interpret with caution")
    return report


def _json_safe(value: Any):
    if isinstance(value, dict):
        return {key: _json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(item) for item in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    """Write a JSON artifact with its schema version."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {'schema_version': RESULTS_SCHEMA_VERSION, **_json_safe(payload)}
    path.write_text(json.dumps(document, indent=2), encoding='utf-8')
    return path


def write_analysis(out_dir: Union[str, Path], estimates: Sequence[IntervalEstimate], formats: Sequence[str],
                   metadata: Dict[str, Any], gps_report: pd.DataFrame = None) -> List[Path]:
    """
    Write results.csv, results.json and plotdata.csv for the requested formats.

    Returns:
        Paths written, in a fixed order
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = results_frame(estimates)
    written: List[Path] = []

    if 'csv' in formats:
        path = out_dir / 'results.csv'
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, na_rep='NA')
        written.append(path)
    if 'json' in formats:
        payload = {
            'metadata': metadata,
            'gps_range': gps_report.to_dict(orient='records') if gps_report is not None else [],
            'results': [estimate.to_dict() for estimate in estimates],
        }
        written.append(write_json(out_dir / 'results.json', payload))
    if 'plotdata' in formats:
        path = out_dir / 'plotdata.csv'
        plot_frame(estimates).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, na_rep='NA')
        written.append(path)

    for path in written:
        logger.info(f"Wrote {path}")
    return written


def oracle_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    """True-interval table for the oracle subcommand."""
    columns = ['scenario', 'estimand', 'Gamma0', 'gamma0', 'true_lower', 'true_upper', 'n_oracle', 'mc_error']
    return pd.DataFrame(rows, columns=columns)
