"""
Configuration management for the sensitivity analysis toolkit.
Handles environment variables, config files, default settings, validation and logging setup.
"""

import os
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
from dotenv import dotenv_values, load_dotenv

from core import SensitivityAnalysisError, worker_count

SUBCOMMANDS = ('analyze', 'simulate', 'oracle')
OUTPUT_FORMATS = ('csv', 'json', 'plotdata')
GPS_MODELS = ('logistic', 'mlogit', 'cratio')
ANALYZE_GAMMA0_GRID = (1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75)  # on the Gamma0 scale
STUDY_GAMMA0_GRID = (0.0, 0.1, 0.2, 0.5, 1.0, 2.0)
FULL_SCALE_REPS = 1000
MIN_ORACLE_UNITS = 100_000

# config-file keys: SECTION__KEY -> RunConfig field
FILE_KEYS = {
    ('', 'data'): 'data',
    ('', 'out'): 'out_dir',
    ('', 'seed'): 'seed',
    ('', 'threads'): 'threads',
    ('', 'formats'): 'formats',
    ('', 'contrasts'): 'contrasts',
    ('gps', 'model'): 'model',
    ('gps', 'ridge'): 'ridge',
    ('gps', 'max_iter'): 'max_iter',
    ('gps', 'cr_direction'): 'cr_direction',
    ('gps', 'cr_shared_slopes'): 'cr_shared_slopes',
    ('sens', 'gamma0'): 'gamma0_grid',
    ('sens', 'capital_gamma0'): 'Gamma0_grid',
    ('sens', 'or_baseline'): 'or_baseline',
    ('bootstrap', 'reps'): 'boot_reps',
    ('bootstrap', 'alpha'): 'alpha',
    ('bootstrap', 'refit'): 'refit_gps',
    ('sim', 'scenario'): 'scenario',
    ('sim', 'k2'): 'k2',
    ('sim', 'k3'): 'k3',
    ('sim', 'n'): 'n',
    ('sim', 'reps'): 'reps',
    ('sim', 'n_oracle'): 'n_oracle',
    ('sim', 'x3_scale'): 'x3_scale',
    ('sim', 'full_scale'): 'full_scale',
}
SCHEMA_KEYS = ('treatment', 'outcome', 'covariates', 'treatment_levels', 'ordinal', 'intercept_present')


class ConfigurationError(SensitivityAnalysisError):
    """One or more configuration values are invalid."""

    def __init__(self, errors: List[str]):
        self.errors = errors
        super().__init__("Configuration errors:\n" + "\n".join(f"  - {error}" for error in errors))


def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ('1', 'true', 'yes', 'on')


def _as_list(value: Any) -> List[str]:
    if isinstance(value, str):
        return [item.strip() for item in value.split(',') if item.strip()]
    return [str(item) for item in value]


class Config:
    """Centralized configuration management class."""

    def __init__(self):
        """Initialize configuration with environment variables and defaults."""
        # Load environment variables from .env file
        load_dotenv()
        errors: List[str] = []

        # Logging
        self.LOG_LEVEL = os.getenv('SENSIPW_LOG_LEVEL', 'INFO').upper()
        self.LOG_FOLDER = Path(os.getenv('SENSIPW_LOG_FOLDER', 'logs'))
        self.LOG_TO_FILE = _as_bool(os.getenv('SENSIPW_LOG_TO_FILE', 'true'))

        # Output and execution
        self.OUTPUT_DIR = Path(os.getenv('SENSIPW_OUTPUT_DIR', 'results'))
        self.SEED = self._env_number('SENSIPW_SEED', 20240101, int, errors)
        self.THREADS = self._env_number('SENSIPW_THREADS', 0, int, errors)
        self.SHOW_PROGRESS = _as_bool(os.getenv('SENSIPW_SHOW_PROGRESS', 'true'))

        # Estimation
        self.BOOT_REPS = self._env_number('SENSIPW_BOOT_REPS', 1000, int, errors)
        self.ALPHA = self._env_number('SENSIPW_ALPHA', 0.10, float, errors)
        self.MAX_ITER = self._env_number('SENSIPW_MAX_ITER', 100, int, errors)
        self.RIDGE = self._env_number('SENSIPW_RIDGE', 0.0, float, errors)
        self.GPS_WARN = self._env_number('SENSIPW_GPS_WARN', 0.01, float, errors)
        self.N_ORACLE = self._env_number('SENSIPW_N_ORACLE', 1_000_000, int, errors)

        # Validate configuration
        self._validate_config(errors)

    @staticmethod
    def _env_number(name: str, default, cast, errors: List[str]):
        raw = os.getenv(name)
        if raw is None or raw.strip() == '':
            return default
        try:
            return cast(raw)
        except ValueError:
            errors.append(f"{name}={raw!r} is not a valid {cast.__name__}")
            return default

    def _validate_config(self, errors: Optional[List[str]] = None):
        """Validate configuration settings, raising one error that lists every problem."""
        errors = list(errors or [])

        if self.LOG_LEVEL not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            errors.append(f"SENSIPW_LOG_LEVEL must be a logging level name, got {self.LOG_LEVEL}")
        if not 0 <= self.SEED < 2 ** 64:
            errors.append("SENSIPW_SEED must be an unsigned 64-bit integer")
        if self.THREADS < 0:
            errors.append("SENSIPW_THREADS must be >= 0 (0 = all cores)")
        if self.BOOT_REPS < 2:
            errors.append("SENSIPW_BOOT_REPS must be >= 2")
        if not 0.0 < self.ALPHA < 1.0:
            errors.append("SENSIPW_ALPHA must lie in (0, 1)")
        if self.MAX_ITER < 1:
            errors.append("SENSIPW_MAX_ITER must be positive")
        if self.RIDGE < 0:
            errors.append("SENSIPW_RIDGE must be >= 0")
        if not 0.0 <= self.GPS_WARN < 1.0:
            errors.append("SENSIPW_GPS_WARN must lie in [0, 1)")
        if self.N_ORACLE < MIN_ORACLE_UNITS:
            errors.append(f"SENSIPW_N_ORACLE must be >= {MIN_ORACLE_UNITS}")

        if errors:
            raise ConfigurationError(errors)

    def setup_logging(self, level: Optional[str] = None):
        """Setup logging configuration."""
        log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
        if self.LOG_TO_FILE:
            # Create logs directory if it doesn't exist
            self.LOG_FOLDER.mkdir(parents=True, exist_ok=True)
            handlers.insert(0, logging.FileHandler(self.LOG_FOLDER / 'sensipw.log'))

        logging.basicConfig(
            level=getattr(logging, (level or self.LOG_LEVEL).upper(), logging.INFO),
            format=log_format,
            handlers=handlers,
            force=True,
        )

    def create_directories(self, *extra: Path):
        """Create necessary directories if they don't exist."""
        directories = [self.OUTPUT_DIR, *extra]
        if self.LOG_TO_FILE:
            directories.append(self.LOG_FOLDER)

        for directory in directories:
            Path(directory).mkdir(parents=True, exist_ok=True)

        logging.info(f"Created directories: {', '.join(str(d) for d in directories)}")

    def resolve_threads(self, threads: Optional[int] = None) -> int:
        """Worker count; 0 means one per CPU."""
        threads = self.THREADS if threads is None else threads
        return worker_count(threads)


@dataclass(frozen=True)
class RunConfig:
    """
    Everything one CLI invocation needs.

    Grids: `gamma0_grid` is on the log scale, `Gamma0_grid` on the ratio scale; at most
    one may be set. `schema` uses the DatasetSchema.from_mapping layout.
    """
    subcommand: str
    data: Optional[Path] = None
    schema: Dict[str, Any] = field(default_factory=dict)
    model: str = 'mlogit'
    contrasts: List[str] = field(default_factory=list)
    gamma0_grid: Optional[List[float]] = None
    Gamma0_grid: Optional[List[float]] = None
    or_baseline: bool = False
    alpha: float = 0.10
    boot_reps: int = 1000
    refit_gps: bool = True
    seed: int = 20240101
    threads: int = 0
    show_progress: bool = True
    out_dir: Path = Path('results')
    formats: List[str] = field(default_factory=lambda: list(OUTPUT_FORMATS))
    ridge: float = 0.0
    max_iter: int = 100
    cr_direction: str = 'forward'
    cr_shared_slopes: bool = False
    scenario: str = 'I'
    k2: Optional[float] = None
    k3: Optional[float] = None
    n: int = 750
    reps: int = 200
    n_oracle: int = 1_000_000
    x3_scale: str = 'sd'
    full_scale: bool = False

    @classmethod
    def defaults(cls, subcommand: str, settings: Optional[Config] = None) -> 'RunConfig':
        """Defaults drawn from the environment-level Config."""
        settings = settings or config
        return cls(
            subcommand=subcommand,
            alpha=settings.ALPHA,
            boot_reps=settings.BOOT_REPS if subcommand == 'analyze' else 200,
            seed=settings.SEED,
            threads=settings.THREADS,
            show_progress=settings.SHOW_PROGRESS,
            out_dir=settings.OUTPUT_DIR,
            ridge=settings.RIDGE,
            max_iter=settings.MAX_ITER,
            n_oracle=settings.N_ORACLE,
        )

    def with_overrides(self, **overrides) -> 'RunConfig':
        """Copy with every non-None override applied; schema entries merge key by key."""
        values = {key: value for key, value in overrides.items() if value is not None}
        unknown = sorted(set(values) - {f.name for f in fields(self)})
        if unknown:
            raise ConfigurationError([f"Unknown option: {name}" for name in unknown])
        if 'schema' in values:
            merged = dict(self.schema)
            for key, value in values['schema'].items():
                if key == 'categorical':
                    merged['categorical'] = {**merged.get('categorical', {}), **value}
                elif value is not None:
                    merged[key] = value
            values['schema'] = merged
        if 'gamma0_grid' in values:
            values.setdefault('Gamma0_grid', None)
        elif 'Gamma0_grid' in values:
            values['gamma0_grid'] = None
        return replace(self, **values)

    def gamma0_values(self) -> List[float]:
        """Requested grid on the log scale, falling back to the subcommand default."""
        if self.Gamma0_grid:
            return [float(np.log(G)) for G in self.Gamma0_grid]
        if self.gamma0_grid:
            return [float(g) for g in self.gamma0_grid]
        if self.subcommand == 'analyze':
            return [float(np.log(G)) for G in ANALYZE_GAMMA0_GRID]
        return list(STUDY_GAMMA0_GRID)

    @property
    def study_reps(self) -> int:
        return FULL_SCALE_REPS if self.full_scale else self.reps

    @property
    def study_boot_reps(self) -> int:
        return FULL_SCALE_REPS if self.full_scale else self.boot_reps

    def validate(self) -> 'RunConfig':
        """Raise ConfigurationError listing every invalid setting."""
        errors: List[str] = []

        if self.subcommand not in SUBCOMMANDS:
            errors.append(f"subcommand must be one of {', '.join(SUBCOMMANDS)}")
        if self.subcommand == 'analyze':
            if self.data is None:
                errors.append("analyze needs a data file (--data or DATA=)")
            for key in ('treatment', 'outcome', 'covariates'):
                if not self.schema.get(key):
                    errors.append(f"analyze needs the schema entry '{key}'")
        if self.gamma0_grid and self.Gamma0_grid:
            errors.append("give either a gamma0 grid or a Gamma0 grid, not both")
        if self.Gamma0_grid and any(G < 1 for G in self.Gamma0_grid):
            errors.append("Gamma0 grid values must be >= 1")
        if self.gamma0_grid and any(g < 0 for g in self.gamma0_grid):
            errors.append("gamma0 grid values must be >= 0")
        if self.model not in GPS_MODELS:
            errors.append(f"model must be one of {', '.join(GPS_MODELS)}")
        if not 0.0 < self.alpha < 1.0:
            errors.append("alpha must lie in (0, 1)")
        if self.boot_reps < 2:
            errors.append("bootstrap replicates must be >= 2")
        elif self.study_boot_reps * min(self.alpha / 2, 1 - self.alpha / 2) < 1:
            errors.append(f"{self.study_boot_reps} bootstrap replicates are too few for alpha={self.alpha}")
        if not 0 <= self.seed < 2 ** 64:
            errors.append("seed must be an unsigned 64-bit integer")
        if self.threads < 0:
            errors.append("threads must be >= 0 (0 = all cores)")
        unknown_formats = [f for f in self.formats if f not in OUTPUT_FORMATS]
        if unknown_formats:
            errors.append(f"unknown output formats: {', '.join(unknown_formats)}")
        if self.ridge < 0:
            errors.append("ridge must be >= 0")
        if self.max_iter < 1:
            errors.append("max_iter must be positive")
        if self.cr_direction not in ('forward', 'backward'):
            errors.append("cr_direction must be 'forward' or 'backward'")
        if self.scenario not in ('I', 'II'):
            errors.append("scenario must be 'I' or 'II'")
        if self.n < 1 or self.reps < 1:
            errors.append("simulation n and reps must be >= 1")
        if self.n_oracle < MIN_ORACLE_UNITS:
            errors.append(f"n_oracle must be >= {MIN_ORACLE_UNITS}")
        if self.x3_scale not in ('variance', 'sd'):
            errors.append("x3_scale must be 'variance' or 'sd'")
        for contrast in self.contrasts:
            if contrast.count(':') != 1 or not all(part.strip() for part in contrast.split(':')):
                errors.append(f"contrast '{contrast}' must look like a:b")

        if errors:
            raise ConfigurationError(errors)
        return self


def _nest(values: Mapping[str, Optional[str]]) -> Dict[str, Any]:
    """Turn SECTION__KEY__SUB=value pairs into nested dicts; section and key are lower-cased."""
    nested: Dict[str, Any] = {}
    for raw_key, value in values.items():
        parts = raw_key.split('__')
        head = [part.lower() for part in parts[:2]]
        node = nested
        path = head + parts[2:]
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return nested


def _coerce(name: str, value: Any, errors: List[str]):
    """Convert a config-file string to the type of RunConfig field `name`."""
    try:
        if name in ('gamma0_grid', 'Gamma0_grid'):
            return [float(v) for v in _as_list(value)]
        if name in ('contrasts', 'formats'):
            return _as_list(value)
        if name in ('data', 'out_dir'):
            return Path(value)
        if name in ('seed', 'threads', 'boot_reps', 'max_iter', 'n', 'reps', 'n_oracle'):
            return int(value)
        if name in ('alpha', 'ridge', 'k2', 'k3'):
            return float(value)
        if name in ('or_baseline', 'refit_gps', 'cr_shared_slopes', 'full_scale'):
            return _as_bool(value)
        return str(value).strip()
    except ValueError:
        errors.append(f"invalid value {value!r} for {name}")
        return None


def load_run_config(path, subcommand: str, settings: Optional[Config] = None) -> RunConfig:
    """
    Read a dotenv-style config file (KEY=value lines, # comments, SECTION__KEY nesting).

    Returns:
        RunConfig with file values layered over the environment defaults
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError([f"Config file not found: {path}"])

    nested = _nest(dotenv_values(path))
    errors: List[str] = []
    overrides: Dict[str, Any] = {}

    schema_section = nested.pop('schema', {})
    if schema_section:
        schema: Dict[str, Any] = {}
        for key, value in schema_section.items():
            if key == 'categorical' and isinstance(value, dict):
                schema['categorical'] = {column: _as_list(levels or '') for column, levels in value.items()}
            elif key in SCHEMA_KEYS:
                schema[key] = value
            else:
                errors.append(f"unknown config key SCHEMA__{key.upper()}")
        overrides['schema'] = schema

    for section, entries in nested.items():
        items = entries.items() if isinstance(entries, dict) else [(section, entries)]
        prefix = section if isinstance(entries, dict) else ''
        for key, value in items:
            name = FILE_KEYS.get((prefix, key))
            if name is None:
                label = f"{prefix.upper()}__{key.upper()}" if prefix else key.upper()
                errors.append(f"unknown config key {label}")
                continue
            overrides[name] = _coerce(name, value, errors)

    if errors:
        raise ConfigurationError(errors)

    logging.getLogger(__name__).info(f"Loaded run configuration from {path}")
    return RunConfig.defaults(subcommand, settings).with_overrides(**overrides)


def resolve_run_config(subcommand: str, config_path=None, settings: Optional[Config] = None,
                       **flags) -> RunConfig:
    """Config defaults, then the config file, then command-line flags."""
    if config_path:
        base = load_run_config(config_path, subcommand, settings)
    else:
        base = RunConfig.defaults(subcommand, settings)
    return base.with_overrides(**flags).validate()


# Global configuration instance
config = Config()
