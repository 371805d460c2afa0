#!/usr/bin/env python3
"""
Command-line front end for the sensitivity analysis toolkit.
Subcommands: analyze (CSV data, Gamma0 sweep), simulate (simulation study), oracle (true intervals).
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from boot import BootstrapConfig, attach_intervals, bootstrap_endpoint_draws
from config import ConfigurationError, GPS_MODELS, OUTPUT_FORMATS, RunConfig, config, resolve_run_config
from core import ContrastSpec, DatasetSchema, SensitivityAnalysisError, load_csv
from gps import GpsFitOptions, fit_gps, predict_gps
from reporting import format_interval, gps_range_report, oracle_frame, write_analysis, write_json
from sens import SensitivitySpec, sweep_point_intervals
from sim import default_contrasts, oracle_intervals, oracle_monte_carlo_error, run_study, scenario_preset

logger = logging.getLogger(__name__)


# ANSI color codes for terminal output
class Colors:
    HEADER = '\033[95m'
    OKBLUE = '\033[94m'
    OKCYAN = '\033[96m'
    OKGREEN = '\033[92m'
    WARNING = '\033[93m'
    FAIL = '\033[91m'
    ENDC = '\033[0m'
    BOLD = '\033[1m'


def print_colored(text, color=Colors.ENDC):
    """Print colored text to terminal."""
    print(f"{color}{text}{Colors.ENDC}")


def print_header(text):
    """Print a header with styling."""
    print("\n" + "=" * 80)
    print_colored(text, Colors.BOLD + Colors.HEADER)
    print("=" * 80)


def print_step(step_num, total_steps, description):
    """Print a step with progress indicator."""
    print_colored(f"[{step_num}/{total_steps}] {description}...", Colors.OKBLUE)


def print_success(message):
    print_colored(f"SUCCESS: {message}", Colors.OKGREEN)


def print_warning(message):
    print_colored(f"WARNING: {message}", Colors.WARNING)


def print_error(message):
    print_colored(f"ERROR: {message}", Colors.FAIL)


def print_info(message):
    print_colored(f"INFO: {message}", Colors.OKCYAN)


def resolve_contrasts(labels: Sequence[str], arm_labels: Sequence[str]) -> List[ContrastSpec]:
    """
    Turn 'a:b' labels into pairwise contrasts.

    Each side matches an original treatment level name first, then a 1-based arm index.
    With no labels every arm is compared with the last arm.
    """
    n_arms = len(arm_labels)
    if not labels:
        return [ContrastSpec.pairwise(i, n_arms, n_arms) for i in range(1, n_arms)]

    def arm_index(token: str) -> int:
        token = token.strip()
        if token in arm_labels:
            return list(arm_labels).index(token) + 1
        if token.isdigit() and 1 <= int(token) <= n_arms:
            return int(token)
        raise ConfigurationError([f"contrast arm '{token}' matches no treatment level or arm index 1..{n_arms}"])

    contrasts = []
    for label in labels:
        left, right = label.split(':')
        i, j = arm_index(left), arm_index(right)
        if i == j:
            raise ConfigurationError([f"contrast '{label}' compares an arm with itself"])
        contrasts.append(ContrastSpec.pairwise(i, j, n_arms))
    return contrasts


def _sensitivity_specs(run: RunConfig) -> List[SensitivitySpec]:
    specs = [SensitivitySpec(g, 'risk-ratio') for g in run.gamma0_values()]
    if run.or_baseline:
        specs += [SensitivitySpec(g, 'odds-ratio') for g in run.gamma0_values()]
    return specs


def _fit_options(run: RunConfig) -> GpsFitOptions:
    return GpsFitOptions(max_iter=run.max_iter, ridge=run.ridge, cr_direction=run.cr_direction,
                         cr_shared_slopes=run.cr_shared_slopes)


def _print_gps_range(report) -> None:
    print_colored("GPS range per arm:", Colors.BOLD)
    for _, row in report.iterrows():
        line = (f"   arm {row['arm']} ({row['label']}, n={row['units']}): "
                f"min {row['gps_min']:.3f}  mean {row['gps_mean']:.3f}  max {row['gps_max']:.3f}")
        print_colored(line, Colors.WARNING if row['below_threshold'] else Colors.OKCYAN)


def _print_results(estimates) -> None:
    print(f"{'estimand':<12}{'family':<12}{'Gamma0':>8}{'gamma0':>9}   {'point interval':<22}{'CI':<22}")
    for estimate in estimates:
        print(f"{estimate.metadata['contrast']:<12}{estimate.metadata['model_family']:<12}"
              f"{estimate.Gamma0:>8.2f}{estimate.gamma0:>9.3f}   "
              f"{format_interval(estimate.point_lower, estimate.point_upper):<22}"
              f"{format_interval(estimate.ci_lower, estimate.ci_upper):<22}")


def analyze(run: RunConfig) -> List[Path]:
    """Fit the GPS, sweep the sensitivity grid with bootstrap CIs and write the results."""
    print_header("SENSITIVITY ANALYSIS")

    print_step(1, 4, "Loading dataset")
    schema = DatasetSchema.from_mapping(run.schema)
    dataset = load_csv(run.data, schema)
    print_success(f"{dataset.n} units, {dataset.n_arms} arms, {dataset.d} covariate columns")

    print_step(2, 4, f"Fitting {run.model} GPS model")
    if run.model == 'cratio' and not dataset.ordinal:
        raise ConfigurationError(["the continuation-ratio model needs ordinal treatment levels (--ordinal)"])
    options = _fit_options(run)
    model = fit_gps(dataset, run.model, options)
    for warning in model.warnings:
        print_warning(warning)
    gps = predict_gps(model, dataset.covariates)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    (run.out_dir / 'gps_model.json').write_text(model.to_json(), encoding='utf-8')
    report = gps_range_report(dataset, gps, config.GPS_WARN)
    _print_gps_range(report)

    workers = config.resolve_threads(run.threads)
    print_step(3, 4, f"Bootstrapping {run.boot_reps} resamples on {workers} threads")
    contrasts = resolve_contrasts(run.contrasts, dataset.arm_labels)
    specs = _sensitivity_specs(run)
    points = sweep_point_intervals(dataset, gps, contrasts, specs)
    boot_config = BootstrapConfig(reps=run.boot_reps, alpha=run.alpha, seed=run.seed, refit_gps=run.refit_gps,
                                  threads=workers, show_progress=run.show_progress)
    draws = bootstrap_endpoint_draws(dataset, run.model, contrasts, specs, boot_config, options, full_gps=gps)
    estimates = [estimate for row in attach_intervals(points, draws, boot_config, run.model) for estimate in row]
    if draws.discarded:
        print_warning(f"{draws.discarded} degenerate resamples were redrawn")

    print_step(4, 4, "Writing results")
    _print_results(estimates)
    metadata = {
        'subcommand': 'analyze',
        'data': str(run.data),
        'gps_model': run.model,
        'arm_labels': list(dataset.arm_labels),
        'contrasts': [contrast.label for contrast in contrasts],
        'alpha': run.alpha,
        'bootstrap_reps': run.boot_reps,
        'seed': run.seed,
        'refit_gps': run.refit_gps,
        'quantile_method': 'linear',
    }
    written = write_analysis(run.out_dir, estimates, run.formats, metadata, report)
    written.insert(0, run.out_dir / 'gps_model.json')
    for path in written:
        print_success(f"Wrote {path}")
    return written


def _scenario(run: RunConfig):
    overrides: Dict[str, Any] = {
        'n': run.n,
        'seed': run.seed,
        'reps': run.study_reps,
        'gamma0_grid': tuple(run.gamma0_values()),
        'bootstrap': BootstrapConfig(reps=run.study_boot_reps, alpha=run.alpha, seed=run.seed,
                                     refit_gps=run.refit_gps),
        'n_oracle': run.n_oracle,
        'x3_scale': run.x3_scale,
        'threads': config.resolve_threads(run.threads),
        'show_progress': run.show_progress,
        'gps_warn': config.GPS_WARN,
    }
    if run.k2 is not None:
        overrides['k2'] = run.k2
    if run.k3 is not None:
        overrides['k3'] = run.k3
    return scenario_preset(run.scenario, **overrides)


def simulate(run: RunConfig) -> List[Path]:
    """Run the simulation study and write study.csv and study.json."""
    scenario = _scenario(run)
    print_header(f"SIMULATION STUDY - SCENARIO {scenario.name}")
    print_info(f"n={scenario.n}, (k2, k3)=({scenario.k2}, {scenario.k3}), reps={scenario.reps}, "
               f"B={scenario.bootstrap.reps}")

    contrasts = resolve_contrasts(run.contrasts, ['1', '2', '3']) if run.contrasts else None
    report = run_study(scenario, contrasts, _fit_options(run))

    for row in report.rows:
        line = (f"{row.contrast:<10}{row.gamma0:>6.2f}  true {format_interval(row.true_lower, row.true_upper, 3):<18}"
                f"median {format_interval(row.median_point_lower, row.median_point_upper, 3):<18}"
                f"non-coverage {row.non_coverage:.3f}")
        print_colored(line, Colors.WARNING if row.overlap_warning else Colors.ENDC)
    if any(row.overlap_warning for row in report.rows):
        print_warning("Fitted GPS values below the overlap threshold; interpret results with caution")

    written = [report.to_csv(run.out_dir / 'study.csv'), report.to_json(run.out_dir / 'study.json')]
    for path in written:
        print_success(f"Wrote {path}")
    return written


def oracle(run: RunConfig) -> List[Path]:
    """True partially identified intervals across the grid for the chosen scenario."""
    scenario = _scenario(run)
    print_header(f"ORACLE INTERVALS - SCENARIO {scenario.name}")
    contrasts = resolve_contrasts(run.contrasts, ['1', '2', '3']) if run.contrasts else default_contrasts()
    grid = list(scenario.gamma0_grid)
    intervals = oracle_intervals(contrasts, grid, scenario.k2, scenario.k3, scenario.n_oracle,
                                 scenario.effective_oracle_seed, x3_scale=scenario.x3_scale)
    mc_error = oracle_monte_carlo_error(scenario.n_oracle)

    rows = []
    for c, contrast in enumerate(contrasts):
        for s, gamma0 in enumerate(grid):
            lower, upper = intervals[c, s]
            rows.append({
                'scenario': scenario.name,
                'estimand': contrast.label,
                'Gamma0': float(SensitivitySpec(gamma0).Gamma0),
                'gamma0': gamma0,
                'true_lower': float(lower),
                'true_upper': float(upper),
                'n_oracle': scenario.n_oracle,
                'mc_error': mc_error,
            })
            print(f"{contrast.label:<10}{gamma0:>6.2f}  {format_interval(lower, upper, 3)}")

    frame = oracle_frame(rows)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = run.out_dir / 'oracle.csv'
    frame.to_csv(csv_path, index=False, float_format='%.6f')
    json_path = write_json(run.out_dir / 'oracle.json', {
        'metadata': {'scenario': scenario.name, 'k2': scenario.k2, 'k3': scenario.k3,
                     'n_oracle': scenario.n_oracle, 'seed': scenario.effective_oracle_seed,
                     'monte_carlo_error': mc_error},
        'rows': rows,
    })
    for path in (csv_path, json_path):
        print_success(f"Wrote {path}")
    return [csv_path, json_path]


def _float_list(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got '{text}'")


def _categorical(text: str):
    name, sep, levels = text.partition('=')
    if not sep or not name.strip() or not levels.strip():
        raise argparse.ArgumentTypeError(f"expected name=level1,level2,..., got '{text}'")
    return name.strip(), [level.strip() for level in levels.split(',') if level.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='sensipw', description="Risk-ratio sensitivity analysis for SIPW estimates")
    subparsers = parser.add_subparsers(dest='subcommand', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help="dotenv-style config file")
    common.add_argument('--out', type=Path, dest='out_dir', help="output directory")
    common.add_argument('--seed', type=int)
    common.add_argument('--threads', type=int, help="worker threads, 0 = all cores")
    common.add_argument('--gamma0', type=_float_list, dest='gamma0_grid', help="comma-separated gamma0 values")
    common.add_argument('--Gamma0', type=_float_list, dest='Gamma0_grid', help="comma-separated Gamma0 values (>= 1)")
    common.add_argument('--contrast', action='append', dest='contrasts', help="a:b, repeatable")
    common.add_argument('--alpha', type=float)
    common.add_argument('--boot', type=int, dest='boot_reps', help="bootstrap replicates")
    common.add_argument('--no-refit', action='store_const', const=False, dest='refit_gps',
                        help="reuse full-sample GPS inside the bootstrap")
    common.add_argument('--no-progress', action='store_const', const=False, dest='show_progress')
    common.add_argument('--ridge', type=float)
    common.add_argument('--max-iter', type=int, dest='max_iter')
    common.add_argument('--log-level', dest='log_level')

    analyze_parser = subparsers.add_parser('analyze', parents=[common], help="sensitivity sweep on a CSV dataset")
    analyze_parser.add_argument('--data', type=Path)
    analyze_parser.add_argument('--treatment-col', dest='treatment')
    analyze_parser.add_argument('--outcome-col', dest='outcome')
    analyze_parser.add_argument('--covariates', help="comma-separated covariate columns")
    analyze_parser.add_argument('--categorical', type=_categorical, action='append',
                                help="name=level1,level2,... (first level is the reference), repeatable")
    analyze_parser.add_argument('--treatment-levels', dest='treatment_levels', help="comma-separated level order")
    analyze_parser.add_argument('--ordinal', action='store_const', const=True)
    analyze_parser.add_argument('--model', choices=GPS_MODELS)
    analyze_parser.add_argument('--or-baseline', action='store_const', const=True, dest='or_baseline',
                                help="also run the odds-ratio sensitivity model")
    analyze_parser.add_argument('--cr-direction', choices=('forward', 'backward'), dest='cr_direction')
    analyze_parser.add_argument('--cr-shared-slopes', action='store_const', const=True, dest='cr_shared_slopes')
    analyze_parser.add_argument('--formats', type=lambda text: [f.strip() for f in text.split(',')],
                                help=f"comma-separated subset of {','.join(OUTPUT_FORMATS)}")

    for name, text in (('simulate', "simulation study"), ('oracle', "true partially identified intervals")):
        sub = subparsers.add_parser(name, parents=[common], help=text)
        sub.add_argument('--scenario', choices=('I', 'II'))
        sub.add_argument('--k2', type=float)
        sub.add_argument('--k3', type=float)
        sub.add_argument('--n', type=int)
        sub.add_argument('--reps', type=int)
        sub.add_argument('--n-oracle', type=int, dest='n_oracle')
        sub.add_argument('--x3-scale', choices=('variance', 'sd'), dest='x3_scale')
        sub.add_argument('--full-scale', action='store_const', const=True, dest='full_scale')

    return parser


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    """Parsed arguments as RunConfig overrides; unset flags stay None."""
    values = vars(args).copy()
    for key in ('subcommand', 'config', 'log_level'):
        values.pop(key, None)

    schema = {
        'treatment': values.pop('treatment', None),
        'outcome': values.pop('outcome', None),
        'covariates': values.pop('covariates', None),
        'treatment_levels': values.pop('treatment_levels', None),
        'ordinal': values.pop('ordinal', None),
    }
    categorical = values.pop('categorical', None)
    if categorical:
        schema['categorical'] = dict(categorical)
    schema = {key: value for key, value in schema.items() if value is not None}
    values['schema'] = schema or None
    return values


COMMANDS = {'analyze': analyze, 'simulate': simulate, 'oracle': oracle}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code (argparse exits with 2 on usage errors)."""
    args = build_parser().parse_args(argv)
    config.setup_logging(args.log_level)

    try:
        run = resolve_run_config(args.subcommand, args.config, **_flags(args))
        COMMANDS[run.subcommand](run)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        print_error(str(e))
        return 1
    except (SensitivityAnalysisError, FileNotFoundError) as e:
        logger.error(f"{args.subcommand} failed: {type(e).__name__}: {e}")
        print_error(f"{type(e).__name__}: {e}")
        for finding in getattr(e, 'findings', []):
            print_colored(f"   - [{finding.severity}] {finding.message}", Colors.FAIL)
        return 1

    print_success(f"{args.subcommand} finished")
    return 0


if __name__ == "__main__":
    sys.exit(main())
