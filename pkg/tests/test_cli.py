"""End-to-end tests for the command-line front end and its output files."""

import json

import numpy as np
import pandas as pd
import pytest

import config as config_module
from cli import build_parser, main, resolve_contrasts
from config import ConfigurationError
from reporting import RESULT_COLUMNS, format_interval, gps_range_report

LEVELS = 'none,primary,secondary,higher'


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    monkeypatch.setattr(config_module.config, 'LOG_TO_FILE', False)


def analyze_args(data, out_dir, *extra):
    return [
        'analyze', '--data', str(data), '--out', str(out_dir),
        '--treatment-col', 'educ', '--outcome-col', 'stunting',
        '--covariates', 'age,wealth', '--categorical', 'district=a,b,c',
        '--treatment-levels', LEVELS, '--ordinal', '--model', 'cratio',
        '--Gamma0', '1,1.5,2', '--boot', '20', '--seed', '123', '--no-progress',
        *extra,
    ]


class TestResolveContrasts:
    def test_default_compares_each_arm_with_last(self):
        contrasts = resolve_contrasts([], ['none', 'primary', 'secondary', 'higher'])
        assert [c.label for c in contrasts] == ['tau_1,4', 'tau_2,4', 'tau_3,4']

    def test_level_names_and_indices(self):
        contrasts = resolve_contrasts(['higher:none', '2:3'], ['none', 'primary', 'secondary', 'higher'])

        np.testing.assert_array_equal(contrasts[0].c, [-1, 0, 0, 1])
        np.testing.assert_array_equal(contrasts[1].c, [0, 1, -1, 0])

    def test_unknown_arm(self):
        with pytest.raises(ConfigurationError):
            resolve_contrasts(['none:phd'], ['none', 'primary'])

    def test_self_comparison(self):
        with pytest.raises(ConfigurationError):
            resolve_contrasts(['1:none'], ['none', 'primary'])


class TestParser:
    def test_unset_flags_are_none(self):
        args = build_parser().parse_args(['simulate'])
        assert args.seed is None and args.refit_gps is None

    def test_grid_parsing(self):
        args = build_parser().parse_args(['oracle', '--gamma0', '0,0.5,2'])
        assert args.gamma0_grid == [0.0, 0.5, 2.0]

    def test_usage_error_exits_with_two(self):
        with pytest.raises(SystemExit) as excinfo:
            main(['analyze', '--model', 'probit'])
        assert excinfo.value.code == 2


class TestAnalyze:
    def test_writes_results_and_plot_data(self, ordinal_csv, tmp_path):
        out_dir = tmp_path / 'out'
        assert main(analyze_args(ordinal_csv, out_dir)) == 0

        results = pd.read_csv(out_dir / 'results.csv')
        assert list(results.columns) == RESULT_COLUMNS
        assert len(results) == 3 * 3
        assert set(results['estimand']) == {'tau_1,4', 'tau_2,4', 'tau_3,4'}

        collapsed = results[results['Gamma0'] == 1.0]
        np.testing.assert_allclose(collapsed['point_lower'], collapsed['point_upper'], atol=1e-8)
        for _, rows in results.groupby('estimand'):
            rows = rows.sort_values('Gamma0')
            assert np.all(np.diff(rows['point_lower']) <= 1e-8)
            assert np.all(np.diff(rows['point_upper']) >= -1e-8)
        assert np.all(results['ci_lower'] <= results['ci_upper'])

        plot = pd.read_csv(out_dir / 'plotdata.csv')
        np.testing.assert_allclose(plot['midpoint'], 0.5 * (plot['solid_lower'] + plot['solid_upper']), atol=1e-8)

        payload = json.loads((out_dir / 'results.json').read_text())
        assert payload['schema_version'] == 1
        assert payload['metadata']['arm_labels'] == LEVELS.split(',')
        assert len(payload['gps_range']) == 4
        assert (out_dir / 'gps_model.json').exists()

    def test_results_do_not_depend_on_thread_count(self, ordinal_csv, tmp_path):
        assert main(analyze_args(ordinal_csv, tmp_path / 'one', '--threads', '1')) == 0
        assert main(analyze_args(ordinal_csv, tmp_path / 'four', '--threads', '4')) == 0

        assert (tmp_path / 'one' / 'results.csv').read_bytes() == (tmp_path / 'four' / 'results.csv').read_bytes()

    def test_odds_ratio_baseline_adds_rows(self, ordinal_csv, tmp_path):
        out_dir = tmp_path / 'or'
        assert main(analyze_args(ordinal_csv, out_dir, '--or-baseline', '--contrast', 'none:higher',
                                 '--formats', 'csv')) == 0

        results = pd.read_csv(out_dir / 'results.csv')
        assert sorted(results['model_family'].unique()) == ['odds-ratio', 'risk-ratio']
        assert len(results) == 2 * 3
        assert not (out_dir / 'plotdata.csv').exists()

    def test_missing_column_exits_with_one(self, ordinal_csv, tmp_path):
        args = analyze_args(ordinal_csv, tmp_path / 'bad')
        args[args.index('age,wealth')] = 'age,income'

        assert main(args) == 1

    def test_cratio_needs_ordinal_levels(self, ordinal_csv, tmp_path):
        args = analyze_args(ordinal_csv, tmp_path / 'nominal')
        args.remove('--ordinal')

        assert main(args) == 1

    def test_unreadable_csv_exits_with_one(self, tmp_path):
        path = tmp_path / 'broken.csv'
        path.write_bytes(b"educ,stunting,age,wealth,district\nnone,1,30,0.1,a\nprimary,\xff\xfe,31,0.2,b\n")

        assert main(analyze_args(path, tmp_path / 'broken')) == 1


class TestStudyCommands:
    def test_oracle(self, tmp_path):
        out_dir = tmp_path / 'oracle'
        assert main(['oracle', '--out', str(out_dir), '--n-oracle', '100000', '--gamma0', '0,0.5']) == 0

        frame = pd.read_csv(out_dir / 'oracle.csv')
        assert len(frame) == 3 * 2
        zero = frame[frame['gamma0'] == 0.0]
        np.testing.assert_allclose(zero['true_lower'], zero['true_upper'], atol=1e-6)

    def test_simulate(self, tmp_path):
        out_dir = tmp_path / 'study'
        code = main(['simulate', '--out', str(out_dir), '--n', '200', '--reps', '2', '--boot', '20',
                     '--n-oracle', '100000', '--gamma0', '0,0.5', '--contrast', '1:2', '--no-progress'])

        assert code == 0
        frame = pd.read_csv(out_dir / 'study.csv')
        assert len(frame) == 2
        assert set(frame['contrast']) == {'tau_1,2'}
        assert (out_dir / 'study.json').exists()


class TestReporting:
    def test_format_interval(self):
        assert format_interval(1.9712, 2.0249) == '(1.97, 2.02)'
        assert format_interval(None, 1.0) == '-'

    def test_gps_range_flags_low_values(self, three_arm_dataset):
        gps = np.full((three_arm_dataset.n, 3), 1 / 3)
        gps[0] = [0.001, 0.5, 0.499]
        report = gps_range_report(three_arm_dataset, gps, threshold=0.01)

        assert list(report['below_threshold']) == [1, 0, 0]
        assert report.loc[0, 'gps_min'] == 0.001
