"""Shared fixtures: small deterministic datasets and the --runslow switch."""

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit, softmax

from core import ObservationalDataset


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def _draw(rng, probs):
    u = rng.random(probs.shape[0])
    return np.minimum((u[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1), probs.shape[1] - 1)


def make_dataset(rng, n=200, n_arms=3, d=2, coef_scale=0.5, binary_outcome=False) -> ObservationalDataset:
    """Random multi-arm dataset with an intercept column and every arm populated."""
    X = np.column_stack([np.ones(n), rng.normal(size=(n, d))])
    B = rng.normal(scale=coef_scale, size=(n_arms, d + 1))
    B[0] = 0.0
    treatment = _draw(rng, softmax(X @ B.T, axis=1)) + 1
    treatment[:n_arms] = np.arange(1, n_arms + 1)
    signal = X[:, 1] + 0.3 * treatment
    if binary_outcome:
        outcome = (rng.random(n) < expit(signal)).astype(float)
    else:
        outcome = signal + rng.normal(size=n)
    return ObservationalDataset(covariates=X, treatment=treatment, outcome=outcome, n_arms=n_arms)


def write_ordinal_csv(path, rng, n=400):
    """Four-level ordinal treatment CSV with a categorical covariate, assigned stage by stage."""
    levels = ['none', 'primary', 'secondary', 'higher']
    age = rng.normal(30, 8, size=n).round(1)
    wealth = rng.normal(size=n).round(3)
    district = rng.choice(['a', 'b', 'c'], size=n)
    eta = 0.03 * (age - 30) + 0.4 * wealth + 0.3 * (district == 'b')
    treatment = np.full(n, 3)
    remaining = np.ones(n, dtype=bool)
    for stage, intercept in enumerate([-1.0, -0.5, 0.0]):
        stop = remaining & (rng.random(n) < expit(intercept - eta))
        treatment[stop] = stage
        remaining &= ~stop
    treatment[:4] = np.arange(4)
    outcome = (0.5 * treatment + 0.2 * wealth + rng.normal(size=n)).round(4)
    frame = pd.DataFrame({
        'educ': [levels[t] for t in treatment],
        'stunting': outcome,
        'age': age,
        'wealth': wealth,
        'district': district,
    })
    frame.to_csv(path, index=False)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def dataset_factory():
    return make_dataset


@pytest.fixture
def three_arm_dataset(rng):
    return make_dataset(rng, n=300, n_arms=3)


@pytest.fixture
def binary_dataset(rng):
    return make_dataset(rng, n=250, n_arms=2, d=1)


@pytest.fixture
def ordinal_csv(tmp_path, rng):
    return write_ordinal_csv(tmp_path / 'ordinal.csv', rng)
