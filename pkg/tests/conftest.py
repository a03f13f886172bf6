import numpy as np
import pytest

from drmd.data import DriftGenConfig, generate_drift_dataset
from drmd.mdp import Sample


def separable_config(seed: int = 7) -> DriftGenConfig:
    """Stationary, effectively separable stream: 2,000 samples, 20 informative of 50 features."""
    return DriftGenConfig(feature_dim=50, months=4, samples_per_month=500, malware_rate=0.1, n_informative=20,
                          drift_rate=0.0, base_activation={"goodware": 0.05, "malware": 0.8}, seed=seed)


@pytest.fixture(scope="session")
def separable():
    samples = generate_drift_dataset(separable_config())
    train = [s for s in samples if s.month < 3]
    holdout = [s for s in samples if s.month == 3]
    return train, holdout


def tiny_stream(months=6, per_month=120, dim=30, seed=3, drift=0.1):
    cfg = DriftGenConfig(feature_dim=dim, months=months, samples_per_month=per_month, n_informative=10,
                         drift_rate=drift, base_activation={"goodware": 0.05, "malware": 0.6}, seed=seed)
    return generate_drift_dataset(cfg)


def make_sample(month=0, label=0, features=(), sid=None):
    return Sample(sid or f"s{month}-{label}-{len(features)}", month, label, tuple(features))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
