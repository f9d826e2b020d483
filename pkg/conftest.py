"""
Shared fixtures for the DD-Search tests
"""

import os
import sys

import numpy as np
import pytest

# Add the current directory to Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from ddsearch.material import sample_dataset
from ddsearch.models import MaterialDataset
from ddsearch.phase_space import MetricC, bind_metric, metric_or_fallback

SLOW = os.getenv("DDSEARCH_RUN_SLOW") == "1"
slow = pytest.mark.skipif(not SLOW, reason="set DDSEARCH_RUN_SLOW=1 to run the slow reproductions")


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    """Keep DDSEARCH_* settings and stray .env files out of every test"""
    for key in list(os.environ):
        if key.startswith("DDSEARCH_") and key != "DDSEARCH_RUN_SLOW":
            monkeypatch.delenv(key, raising=False)
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def bound_from_mapped(mapped) -> MaterialDataset:
    """Data set whose mapped coordinates are the points themselves (identity metric)"""
    mapped = np.asarray(mapped, dtype=np.float64)
    return MaterialDataset(points=mapped, mapped=mapped, metric=MetricC.scaled_identity(1.0))


def sampled_bound(n: int, seed: int = 0) -> MaterialDataset:
    """Material data set bound to its PCA metric"""
    raw = sample_dataset(n, seed=seed)
    return bind_metric(raw, metric_or_fallback(raw))


@pytest.fixture(scope="session")
def material_data():
    return sampled_bound(2000, seed=3)


@pytest.fixture
def random_cloud(rng):
    return bound_from_mapped(rng.normal(size=(1500, 12)))
