"""
Shared pytest fixtures: small in-process datasets and an isolated artifact store
"""

import numpy as np
import pytest

from config import Config
from dataset import EvalDataset, Schema


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_dataset(n: int = 200, seed: int = 0, shift: float = 1.0, noise: float = 1.0,
                 prevalence: float = 0.4) -> EvalDataset:
    """Two attributes (g: a/b, h: x/y/z), one covariate c, score = -1 + shift*y + 0.3*[g=b] + 0.5*c + noise"""
    rng = np.random.default_rng(seed)
    schema = Schema(attributes=(("g", ("a", "b")), ("h", ("x", "y", "z"))), covariates=("c",))
    codes = np.column_stack([rng.integers(0, 2, n), rng.integers(0, 3, n)])
    labels = (rng.random(n) < prevalence).astype(np.int8)
    # every (g, h, y) combination present at least once
    combos = [(g, h, y) for g in range(2) for h in range(3) for y in range(2)]
    for i, (g, h, y) in enumerate(combos[:n]):
        codes[i] = (g, h)
        labels[i] = y
    c = rng.normal(size=n)
    scores = -1.0 + shift * labels + 0.3 * codes[:, 0] + 0.5 * c + noise * rng.normal(size=n)
    return EvalDataset(schema=schema, codes=codes, covariates=c[:, None], labels=labels, scores=scores)


@pytest.fixture
def small_dataset():
    return make_dataset()


@pytest.fixture
def artifact_db(tmp_path, monkeypatch):
    """Point the artifact store at a fresh file for one test"""
    from database import init_db

    path = str(tmp_path / "artifacts.db")
    monkeypatch.setattr(Config, "DATABASE_NAME", path)
    init_db()
    return path
