import json
from pathlib import Path

import numpy as np
import pytest

from app.dtos.numerics import ProblemSpec, QuadratureRule, TensorGrid
from app.services.exp_weights import WeightTableCache
from app.services.experiment_worker import ExperimentWorker
from app.services.job_manager import JobManager

RESOURCES = Path(__file__).parent.parent / "resources"


@pytest.fixture(autouse=True)
def reset_singletons():
    WeightTableCache().clear()
    JobManager._instance = None
    ExperimentWorker._instance = None
    yield
    JobManager._instance = None
    ExperimentWorker._instance = None


@pytest.fixture
def rule():
    return QuadratureRule.gauss_legendre(3)


@pytest.fixture
def reference_tables():
    return json.loads((RESOURCES / "reference_tables.json").read_text())


@pytest.fixture
def experiment_config_data():
    def load(name):
        return json.loads((RESOURCES / "experiments" / f"{name}.json").read_text())
    return load


def unit_grid(*cells):
    dim = len(cells)
    return TensorGrid.from_cells([0.0] * dim, [1.0] * dim, cells)


def heat_problem(source, initial, exact=None, duration=1.0, diffusion=1.0, label="test"):
    """1D problem on [0, 1] for tests that need a hand-made source"""
    return ProblemSpec(
        label=label,
        lower=(0.0,),
        upper=(1.0,),
        diffusion=diffusion,
        duration=duration,
        source=source,
        initial=initial,
        exact=exact,
    )


def sine_mode(x):
    return np.sin(np.pi * x)
