# tests/conftest.py
import copy
import json
from importlib import resources

import numpy as np
import pytest

from safehood.models.loader import load_model
from safehood.verification.bisim import build_metrics

BUNDLED = "paper_sec2_5"


def bundled_doc() -> dict:
    text = resources.files("safehood.data").joinpath(f"{BUNDLED}.json").read_text(encoding="utf-8")
    return json.loads(text)


def model_from(doc: dict):
    return load_model(json.dumps(doc))


def spiral_doc() -> dict:
    """
    Two-guard model with coupled dynamics in the start location: the flow
    spirals towards (-0.5, 0.5) and leaves x1 >= 0 through the upper guard.
    """
    return {
        "name": "spiral",
        "dimension": 2,
        "locations": [
            {
                "id": "a",
                "A": [[-1.0, 1.0], [-1.0, -1.0]],
                "b": [-1.0, 0.0],
                "invariant": {"H": [[-1.0, 0.0]], "h": [0.0]},
            },
            {"id": "b", "A": [[-1.0, 0.0], [0.0, -2.0]], "b": [0.0, 0.0]},
            {"id": "c", "A": [[-2.0, 0.0], [0.0, -1.0]], "b": [0.0, 0.0]},
        ],
        "events": [
            {
                "id": "up",
                "source": "a",
                "target": "b",
                "guard": {"H": [[1.0, 0.0], [-1.0, 0.0], [0.0, -1.0]], "h": [0.0, 0.0, 0.0]},
                "facet": 0,
            },
            {
                "id": "down",
                "source": "a",
                "target": "c",
                "guard": {
                    "H": [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]],
                    "h": [0.0, 0.0, 0.0],
                    "strict": [False, False, True],
                },
                "facet": 0,
            },
        ],
        "unsafe": [
            {"location": "b", "H": [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], "h": [-2.0, 3.0, 3.0, -2.0]},
        ],
        "initial": {"location": "a", "point": [1.0, 0.8]},
        "config": {"t_end": 3.0, "d_thr": 0.1},
    }


def ball_samples(center: np.ndarray, M: np.ndarray, radius: float, count: int, rng) -> np.ndarray:
    """Uniform samples of the open phi-ball around center, kept off its boundary."""
    L = np.linalg.cholesky(M)
    u = rng.normal(size=(count, center.size))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u *= rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / center.size)
    return center + 0.999 * radius * np.linalg.solve(L.T, u.T).T


def box_distance(M_diag: np.ndarray, X: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """phi-distance from each row of X to an axis-aligned box when M is diagonal."""
    gap = np.maximum(lo - X, 0.0) + np.maximum(X - hi, 0.0)
    return np.sqrt(np.sum(M_diag * gap**2, axis=1))


@pytest.fixture
def example_doc() -> dict:
    return copy.deepcopy(bundled_doc())


@pytest.fixture(scope="session")
def example():
    return model_from(bundled_doc())


@pytest.fixture(scope="session")
def cfg(example):
    return example.config


@pytest.fixture(scope="session")
def metrics(example, cfg):
    return build_metrics(example, cfg.dist_tol)


@pytest.fixture(scope="session")
def corner_state() -> np.ndarray:
    """l3 start whose flow reaches x1 = 1 and x2 = 1 at the same time."""
    return np.array([1.9 ** (1.0 / 3.0), 1.9])
