import numpy as np
import pytest

from bfel.config import from_dict


def small_config(**overrides):
    """A few-second federation: 1 task, 4 workers, 4 miners, small MLP."""
    doc = {
        "name": "small", "seed": 3, "scenario": "bfel-gcs", "rounds": 8,
        "federation": {"tasks": 1, "workers_per_task": 4, "miners_per_task": 4,
                       "anchor_period": 3},
        "training": {"learning_rate": 0.1, "batch_size": 32,
                     "model": {"kind": "mlp", "hidden": 16},
                     "dataset": {"source": "synthetic", "samples": 800, "dim": 20,
                                 "num_classes": 4}},
        "compression": {"rho": 5, "momentum": 0.9, "clip_norm": 1.0},
    }
    cfg = from_dict(doc)
    return cfg.with_overrides(**overrides) if overrides else cfg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
