import numpy as np
import pytest

from apicascade import CorpusSpec, generate_synthetic_corpus


def tiny_spec(n_samples: int = 200) -> CorpusSpec:
    return CorpusSpec(
        n_samples=n_samples,
        labels=("a", "b"),
        services=(("cheap", 5000.0), ("mid", 20000.0), ("dear", 36000.0)),
        accuracy=((0.62, 0.74), (0.78, 0.70), (0.86, 0.80)),
        informativeness=(0.9, 0.7, 0.8),
    )


@pytest.fixture(scope="session")
def tiny_instance():
    """A 3-service, 2-label, 200-sample corpus used across solver tests."""
    return generate_synthetic_corpus(tiny_spec(), seed=7)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_instance):
    return tiny_instance[0]


@pytest.fixture(scope="session")
def tiny_catalog(tiny_instance):
    return tiny_instance[1]


def budget_knots(catalog, grid_m: int) -> list[float]:
    span = 2.0 * float(np.max(catalog.unit_costs()))
    return [m * span / grid_m for m in range(1, grid_m + 1)]
