import numpy as np
import pytest

from powerlab import (
    ProbRow,
    build_synthetic_two_step,
    make_rng,
    model_from_rows,
    random_tabular_model,
)


@pytest.fixture
def coin_model():
    """Single step over two tokens, p = [0.8, 0.2]."""
    rows = {(0, ()): ProbRow.from_probs(np.array([0.8, 0.2]))}
    return model_from_rows((2,), (0,), rows)


@pytest.fixture
def handmade_two():
    """Two steps, two tokens each, rows chosen for hand arithmetic.

    Root [0.75, 0.25]; after 0 the suffix is uniform, after 1 it is
    [0.9, 0.1]. Sequences (0,0) and (0,1) tie at probability 0.375.
    """
    rows = {
        (0, ()): ProbRow.from_probs(np.array([0.75, 0.25])),
        (0, (0,)): ProbRow.from_probs(np.array([0.5, 0.5])),
        (0, (1,)): ProbRow.from_probs(np.array([0.9, 0.1])),
    }
    return model_from_rows((2, 2), (0,), rows)


@pytest.fixture
def uniform_two():
    rows = {
        (0, ()): ProbRow.from_probs(np.array([0.5, 0.5])),
        (0, (0,)): ProbRow.from_probs(np.array([0.5, 0.5])),
        (0, (1,)): ProbRow.from_probs(np.array([0.5, 0.5])),
    }
    return model_from_rows((2, 2), (0,), rows)


@pytest.fixture
def tiny_random():
    return random_tabular_model((3, 2, 3), make_rng(7))


@pytest.fixture
def two_step_small():
    return build_synthetic_two_step(3, 2, 1.0)


@pytest.fixture(scope="session")
def appendix_model():
    """The full-size two-step synthetic: 64 first tokens, 256 suffixes."""
    return build_synthetic_two_step(64, 256, 1.05)
