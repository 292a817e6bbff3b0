import numpy as np
import pytest

from subvarid.lti_core import StateSpaceModel

# 4th-order SISO benchmark in controllable canonical form, with its
# experiment constraints (noise bound, output/input safety bounds).
CANONICAL_A = np.array(
    [
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [-1.23, -2.17, -1.42, -1.21],
    ]
)
CANONICAL_B = np.array([[0.0], [0.0], [0.0], [1.0]])
CANONICAL_C = np.array([[0.82, 0.17, -0.28, 0.27]])
CANONICAL_X0 = np.array([0.0, 0.5, 0.3, 1.0])
DELTA = 0.05
Y_MAX = 100.0
U_MAX = 10.0


@pytest.fixture(scope="session")
def canonical():
    return StateSpaceModel(A=CANONICAL_A, B=CANONICAL_B, C=CANONICAL_C)


def random_minimal_model(rng, m, n=1, p=1, spectral_radius=0.95):
    """Random minimal model with the requested spectral radius bound."""
    for _ in range(100):
        A = rng.normal(size=(m, m))
        ev = np.max(np.abs(np.linalg.eigvals(A)))
        A = A * (spectral_radius / ev) * rng.uniform(0.5, 1.0)
        B = rng.normal(size=(m, p))
        C = rng.normal(size=(n, m))
        model = StateSpaceModel(A=A, B=B, C=C)
        if model.is_minimal():
            return model
    raise RuntimeError("failed to draw a minimal model")
