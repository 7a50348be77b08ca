import numpy as np
import pytest


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f wrt every entry of x.

    Perturbs x in place and restores it; x must be float64 for the stated
    tolerances to be meaningful.
    """
    flat = x.ravel()
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f()
        flat[j] = orig - h
        fm = f()
        flat[j] = orig
        grad[j] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def rel_err(analytic: np.ndarray, numeric: np.ndarray,
            floor: float = 1e-6) -> float:
    """Max abs difference over the larger of the two scales (with a floor so
    exactly-zero gradients compare as equal)."""
    denom = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


@pytest.fixture
def rng64():
    from orbitmoe.tensor_core import Rng
    return Rng(1234)
