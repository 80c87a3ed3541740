import numpy as np
import pytest

from crossfuse import tensor_core as tc


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_gradient(loss_fn, tensor: tc.Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued loss over every
    coordinate of `tensor`.  Independent of the tape machinery."""
    base = np.array(tensor.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        lp = loss_fn(tc.Tensor(bumped.reshape(base.shape), dtype=np.float64))
        bumped[i] = flat[i] - eps
        lm = loss_fn(tc.Tensor(bumped.reshape(base.shape), dtype=np.float64))
        gflat[i] = (lp - lm) / (2.0 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
