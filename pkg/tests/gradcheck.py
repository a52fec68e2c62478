"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

STEP = 1e-5


def numeric_grad(f, arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        hi = f()
        arr[i] = old - step
        lo = f()
        arr[i] = old
        grad[i] = (hi - lo) / (2 * step)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))
