"""Central finite differences, independent of the tape."""

import numpy as np


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f() / d arr by perturbing ``arr`` in place, one entry at a time."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error; 0 when both sides vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
