import numpy as np
import pytest

from msplora.linalg import Matrix, make_rng

H = 1e-5
REL_TOL = 1e-5
# below this magnitude a gradient entry is compared in absolute terms (REL_TOL * GRAD_FLOOR)
GRAD_FLOOR = 1e-4


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


def central_diff(f, arr: np.ndarray, idx, h: float = H) -> float:
    """d f() / d arr[idx], perturbing ``arr`` in place and restoring it."""
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


@pytest.fixture
def rng():
    return make_rng(1234)


def rand(rng, r, c, std=1.0) -> Matrix:
    return Matrix.normal(r, c, std, rng)
