import numpy as np
from scipy import linalg


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; tolerates singular input (e.g. Q = 0)."""
    values, vectors = linalg.eigh(symmetrize(np.asarray(matrix, dtype=float)))
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def lower_factor(matrix: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor, retrying with growing diagonal jitter on failure."""
    matrix = symmetrize(np.asarray(matrix, dtype=float))
    scale = max(float(np.max(np.abs(np.diag(matrix)))), 1.0)
    for attempt in range(8):
        try:
            return linalg.cholesky(
                matrix + jitter * np.eye(matrix.shape[0]), lower=True
            )
        except linalg.LinAlgError:
            jitter = scale * 1e-12 * 10.0**attempt if jitter == 0.0 else jitter * 10.0
    raise linalg.LinAlgError("Matrix is not positive definite even after jitter")


def triangular_from_qr(stacked: np.ndarray) -> np.ndarray:
    """Lower factor L with L L^T = stacked @ stacked.T, via QR of the transpose.

    The diagonal is made nonnegative by flipping row signs of R.
    """
    r = linalg.qr(stacked.T, mode="r")[0]
    d = stacked.shape[0]
    r = r[:d, :d]
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return (r * signs[:, None]).T


def cholupdate(lower: np.ndarray, vector: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """Rank-one update (``sign > 0``) or downdate of a lower Cholesky factor.

    Returns L' with ``L' L'^T = L L^T + sign * v v^T``. Raises ``LinAlgError``
    when a downdate would lose positive definiteness.
    """
    out = np.array(lower, dtype=float)
    v = np.array(vector, dtype=float)
    sign = 1.0 if sign >= 0 else -1.0
    n = v.size
    for k in range(n):
        d = out[k, k]
        r_squared = d**2 + sign * v[k] ** 2
        if r_squared <= 0.0 or d == 0.0:
            if v[k] == 0.0 and d == 0.0:
                continue
            if sign > 0 and d == 0.0:
                # zero pivot: the update fills the column directly
                below = out[k + 1 :, k].copy()
                out[k, k] = abs(v[k])
                out[k + 1 :, k] = np.sign(v[k]) * v[k + 1 :]
                v[k + 1 :] = -np.sign(v[k]) * below
                continue
            raise linalg.LinAlgError(f"Cholesky downdate failed at pivot {k}")
        r = np.sqrt(r_squared)
        c = r / d
        s = v[k] / d
        out[k, k] = r
        out[k + 1 :, k] = (out[k + 1 :, k] + sign * s * v[k + 1 :]) / c
        v[k + 1 :] = c * v[k + 1 :] - s * out[k + 1 :, k]
    return out
