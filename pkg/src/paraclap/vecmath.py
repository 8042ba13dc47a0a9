"""Dense vector/matrix kernels shared by the numeric modules.

All kernels are pure functions over float64 arrays. Feature matrices are
plain ``numpy.ndarray`` of shape (N, D), row-major, with finite entries;
``as_feature_matrix`` is the single validation choke point.
"""

from __future__ import annotations

import numpy as np

from .errors import DimMismatch, NonPositiveTau, ZeroNormRow

ZERO_NORM_EPS = 1e-12


def as_feature_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a validated (N, D) float64 array, N >= 1, D >= 1, finite."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimMismatch(f"{name} must be at least 1x1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def l2_normalize(m, eps: float = ZERO_NORM_EPS) -> np.ndarray:
    """Scale every row to unit L2 norm.

    Raises ZeroNormRow for the first row whose norm is <= eps.
    """
    arr = as_feature_matrix(m)
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(norms <= eps)
    if bad.size:
        i = int(bad[0])
        raise ZeroNormRow(i, float(norms[i]))
    return arr / norms[:, None]


def cosine_logits(queries, keys, tau: float) -> np.ndarray:
    """Pairwise cosine similarities divided by the temperature.

    Rows are normalized internally, so callers may pass raw embeddings.
    Output shape is (N_queries, N_keys).
    """
    q = as_feature_matrix(queries, "queries")
    k = as_feature_matrix(keys, "keys")
    if q.shape[1] != k.shape[1]:
        raise DimMismatch(
            f"queries dim {q.shape[1]} != keys dim {k.shape[1]}"
        )
    if not (tau > 0):
        raise NonPositiveTau(tau)
    return (l2_normalize(q) @ l2_normalize(k).T) / tau


def softmax_rows(z) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    arr = as_feature_matrix(z, "logits")
    shifted = arr - arr.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def logsumexp_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise log(sum(exp(z))), max-shifted. Input assumed validated."""
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))
