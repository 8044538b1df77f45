"""
Closed-form Brownian distance covariance statistics.

An observation set is an ``(m, p)`` array holding ``m`` observations of a
``p``-dimensional random vector. Its BDC matrix is the double-centered
matrix of pairwise Euclidean distances between observations, and the
(unnormalized) sample BDC of two paired sets is ``trace(A.T @ B)``.

The ``1/m**2`` normalization of the V-statistic is deliberately left out
of :func:`bdc_value`; it cancels in :func:`bdcorr` and is absorbed by the
learnable temperature in the few-shot heads.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInputError, ShapeError

# Degenerate-variance threshold shared by the correlation functions.
_VAR_EPS = 1e-14


def as_observations(x, dtype=np.float64) -> np.ndarray:
    """Validate ``x`` and return it as a 2-D ``(m, p)`` array.

    One-dimensional input is read as ``m`` scalar observations.
    """
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ShapeError(f"observations must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"observation set is empty: shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("observation set contains non-finite entries")
    return arr


def _square(a, name="matrix") -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")
    return a


def pairwise_sq_dist(obs, dtype=np.float64) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``obs``.

    Uses the Gram identity ``|x_k|^2 + |x_l|^2 - 2 x_k.x_l``. Round-off
    negatives are clamped to zero and the diagonal is exactly zero.
    """
    x = as_observations(obs, dtype=dtype)
    gram = x @ x.T
    sq_norms = np.diag(gram)
    sq = sq_norms[:, None] + sq_norms[None, :] - 2.0 * gram
    sq = 0.5 * (sq + sq.T)
    np.maximum(sq, 0.0, out=sq)
    np.fill_diagonal(sq, 0.0)
    return sq


def sqrt_dist(sq) -> np.ndarray:
    """Entrywise ``sqrt(max(sq, 0))``; no epsilon is added."""
    sq = _square(sq, "squared distance matrix")
    return np.sqrt(np.maximum(sq, 0.0))


def double_center(dist) -> np.ndarray:
    """Subtract row and column means of ``dist`` and add back its grand mean.

    Equivalent to ``P @ dist @ P`` with ``P = I - ones/m``, so every row and
    column of the result sums to zero.
    """
    dist = _square(dist, "distance matrix")
    row_mean = dist.mean(axis=1, keepdims=True)
    col_mean = dist.mean(axis=0, keepdims=True)
    return dist - row_mean - col_mean + dist.mean()


def bdc_matrix(obs, dtype=np.float64) -> np.ndarray:
    """BDC matrix of an observation set (distance -> sqrt -> centering)."""
    return double_center(sqrt_dist(pairwise_sq_dist(obs, dtype=dtype)))


def bdc_value(a, b) -> float:
    """``trace(a.T @ b)`` for two BDC matrices of the same size."""
    a = _square(a)
    b = _square(b)
    if a.shape != b.shape:
        raise ShapeError(f"BDC matrices differ in size: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def vectorize(a, scaled: bool = True) -> np.ndarray:
    """Upper triangle of a symmetric matrix, row-major, as a flat vector.

    With ``scaled=True`` the strict off-diagonal entries are multiplied by
    ``sqrt(2)`` so that ``vectorize(a) @ vectorize(b) == trace(a.T @ b)``.
    ``scaled=False`` gives the raw upper triangle.
    """
    a = _square(a)
    rows, cols = np.triu_indices(a.shape[0])
    v = a[rows, cols].astype(np.float64, copy=True)
    if scaled:
        v[rows != cols] *= np.sqrt(2.0)
    return v


def unvectorize(v, scaled: bool = True) -> np.ndarray:
    """Inverse of :func:`vectorize`; returns the symmetric matrix."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    m = int(round((np.sqrt(8 * n + 1) - 1) / 2))
    if m * (m + 1) // 2 != n or v.ndim != 1:
        raise ShapeError(f"length {n} is not a triangular number")
    rows, cols = np.triu_indices(m)
    vals = v.copy()
    if scaled:
        vals[rows != cols] /= np.sqrt(2.0)
    a = np.zeros((m, m))
    a[rows, cols] = vals
    a[cols, rows] = vals
    return a


def vector_length(m: int) -> int:
    """Length of the vectorized form of an ``m x m`` BDC matrix."""
    return m * (m + 1) // 2


def bdcorr(x, y) -> float:
    """Brownian distance correlation of two paired observation sets.

    Returns 0 when either set is constant (zero self-BDC).

    >>> round(bdcorr([1.0, 2.0, 4.0], [2.0, 4.0, 8.0]), 12)
    1.0
    """
    x = as_observations(x)
    y = as_observations(y)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"paired sets differ in size: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise InvalidInputError("bdcorr needs at least two observations")
    a = bdc_matrix(x)
    b = bdc_matrix(y)
    vxx = bdc_value(a, a)
    vyy = bdc_value(b, b)
    if vxx < _VAR_EPS or vyy < _VAR_EPS:
        return 0.0
    r = bdc_value(a, b) / np.sqrt(vxx * vyy)
    return float(min(max(r, 0.0), 1.0))


def pearson_corr(x, y) -> float:
    """Classical correlation coefficient of two scalar samples."""
    x = as_observations(x)
    y = as_observations(y)
    if x.shape[1] != 1 or y.shape[1] != 1:
        raise ShapeError("pearson_corr takes scalar observations")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"paired sets differ in size: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise InvalidInputError("pearson_corr needs at least two observations")
    xc = x[:, 0] - x[:, 0].mean()
    yc = y[:, 0] - y[:, 0].mean()
    vx = np.mean(xc * xc)
    vy = np.mean(yc * yc)
    if vx < _VAR_EPS or vy < _VAR_EPS:
        return 0.0
    r = np.mean(xc * yc) / np.sqrt(vx * vy)
    return float(np.clip(r, -1.0, 1.0))
