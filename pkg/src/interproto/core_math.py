"""Dense numerics shared by the losses, encoder and evaluation code.

Matrices follow a column convention throughout: a ``d x n`` prototype
matrix holds one identity per column, and a ``d x N`` feature matrix holds
one sample per column. Everything is computed in float64.
"""

import warnings

import numpy as np

# Clamp applied to cosines before arccos (ArcFace margin).
COS_CLAMP = 1e-7


def as_matrix(m, name="matrix"):
    """Return ``m`` as a finite 2-D float64 array or raise ValueError."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


def l2_normalize_columns(m, epsilon=1e-12):
    """Scale every column of ``m`` to unit Euclidean norm.

    Columns whose norm falls below ``epsilon`` are returned unchanged.

    Returns
    -------
    normalized : ndarray, same shape as ``m``
    small : ndarray of bool, one flag per column that was left unchanged
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    a = as_matrix(m)
    norms = np.sqrt(np.sum(a * a, axis=0))
    small = norms < epsilon
    safe = np.where(small, 1.0, norms)
    return a / safe, small


def column_norms(a, name="matrix"):
    norms = np.sqrt(np.einsum("ij,ij->j", a, a))
    if not norms.all():
        zero = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"{name} column {zero} has zero norm")
    return norms


def cosine_matrix(a, b):
    """Cosine of the angle between every column of ``a`` and every column of ``b``.

    ``out[i, j]`` compares column ``i`` of ``a`` with column ``j`` of ``b``.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row mismatch: a has {a.shape[0]} rows, b has {b.shape[0]}")
    an = a / column_norms(a, "a")
    bn = b / column_norms(b, "b")
    return an.T @ bn


def log_sum_exp(v):
    """Numerically stable ``log(sum(exp(v)))`` over a 1-D vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    top = np.max(v)
    return float(top + np.log(np.sum(np.exp(v - top))))


def log_sum_exp_columns(z):
    """Column-wise :func:`log_sum_exp` of a (..., rows, cols) array."""
    top = np.max(z, axis=-2, keepdims=True)
    return top[..., 0, :] + np.log(np.sum(np.exp(z - top), axis=-2))


def pca_2d(points):
    """Project row-vector ``points`` (k x dim) onto their top two principal axes.

    The sign of each axis is fixed so that its largest-magnitude loading
    is positive. When the centred data spans fewer than two directions
    the second output column is zero and a warning is emitted.
    """
    x = as_matrix(points, "points")
    k, dim = x.shape
    if k < 3 or dim < 2:
        raise ValueError(f"pca_2d needs >= 3 points of dimension >= 2, got {x.shape}")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / k
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    axes = evecs[:, order[:2]].copy()
    tol = max(evals[0], 0.0) * 1e-12 + 1e-15
    for j in range(2):
        col = axes[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            axes[:, j] = -col
    out = centred @ axes
    if evals[0] <= tol:
        return np.zeros((k, 2))
    if evals[1] <= tol:
        warnings.warn("pca_2d: fewer than two non-zero principal directions", RuntimeWarning)
        out[:, 1] = 0.0
    return out


def finite_diff_grad(f, x, h=1e-5, batched=False):
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape).

    With ``batched=True``, ``f`` receives every perturbed copy at once as
    an array of shape ``(2 * x.size, *x.shape)`` (all ``+h`` copies, then
    all ``-h`` copies) and must return one value per copy.
    """
    x0 = np.array(x, dtype=np.float64)
    size = x0.size
    if batched:
        stack = np.repeat(x0[None], 2 * size, axis=0)
        flat = stack.reshape(2 * size, size)
        idx = np.arange(size)
        flat[idx, idx] = x0.reshape(-1) + h
        flat[size + idx, idx] = x0.reshape(-1) - h
        values = np.asarray(f(stack), dtype=np.float64).reshape(-1)
        if values.size != 2 * size:
            raise ValueError(f"batched f returned {values.size} values for {2 * size} inputs")
        fp, fm = values[:size], values[size:]
        bad = np.flatnonzero(~(np.isfinite(fp) & np.isfinite(fm)))
        if bad.size:
            raise FloatingPointError(f"non-finite function value perturbing coordinate {int(bad[0])}")
        return ((fp - fm) / (2.0 * h)).reshape(x0.shape)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    g = grad.reshape(-1)
    for i in range(size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x0)
        flat[i] = orig - h
        fm = f(x0)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value perturbing coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-5):
    """Largest entrywise relative error between two gradient arrays.

    The denominator is ``max(|a|, |n|, floor * max(1, max|n|))``; entries
    far below the tensor's own scale are compared at that scale, where the
    finite-difference roundoff lives.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = floor * max(1.0, float(np.max(np.abs(n), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), scale)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))
