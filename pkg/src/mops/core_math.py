"""Simplex geometry, the min-norm weight solver and a finite-difference oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import InvalidArgument, NumericFailure
from .rng import RngState, prng_draw  # noqa: F401  (re-exported)

MIN_NORM_MAX_ITER = 10_000
MIN_NORM_TOL = 1e-8
SIMPLEX_TOL = 1e-12


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgument(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise NumericFailure(f"{name} contains non-finite entries")
    return arr


def is_on_simplex(w, tol: float = SIMPLEX_TOL) -> bool:
    w = np.asarray(w, dtype=np.float64)
    return bool(w.size >= 1 and np.all(w >= 0.0) and abs(w.sum() - 1.0) <= tol)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based, exact)."""
    v = as_vector(v, "v")
    if v.size == 0:
        raise InvalidArgument("cannot project an empty vector")
    return kernels.project_simplex(v)


def stack_gradients(grads: Sequence) -> np.ndarray:
    if len(grads) == 0:
        raise InvalidArgument("need at least one gradient")
    rows = [np.asarray(g, dtype=np.float64).ravel() for g in grads]
    dim = rows[0].size
    if any(r.size != dim for r in rows):
        raise InvalidArgument("gradients have mismatched dimensions")
    mat = np.vstack(rows)
    if not np.all(np.isfinite(mat)):
        raise NumericFailure("gradients contain non-finite entries")
    return mat


def min_norm_weights(grads: Sequence, max_iter: int = MIN_NORM_MAX_ITER,
                     tol: float = MIN_NORM_TOL) -> tuple[np.ndarray, float]:
    """Simplex weights minimising ``||sum_i w_i g_i||`` and the achieved norm.

    Projected gradient on the Gram matrix with step ``1 / lambda_max``, started
    at the uniform point (so ties resolve toward uniform).  The stopping rule
    bounds the suboptimality of the squared norm by ``tol`` times the largest
    squared gradient norm, which keeps the weights invariant to a common
    positive rescaling of the gradients.
    """
    mat = stack_gradients(grads)
    n = mat.shape[0]
    if n == 1:
        return np.ones(1), float(np.linalg.norm(mat[0]))
    gram = mat @ mat.T
    scale = float(np.max(np.diag(gram)))
    lam_max = float(np.linalg.eigvalsh(gram)[-1])
    if scale == 0.0 or lam_max <= 0.0:
        return np.full(n, 1.0 / n), 0.0
    # f - f* <= 2 * gap for f = ||G^T w||^2, hence the factor 1/2
    weights, _ = kernels.min_norm_pg(gram, 1.0 / lam_max, int(max_iter), 0.5 * tol * scale)
    return weights, float(np.linalg.norm(weights @ mat))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_j) - f(x - h e_j)) / 2h`` per coordinate."""
    if not h > 0:
        raise InvalidArgument("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = float(f(x))
        flat[j] = orig - h
        fm = float(f(x))
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericFailure(f"non-finite function value at coordinate {j}")
        out[j] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)
