"""Pure-Python (numpy) kernels; used when the compiled module is unavailable."""

from __future__ import annotations

import numpy as np

# points already on the simplex to this tolerance are returned unchanged,
# which makes projection exactly idempotent
ON_SIMPLEX_TOL = 1e-12


def project_simplex(v: np.ndarray) -> np.ndarray:
    v = np.ascontiguousarray(v, dtype=np.float64)
    n = v.shape[0]
    if v.min() >= 0.0 and abs(v.sum() - 1.0) <= ON_SIMPLEX_TOL:
        return v.copy()
    # shifting by the max is exact for the projection and keeps theta small
    s = v - v.max()
    u = np.sort(s)[::-1]
    css = np.cumsum(u)
    rho = 0
    for j in range(n):
        if u[j] - (css[j] - 1.0) / (j + 1) > 0.0:
            rho = j
    theta = (css[rho] - 1.0) / (rho + 1)
    return np.maximum(s - theta, 0.0)


def min_norm_pg(gram: np.ndarray, step: float, max_iter: int, tol: float):
    """Accelerated projected gradient on ``0.5 * g' G g`` over the simplex.

    Starts at the uniform point, uses Nesterov momentum with a function-value
    restart and stops once the Frank-Wolfe gap ``g'Gg - min_j (Gg)_j`` (an
    upper bound on the suboptimality of ``g'Gg``) is at most ``tol``.
    Returns ``(weights, iterations)``.
    """
    gram = np.ascontiguousarray(gram, dtype=np.float64)
    n = gram.shape[0]
    gamma = np.full(n, 1.0 / n)
    y = gamma.copy()
    t = 1.0
    grad = gram @ gamma
    f = float(gamma @ grad)
    for it in range(max_iter):
        if f - grad.min() <= tol:
            return gamma, it
        nxt = project_simplex(y - step * (gram @ y))
        grad_nxt = gram @ nxt
        f_nxt = float(nxt @ grad_nxt)
        if f_nxt > f and t > 1.0:
            # momentum overshot: restart from the current iterate
            t = 1.0
            y = gamma.copy()
            continue
        t_nxt = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = nxt + ((t - 1.0) / t_nxt) * (nxt - gamma)
        gamma, grad, f, t = nxt, grad_nxt, f_nxt, t_nxt
    return gamma, max_iter
