"""Optimisation, generalisation and conflict errors, bound curves and fits.

All error functions take per-agent gradient vectors expressed in one joint
parameter space (shared block followed by every agent's private block), so
agents that do not own a block simply carry zeros there.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares, nnls

from .core_math import is_on_simplex, min_norm_weights, stack_gradients
from .errors import InvalidArgument


@dataclass
class MetricsRecord:
    round: int
    o_err: float
    o_err_agents: tuple[float, ...]
    g_err: float
    c_err: float
    min_norm: float
    gamma: tuple[float, ...]
    flops_agent: int = 0
    flops_ctrl: int = 0
    bytes: int = 0
    g_err_agents: tuple[float, ...] = ()

    def __post_init__(self):
        for name in ("o_err", "g_err", "c_err", "min_norm"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise InvalidArgument(f"{name}={value} must be finite and nonnegative")


def csv_header(n_agents: int) -> list[str]:
    return (["round", "o_err", "g_err", "c_err", "min_norm"]
            + [f"gamma_{i}" for i in range(n_agents)]
            + ["flops_agent", "flops_ctrl", "bytes"])


def records_to_csv(records: Sequence[MetricsRecord]) -> str:
    n = len(records[0].gamma) if records else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(n))
    for r in records:
        writer.writerow([r.round, repr(r.o_err), repr(r.g_err), repr(r.c_err), repr(r.min_norm)]
                        + [repr(g) for g in r.gamma]
                        + [r.flops_agent, r.flops_ctrl, r.bytes])
    return buf.getvalue()


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    """Columns of a metrics CSV; raises ``InvalidArgument`` on malformed files."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidArgument(f"{path}: empty metrics file")
    header = rows[0]
    if header[:5] != ["round", "o_err", "g_err", "c_err", "min_norm"] or header[-3:] != [
            "flops_agent", "flops_ctrl", "bytes"]:
        raise InvalidArgument(f"{path}: unexpected header {header}")
    cols: dict[str, list[float]] = {h: [] for h in header}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InvalidArgument(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            values = [float(v) for v in row]
        except ValueError as exc:
            raise InvalidArgument(f"{path}:{lineno}: {exc}") from exc
        if not all(math.isfinite(v) for v in values):
            raise InvalidArgument(f"{path}:{lineno}: non-finite value")
        for h, v in zip(header, values):
            cols[h].append(v)
    return {h: np.array(v) for h, v in cols.items()}


def _weights(gamma, n: int) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (n,):
        raise InvalidArgument(f"expected {n} weights, got shape {gamma.shape}")
    return gamma


def o_error(grads: Sequence, gamma) -> tuple[float, np.ndarray]:
    """Joint error ``||sum_i gamma_i grad_i||`` and per-agent ``||grad_i||``."""
    mat = stack_gradients(grads)
    gamma = _weights(gamma, mat.shape[0])
    return float(np.linalg.norm(gamma @ mat)), np.linalg.norm(mat, axis=1)


def g_error(train_grads: Sequence, population_grads: Sequence, gamma) -> tuple[float, np.ndarray]:
    """Joint ``||sum_i gamma_i (train_i - population_i)||`` and per-agent discrepancies."""
    if len(train_grads) != len(population_grads):
        raise InvalidArgument("train and population gradients cover different agent sets")
    a = stack_gradients(train_grads)
    b = stack_gradients(population_grads)
    if a.shape != b.shape:
        raise InvalidArgument("train and population gradients differ in dimension")
    gamma = _weights(gamma, a.shape[0])
    diff = a - b
    return float(np.linalg.norm(gamma @ diff)), np.linalg.norm(diff, axis=1)


def c_error(grads: Sequence, gamma, optimal=None) -> float:
    """``||sum_i (gamma_i - gamma*_i) grad_i||`` with gamma* the min-norm weights."""
    mat = stack_gradients(grads)
    gamma = _weights(gamma, mat.shape[0])
    if optimal is None:
        optimal, _ = min_norm_weights(mat)
    return float(np.linalg.norm((gamma - np.asarray(optimal)) @ mat))


@dataclass
class ErrorSnapshot:
    o_err: float
    o_err_agents: np.ndarray
    c_err: float
    min_norm: float
    optimal_weights: np.ndarray
    g_err: float = 0.0
    g_err_agents: np.ndarray = field(default_factory=lambda: np.zeros(0))


def evaluate_errors(grads: Sequence, gamma, population_grads: Sequence | None = None) -> ErrorSnapshot:
    mat = stack_gradients(grads)
    gamma = _weights(gamma, mat.shape[0])
    if not is_on_simplex(gamma, 1e-9):
        raise InvalidArgument("weights are not on the simplex")
    o_joint, o_agents = o_error(mat, gamma)
    optimal, norm = min_norm_weights(mat)
    snap = ErrorSnapshot(o_joint, o_agents, c_error(mat, gamma, optimal), norm, optimal)
    if population_grads is not None:
        snap.g_err, snap.g_err_agents = g_error(mat, population_grads, gamma)
    else:
        snap.g_err_agents = np.zeros(mat.shape[0])
    return snap


# -- theoretical bound curves ---------------------------------------------------

BOUND_KINDS = ("O-static", "O-dynamic", "G", "C-dynamic")


@dataclass
class BoundConstants:
    c_I: float = math.nan
    mu_g: float = math.nan
    mu_l: float = math.nan
    G: float = math.nan
    V: float = math.nan
    D: float = math.nan

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("c_I", "mu_g", "mu_l", "G", "V", "D")}


def _require(consts: BoundConstants, names: Sequence[str], allow_zero: bool = True) -> None:
    for name in names:
        v = getattr(consts, name)
        if not math.isfinite(v) or v < 0 or (v == 0 and not allow_zero):
            raise InvalidArgument(f"bound constant {name}={v} must be finite and positive")


def bound_curve(kind: str, consts: BoundConstants, T: float, beta: float = 0.0,
                eta: float = 0.0, D: float | None = None) -> float:
    """Closed-form error bounds as functions of rounds, step sizes and data size.

    ``O-static``:  sqrt(c_I / (beta T)) + sqrt(beta mu_g mu_l^2 / 2)
    ``O-dynamic``: the above + 3 sqrt(eta mu_l^4 / 2)
    ``G``:         8 G sqrt(T / D) + sqrt(V / D)
    ``C-dynamic``: 4 / (eta T) + 6 sqrt(3 mu_g mu_l^2 beta / eta) + 3 eta mu_l^4

    Constants may be zero (degenerate terms); negative or non-finite ones are
    rejected, as are nonpositive ``T``, ``D`` and whichever step size divides.
    """
    if kind not in BOUND_KINDS:
        raise InvalidArgument(f"unknown bound kind {kind!r}")
    if T <= 0:
        raise InvalidArgument("T must be positive")
    if beta < 0 or eta < 0:
        raise InvalidArgument("step sizes must be nonnegative")
    if kind in ("O-static", "O-dynamic"):
        _require(consts, ["c_I", "mu_g", "mu_l"])
        if beta <= 0:
            raise InvalidArgument("beta must be positive for the O-error bound")
        value = math.sqrt(consts.c_I / (beta * T)) + math.sqrt(beta * consts.mu_g * consts.mu_l**2 / 2)
        if kind == "O-dynamic":
            value += 3 * math.sqrt(eta * consts.mu_l**4 / 2)
        return value
    if kind == "G":
        _require(consts, ["G", "V"])
        d = consts.D if D is None else D
        if not d or d <= 0 or not math.isfinite(d):
            raise InvalidArgument("D must be positive for the G-error bound")
        return 8 * consts.G * math.sqrt(T / d) + math.sqrt(consts.V / d)
    _require(consts, ["mu_g", "mu_l"])
    if eta <= 0:
        raise InvalidArgument("eta must be positive for the C-error bound")
    return (4 / (eta * T) + 6 * math.sqrt(3 * consts.mu_g * consts.mu_l**2 * beta / eta)
            + 3 * eta * consts.mu_l**4)


# -- fitting ---------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    """Average error of one run together with its design point."""

    kind: str
    T: float
    beta: float
    eta: float
    D: float
    error: float


@dataclass
class FitResult:
    constants: BoundConstants
    residual: float
    identified: tuple[str, ...]
    coefficients: dict


# coefficient vector: a=sqrt(c_I), b=sqrt(mu_g mu_l^2), m=mu_l^2, G, s=sqrt(V)
_COEFS = ("a", "b", "m", "G", "s")


def _design_row(obs: Observation) -> tuple[np.ndarray, float, float]:
    """Linear part, the coefficient of m^2 and the constant offset for one observation."""
    row = np.zeros(5)
    quad = 0.0
    offset = 0.0
    if obs.kind in ("O-static", "O-dynamic"):
        row[0] = 1.0 / math.sqrt(obs.beta * obs.T)
        row[1] = math.sqrt(obs.beta / 2)
        if obs.kind == "O-dynamic":
            row[2] = 3 * math.sqrt(obs.eta / 2)
    elif obs.kind == "G":
        row[3] = 8 * math.sqrt(obs.T / obs.D)
        row[4] = 1 / math.sqrt(obs.D)
    elif obs.kind == "C-dynamic":
        offset = 4 / (obs.eta * obs.T)
        row[1] = 6 * math.sqrt(3 * obs.beta / obs.eta)
        quad = 3 * obs.eta
    else:
        raise InvalidArgument(f"unknown bound kind {obs.kind!r}")
    return row, quad, offset


def fit_constants(observations: Sequence[Observation]) -> FitResult:
    """Least-squares fit of the bound expressions to observed average errors.

    The bounds are linear in ``(sqrt(c_I), sqrt(mu_g mu_l^2), mu_l^2, G, sqrt(V))``
    except for the ``mu_l^4`` term of the dynamic C-error bound.  A nonnegative
    linear solve gives the starting point; a bounded nonlinear refinement then
    accounts for the quadratic term.  Only constants whose coefficients are
    identified by the design points are reported; the rest stay NaN.
    """
    obs = list(observations)
    if len(obs) < 3:
        raise InvalidArgument("need at least 3 observations to fit bound constants")
    for o in obs:
        if o.T <= 0 or (o.kind != "G" and o.beta <= 0) or (o.kind == "G" and o.D <= 0):
            raise InvalidArgument(f"invalid design point {o}")
        if o.kind in ("O-dynamic", "C-dynamic") and o.eta <= 0:
            raise InvalidArgument(f"dynamic observations need eta > 0: {o}")
        if not math.isfinite(o.error):
            raise InvalidArgument(f"non-finite observed error {o}")
    rows, quads, offsets, target = [], [], [], []
    for o in obs:
        row, quad, offset = _design_row(o)
        rows.append(row)
        quads.append(quad)
        offsets.append(offset)
        target.append(o.error)
    A = np.array(rows)
    q = np.array(quads)
    y = np.array(target) - np.array(offsets)

    used = [j for j in range(5) if np.any(A[:, j] != 0)]
    if np.any(q != 0) and 2 not in used:
        used.append(2)
        used.sort()
    # design points must pin down every coefficient that appears
    probe = A[:, used].copy()
    if 2 in used:
        probe[:, used.index(2)] += q
    if np.linalg.matrix_rank(probe) < len(used):
        raise InvalidArgument("design points do not identify the bound constants")

    coef0 = np.zeros(5)
    coef0[used], _ = nnls(A[:, used], y)
    if np.any(q != 0):
        def resid(c):
            full = np.zeros(5)
            full[used] = c
            return A @ full + q * full[2] ** 2 - y

        start = np.maximum(coef0[used], 1e-12)
        sol = least_squares(resid, start, bounds=(0.0, np.inf), xtol=1e-15, ftol=1e-15,
                            gtol=1e-15)
        coef0[used] = sol.x
    coef = coef0
    residual = float(np.sqrt(np.mean((A @ coef + q * coef[2] ** 2 - y) ** 2)))

    a, b, m, G, s = coef
    consts = BoundConstants()
    identified = []
    names = {_COEFS[j] for j in used}
    if "a" in names:
        consts.c_I = a * a
        identified.append("c_I")
    if "m" in names:
        consts.mu_l = math.sqrt(m)
        identified.append("mu_l")
        if "b" in names:
            consts.mu_g = b * b / m if m > 0 else 0.0
            identified.append("mu_g")
    if "G" in names:
        consts.G = G
        identified.append("G")
    if "s" in names:
        consts.V = s * s
        identified.append("V")
    return FitResult(consts, residual, tuple(identified), dict(zip(_COEFS, coef.tolist())))


def fit_rate_slope(series: Sequence[tuple[float, float]]) -> float:
    """Least-squares slope of ``log(error)`` against ``log(T)``."""
    pts = list(series)
    if len(pts) < 4:
        raise InvalidArgument("need at least 4 (T, error) points")
    t = np.array([p[0] for p in pts], dtype=np.float64)
    e = np.array([p[1] for p in pts], dtype=np.float64)
    if np.any(t <= 0) or np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise InvalidArgument("rate fit needs positive finite T and error values")
    slope, _ = np.polyfit(np.log(t), np.log(e), 1)
    return float(slope)
