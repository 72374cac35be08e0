"""Synthetic problems: a quadratic multi-objective toy and three time-series modalities.

The quadratic toy is a stand-in for hand-drawn multi-agent loss landscapes; it
has an analytic Pareto set so conflict can be measured exactly.  The time
series play the roles of application demand, channel state and network
traffic prediction subtasks: 15 past steps in, 5 future steps out.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import lfilter

from .errors import InvalidArgument
from .rng import (STREAM_DATA_POP, STREAM_DATA_TRAIN, STREAM_GENERATOR, RngState,
                  stream_id)

WINDOW_IN = 15
WINDOW_OUT = 5
WINDOW_SPAN = WINDOW_IN + WINDOW_OUT
MODALITIES = ("demand", "csi", "traffic")
DEFAULT_NOISE = {"demand": 0.02, "csi": 0.1, "traffic": 0.05}


# -- quadratic toy -------------------------------------------------------------

@dataclass(frozen=True)
class ToyObjectiveSet:
    centers: np.ndarray
    curvatures: np.ndarray
    sigma: float = 0.1
    w0: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        a = np.asarray(self.curvatures, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2:
            raise InvalidArgument("centers must have shape (n_agents, 2)")
        if a.shape != (c.shape[0], 2, 2):
            raise InvalidArgument("curvatures must have shape (n_agents, 2, 2)")
        for k, m in enumerate(a):
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m)[0] <= 0.0:
                raise InvalidArgument(f"curvature {k} is not symmetric positive definite")
        if self.sigma < 0:
            raise InvalidArgument("sigma must be nonnegative")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "curvatures", a)

    @property
    def n_agents(self) -> int:
        return self.centers.shape[0]


def symmetric_toy(sigma: float = 0.1, w0=(0.0, 0.0)) -> ToyObjectiveSet:
    """Three unit-curvature quadratics centred on an equilateral triangle."""
    centers = np.array([[1.0, 0.0], [-0.5, np.sqrt(3) / 2], [-0.5, -np.sqrt(3) / 2]])
    return ToyObjectiveSet(centers, np.stack([np.eye(2)] * 3), sigma, tuple(w0))


class ToyLosses:
    """Per-agent loss oracles ``(w - c_i)' A_i (w - c_i)``."""

    def __init__(self, objectives: ToyObjectiveSet):
        self.objectives = objectives

    @property
    def n_agents(self) -> int:
        return self.objectives.n_agents

    def loss(self, i: int, w) -> float:
        d = np.asarray(w, dtype=np.float64) - self.objectives.centers[i]
        return float(d @ self.objectives.curvatures[i] @ d)

    def grad(self, i: int, w) -> np.ndarray:
        d = np.asarray(w, dtype=np.float64) - self.objectives.centers[i]
        return 2.0 * self.objectives.curvatures[i] @ d

    def stochastic_grad(self, i: int, w, rng: RngState) -> np.ndarray:
        g = self.grad(i, w)
        if self.objectives.sigma > 0:
            g = g + rng.normal(2, self.objectives.sigma)
        return g

    def pareto_point(self, gamma) -> np.ndarray:
        """Minimiser of the gamma-weighted loss; these points trace the Pareto set."""
        gamma = np.asarray(gamma, dtype=np.float64)
        a = np.einsum("i,ijk->jk", gamma, self.objectives.curvatures)
        b = np.einsum("i,ijk,ik->j", gamma, self.objectives.curvatures, self.objectives.centers)
        return np.linalg.solve(a, b)


def toy_losses(objectives: ToyObjectiveSet) -> ToyLosses:
    return ToyLosses(objectives)


# -- time series ---------------------------------------------------------------

@dataclass(frozen=True)
class TimeSeriesTask:
    modality: str
    train_size: int = 500
    seed: int = 0
    noise: float | None = None
    window_in: int = WINDOW_IN
    window_out: int = WINDOW_OUT

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise InvalidArgument(f"unknown modality {self.modality!r}")
        if self.train_size < 1:
            raise InvalidArgument("train_size must be at least 1")

    @property
    def noise_level(self) -> float:
        return DEFAULT_NOISE[self.modality] if self.noise is None else float(self.noise)

    @property
    def span(self) -> int:
        return self.window_in + self.window_out


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    mean: float
    std: float
    series: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.x.shape[0]

    def to_csv(self, path) -> None:
        cols = [f"x{k}" for k in range(self.x.shape[1])] + [f"y{k}" for k in range(self.y.shape[1])]
        np.savetxt(path, np.hstack([self.x, self.y]), delimiter=",",
                   header=",".join(cols), comments="", fmt="%.17g")


def generator_params(task: TimeSeriesTask) -> dict:
    """Task-level constants shared by the training split and population samples."""
    rng = RngState(task.seed, stream_id(STREAM_GENERATOR))
    if task.modality == "csi":
        return {"freqs": rng.uniform(3, 0.01, 0.2), "amps": np.array([1.0, 0.5, 0.25])}
    if task.modality == "traffic":
        return {"ar": (1.5, -0.6), "period": 100.0}
    return {"switch_prob": 0.05}


def _raw_series(task: TimeSeriesTask, length: int, rng: RngState) -> np.ndarray:
    params = generator_params(task)
    sigma = task.noise_level
    t = np.arange(length, dtype=np.float64)
    if task.modality == "demand":
        switches = rng.uniform(length) < params["switch_prob"]
        switches[0] = True
        levels = rng.uniform(int(switches.sum()))
        series = levels[np.cumsum(switches) - 1]
    elif task.modality == "csi":
        phases = rng.uniform(3, 0.0, 2 * np.pi)
        series = sum(a * np.sin(2 * np.pi * f * t + p)
                     for a, f, p in zip(params["amps"], params["freqs"], phases))
    else:
        phi1, phi2 = params["ar"]
        burn = 200
        e = rng.normal(length + burn, sigma)
        ar = lfilter([1.0], [1.0, -phi1, -phi2], e)
        phase = rng.uniform(low=0.0, high=2 * np.pi)
        return np.sin(2 * np.pi * t / params["period"] + phase) + ar[burn:]
    if sigma > 0:
        series = series + rng.normal(length, sigma)
    return np.asarray(series, dtype=np.float64)


def _windows(series: np.ndarray, task: TimeSeriesTask) -> tuple[np.ndarray, np.ndarray]:
    view = np.lib.stride_tricks.sliding_window_view(series, task.span)
    return view[:, :task.window_in].copy(), view[:, task.window_in:].copy()


def gen_timeseries(task: TimeSeriesTask) -> Dataset:
    """Training split: ``train_size`` stride-1 windows, standardised on this split."""
    if task.train_size < 1:
        raise InvalidArgument("train_size smaller than one window")
    rng = RngState(task.seed, stream_id(STREAM_DATA_TRAIN))
    raw = _raw_series(task, task.train_size + task.span - 1, rng)
    mean = float(raw.mean())
    std = float(raw.std())
    if std == 0.0:
        std = 1.0
    series = (raw - mean) / std
    x, y = _windows(series, task)
    return Dataset(x, y, mean, std, series)


def population_sample(task: TimeSeriesTask, n: int, train: Dataset | None = None,
                      stream: int | None = None) -> Dataset:
    """``n`` fresh windows from the same generator, standardised with training statistics."""
    if n < 1:
        raise InvalidArgument("population sample size must be at least 1")
    if train is None:
        train = gen_timeseries(task)
    rng = RngState(task.seed, stream_id(STREAM_DATA_POP) if stream is None else stream)
    raw = _raw_series(task, n + task.span - 1, rng)
    series = (raw - train.mean) / train.std
    x, y = _windows(series, task)
    return Dataset(x, y, train.mean, train.std, series)


def with_seed(task: TimeSeriesTask, seed: int) -> TimeSeriesTask:
    return replace(task, seed=seed)
