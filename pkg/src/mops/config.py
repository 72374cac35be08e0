"""Training and experiment configuration, parsed from JSON."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .errors import InvalidArgument
from .model import SCHEMES, ModelSpec, default_mlp
from .tasks import MODALITIES

ALGORITHMS = ("static", "dynamic")
WEIGHT_RULES = ("coupled", "literal")
WEIGHT_GRADS = ("shared", "full")
HARNESSES = ("single", "threaded")
TASK_KINDS = ("toy", "timeseries")

DEFAULT_T = 1000
DEFAULT_BETA = 5e-4
DEFAULT_ETA = 0.1


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "timeseries"
    modalities: tuple[str, ...] = MODALITIES
    train_size: int = 500
    noise: float | None = None
    # toy-only fields
    sigma: float = 0.1
    w0: tuple[float, float] = (0.0, 0.0)
    centers: tuple | None = None
    curvatures: tuple | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidArgument(f"task.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "timeseries":
            if not self.modalities:
                raise InvalidArgument("task.modality must name at least one modality")
            for m in self.modalities:
                if m not in MODALITIES:
                    raise InvalidArgument(f"unknown modality {m!r}")
            if int(self.train_size) < 1:
                raise InvalidArgument("task.train_size must be at least 1")
        if self.sigma < 0:
            raise InvalidArgument("task.sigma must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "static"
    scheme: str = "share_top"
    T: int = DEFAULT_T
    beta: float = DEFAULT_BETA
    eta: float = DEFAULT_ETA
    gamma_init: tuple[float, ...] | None = None
    seed: int = 0
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelSpec | None = None
    metrics_every: int = 10
    n_pop_factor: int = 50
    weight_rule: str = "coupled"
    weight_grads: str = "shared"
    harness: str = "single"
    replicate_agents: bool = False
    metrics: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise InvalidArgument(f"algorithm must be one of {ALGORITHMS}")
        if self.scheme not in SCHEMES:
            raise InvalidArgument(f"scheme must be one of {SCHEMES}")
        if int(self.T) < 1:
            raise InvalidArgument("T must be at least 1")
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise InvalidArgument("beta must be finite and nonnegative")
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise InvalidArgument("eta must be finite and nonnegative")
        if self.weight_rule not in WEIGHT_RULES:
            raise InvalidArgument(f"weight_rule must be one of {WEIGHT_RULES}")
        if self.weight_grads not in WEIGHT_GRADS:
            raise InvalidArgument(f"weight_grads must be one of {WEIGHT_GRADS}")
        if self.harness not in HARNESSES:
            raise InvalidArgument(f"harness must be one of {HARNESSES}")
        if int(self.metrics_every) < 1:
            raise InvalidArgument("metrics_every must be at least 1")
        if int(self.n_pop_factor) < 1:
            raise InvalidArgument("n_pop_factor must be at least 1")
        if self.seed < 0:
            raise InvalidArgument("seed must be nonnegative")
        if self.gamma_init is not None:
            g = np.asarray(self.gamma_init, dtype=np.float64)
            if g.ndim != 1 or g.size != self.n_agents:
                raise InvalidArgument(f"gamma_init needs {self.n_agents} entries")
            if np.any(g < 0) or abs(g.sum() - 1.0) > 1e-9:
                raise InvalidArgument("gamma_init must lie on the simplex")

    @property
    def dynamic(self) -> bool:
        return self.algorithm == "dynamic"

    @property
    def n_agents(self) -> int:
        if self.task.kind == "toy":
            return 3 if self.task.centers is None else len(self.task.centers)
        return len(self.task.modalities)

    def initial_weights(self) -> np.ndarray:
        if self.gamma_init is None:
            return np.full(self.n_agents, 1.0 / self.n_agents)
        return np.array(self.gamma_init, dtype=np.float64)

    def model_spec(self) -> ModelSpec:
        return self.model if self.model is not None else default_mlp()

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["task"] = {k: v for k, v in asdict(self.task).items() if v is not None}
        out["model"] = self.model.to_dict() if self.model is not None else None
        return out


_TOP_KEYS = {f for f in TrainConfig.__dataclass_fields__} | {"sweep", "out"}
_TASK_KEYS = {"kind", "modality", "modalities", "train_size", "noise", "sigma", "w0",
              "centers", "curvatures"}


def _task_from_dict(data: Any) -> TaskConfig:
    if data is None:
        return TaskConfig()
    if not isinstance(data, dict):
        raise InvalidArgument("task must be an object")
    unknown = set(data) - _TASK_KEYS
    if unknown:
        raise InvalidArgument(f"unknown task keys: {sorted(unknown)}")
    kw = dict(data)
    mods = kw.pop("modalities", None)
    mod = kw.pop("modality", None)
    if mods is None:
        mods = mod
    if isinstance(mods, str):
        mods = (mods,)
    if mods is not None:
        kw["modalities"] = tuple(mods)
    kind = kw.setdefault("kind", "timeseries")
    if kind == "toy":
        kw.pop("modalities", None)
    for key in ("w0", "centers", "curvatures"):
        if kw.get(key) is not None:
            kw[key] = _tuplify(kw[key])
    if "train_size" in kw:
        kw["train_size"] = _int(kw["train_size"], "task.train_size")
    return TaskConfig(**kw)


def _tuplify(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuplify(x) for x in v)
    return float(v)


def _int(v, name: str) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
        raise InvalidArgument(f"{name} must be an integer, got {v!r}")
    return int(v)


def _float(v, name: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise InvalidArgument(f"{name} must be a number, got {v!r}")
    return float(v)


def config_from_dict(data: Any) -> TrainConfig:
    if not isinstance(data, dict):
        raise InvalidArgument("config must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
    kw: dict[str, Any] = {}
    for key in ("algorithm", "scheme", "weight_rule", "weight_grads", "harness"):
        if key in data:
            if not isinstance(data[key], str):
                raise InvalidArgument(f"{key} must be a string")
            kw[key] = data[key]
    for key in ("T", "seed", "metrics_every", "n_pop_factor"):
        if key in data:
            kw[key] = _int(data[key], key)
    for key in ("beta", "eta"):
        if key in data:
            kw[key] = _float(data[key], key)
    for key in ("replicate_agents", "metrics"):
        if key in data:
            if not isinstance(data[key], bool):
                raise InvalidArgument(f"{key} must be true or false")
            kw[key] = data[key]
    if data.get("gamma_init") is not None:
        g = data["gamma_init"]
        if not isinstance(g, list):
            raise InvalidArgument("gamma_init must be a list")
        kw["gamma_init"] = tuple(_float(x, "gamma_init") for x in g)
    kw["task"] = _task_from_dict(data.get("task"))
    if data.get("model") is not None:
        kw["model"] = ModelSpec.from_dict(data["model"]).with_boundary(0)
    try:
        return TrainConfig(**kw)
    except TypeError as exc:
        raise InvalidArgument(f"malformed config: {exc}") from exc


def load_config(path) -> tuple[TrainConfig, dict]:
    """Parse a JSON config file; returns the training config and the raw object."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise InvalidArgument(f"cannot read config {p}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"{p}: invalid JSON ({exc})") from exc
    return config_from_dict(data), data
