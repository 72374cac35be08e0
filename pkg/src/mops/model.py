"""Layered MLPs with manual backprop, split into agent and shared parts.

A model is an ordered list of ``dense`` and ``activation`` layers.  A *block*
is one dense layer together with the activation layers that follow it; the
partition schemes cut the model only at block boundaries.  ``ModelSpec.boundary``
is the number of layers (not blocks) that run on the agent.

Parameters of a part live in one flat float64 vector.  Each dense layer owns a
``(out_dim, in_dim)`` weight matrix followed by its bias, in layer order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ContractViolation, InvalidArgument, NumericFailure
from .rng import RngState

ACTIVATIONS = ("tanh", "relu", "identity")
PARTS = ("agent", "shared", "full")
SCHEMES = ("none", "share_top", "share_deep")
PHASES = ("forward", "backward", "inference")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in ("dense", "activation"):
            raise InvalidArgument(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidArgument("layer dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        if self.kind == "activation" and self.in_dim != self.out_dim:
            raise InvalidArgument("activation layers must preserve dimension")

    @property
    def n_params(self) -> int:
        if self.kind == "dense":
            return self.in_dim * self.out_dim + self.out_dim
        return 0

    @staticmethod
    def dense(in_dim: int, out_dim: int) -> "LayerSpec":
        return LayerSpec("dense", in_dim, out_dim)

    @staticmethod
    def act(dim: int, activation: str) -> "LayerSpec":
        return LayerSpec("activation", dim, dim, activation)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    boundary: int = 0

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not 0 <= self.boundary <= len(layers):
            raise InvalidArgument(f"boundary {self.boundary} outside 0..{len(layers)}")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise InvalidArgument(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if layers and layers[0].kind != "dense":
            raise InvalidArgument("a model must start with a dense layer")

    def part_layers(self, part: str) -> tuple[LayerSpec, ...]:
        if part == "agent":
            return self.layers[: self.boundary]
        if part == "shared":
            return self.layers[self.boundary:]
        if part == "full":
            return self.layers
        raise InvalidArgument(f"unknown part {part!r}")

    def n_params(self, part: str = "full") -> int:
        return sum(layer.n_params for layer in self.part_layers(part))

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def embedding_dim(self) -> int:
        """Width of the E-interface: the output of the agent part."""
        if self.boundary == 0:
            return self.in_dim
        return self.layers[self.boundary - 1].out_dim

    def part_in_dim(self, part: str) -> int:
        return self.embedding_dim if part == "shared" else self.in_dim

    def part_out_dim(self, part: str) -> int:
        return self.embedding_dim if part == "agent" else self.out_dim

    def blocks(self) -> list[tuple[int, int]]:
        """``[start, stop)`` layer ranges of the dense blocks."""
        starts = [k for k, layer in enumerate(self.layers) if layer.kind == "dense"]
        return list(zip(starts, starts[1:] + [len(self.layers)]))

    def with_boundary(self, boundary: int) -> "ModelSpec":
        return ModelSpec(self.layers, boundary)

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"kind": l.kind, "in_dim": l.in_dim, "out_dim": l.out_dim,
                 "activation": l.activation}
                for l in self.layers
            ],
            "boundary": self.boundary,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        try:
            layers = tuple(LayerSpec(**layer) for layer in data["layers"])
            return cls(layers, int(data.get("boundary", 0)))
        except (KeyError, TypeError) as exc:
            raise InvalidArgument(f"malformed model spec: {exc}") from exc


def default_mlp(in_dim: int = 15, out_dim: int = 5, hidden: int = 32,
                embed: int = 16) -> ModelSpec:
    """``in -> 32 tanh -> 16 (embedding) -> 32 tanh -> out`` with identity layers omitted."""
    return ModelSpec((
        LayerSpec.dense(in_dim, hidden), LayerSpec.act(hidden, "tanh"),
        LayerSpec.dense(hidden, embed),
        LayerSpec.dense(embed, hidden), LayerSpec.act(hidden, "tanh"),
        LayerSpec.dense(hidden, out_dim),
    ))


def scheme_boundary(spec: ModelSpec, scheme: str) -> int:
    """Number of agent-side layers under a partition scheme.

    ``none`` keeps everything on the agent; ``share_top`` keeps only the first
    (embedding) block; ``share_deep`` keeps the embedding block plus the first
    half of the hidden blocks (the last block is the output head).
    """
    blocks = spec.blocks()
    n = len(blocks)
    if scheme == "none":
        return len(spec.layers)
    if scheme == "share_top":
        if n < 2:
            raise InvalidArgument("share_top needs at least 2 dense blocks")
        return blocks[0][1]
    if scheme == "share_deep":
        n_hidden = n - 2
        if n_hidden < 1:
            raise InvalidArgument("share_deep needs at least one hidden block")
        keep = 1 + (n_hidden + 1) // 2
        if keep >= n:
            raise InvalidArgument("share_deep would leave no shared layers")
        return blocks[keep - 1][1]
    raise InvalidArgument(f"unknown scheme {scheme!r}")


def apply_scheme(spec: ModelSpec, scheme: str) -> ModelSpec:
    return spec.with_boundary(scheme_boundary(spec, scheme))


def split_model(spec: ModelSpec, scheme: str) -> tuple[ModelSpec | None, ModelSpec | None]:
    """Standalone ``(agent_spec, shared_spec)``; an empty part is ``None``."""
    b = scheme_boundary(spec, scheme)
    agent = ModelSpec(spec.layers[:b], b) if b > 0 else None
    shared = ModelSpec(spec.layers[b:], 0) if b < len(spec.layers) else None
    return agent, shared


# -- parameters --------------------------------------------------------------

@dataclass(frozen=True)
class DenseSlot:
    layer: int
    w: slice
    b: slice
    shape: tuple[int, int]


def layout(layers: Iterable[LayerSpec]) -> list[DenseSlot]:
    slots = []
    offset = 0
    for k, layer in enumerate(layers):
        if layer.kind != "dense":
            continue
        nw = layer.in_dim * layer.out_dim
        slots.append(DenseSlot(k, slice(offset, offset + nw),
                               slice(offset + nw, offset + nw + layer.out_dim),
                               (layer.out_dim, layer.in_dim)))
        offset += nw + layer.out_dim
    return slots


def unflatten(spec: ModelSpec, part: str, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-dense-layer ``(W, b)`` views into a flat parameter (or gradient) vector."""
    return [(flat[s.w].reshape(s.shape), flat[s.b]) for s in layout(spec.part_layers(part))]


def init_params(spec: ModelSpec, part: str, rng: RngState) -> np.ndarray:
    """Uniform(-1/sqrt(in_dim), 1/sqrt(in_dim)) weights and biases."""
    layers = spec.part_layers(part)
    flat = np.empty(sum(l.n_params for l in layers))
    for slot in layout(layers):
        bound = 1.0 / np.sqrt(slot.shape[1])
        flat[slot.w] = rng.uniform(slot.w.stop - slot.w.start, -bound, bound)
        flat[slot.b] = rng.uniform(slot.b.stop - slot.b.start, -bound, bound)
    return flat


def check_params(spec: ModelSpec, part: str, params: np.ndarray) -> None:
    expected = spec.n_params(part)
    if params.ndim != 1 or params.size != expected:
        raise InvalidArgument(f"{part} params have size {params.size}, expected {expected}")


# -- forward / backward ------------------------------------------------------

@dataclass
class ForwardCache:
    part: str
    inputs: list[np.ndarray]
    output: np.ndarray
    round: int | None = None
    n_layers: int = field(init=False)

    def __post_init__(self):
        self.n_layers = len(self.inputs)


def _activate(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    return x


def _activation_grad(kind: str, x: np.ndarray, y: np.ndarray, delta: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return delta * (1.0 - y * y)
    if kind == "relu":
        return delta * (x > 0.0)
    return delta


def forward(spec: ModelSpec, params: np.ndarray, part: str, x,
            round: int | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Run the selected part on one input vector or a batch (rows are samples)."""
    layers = spec.part_layers(part)
    check_params(spec, part, params)
    a = np.asarray(x, dtype=np.float64)
    if a.ndim not in (1, 2) or a.shape[-1] != spec.part_in_dim(part):
        raise InvalidArgument(
            f"input of shape {a.shape} does not match {part} input dim {spec.part_in_dim(part)}")
    batched = a.ndim == 2
    slots = {s.layer: s for s in layout(layers)}
    inputs = []
    for k, layer in enumerate(layers):
        inputs.append(a)
        if layer.kind == "dense":
            s = slots[k]
            w = params[s.w].reshape(s.shape)
            a = (a @ w.T if batched else w @ a) + params[s.b]
        else:
            a = _activate(layer.activation, a)
    if not np.all(np.isfinite(a)):
        raise NumericFailure(f"non-finite output from {part} forward")
    return a, ForwardCache(part, inputs, a, round)


def backward(spec: ModelSpec, params: np.ndarray, cache: ForwardCache, upstream,
             part: str, round: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<upstream, output>`` w.r.t. the part's parameters and input.

    For a batch, parameter gradients are summed over rows and the input
    gradient keeps one row per sample.
    """
    if cache.part != part:
        raise ContractViolation(f"cache was produced for part {cache.part!r}, not {part!r}")
    if round is not None and cache.round is not None and cache.round != round:
        raise ContractViolation(f"stale cache from round {cache.round} used at round {round}")
    layers = spec.part_layers(part)
    if cache.n_layers != len(layers):
        raise ContractViolation("cache layer count does not match the model part")
    delta = np.asarray(upstream, dtype=np.float64)
    if delta.shape != cache.output.shape:
        raise InvalidArgument(f"upstream gradient shape {delta.shape} != output {cache.output.shape}")
    batched = delta.ndim == 2
    grads = np.zeros(spec.n_params(part))
    slots = {s.layer: s for s in layout(layers)}
    for k in range(len(layers) - 1, -1, -1):
        layer = layers[k]
        a_in = cache.inputs[k]
        if layer.kind == "dense":
            s = slots[k]
            w = params[s.w].reshape(s.shape)
            if batched:
                grads[s.w] = (delta.T @ a_in).ravel()
                grads[s.b] = delta.sum(axis=0)
                delta = delta @ w
            else:
                grads[s.w] = np.outer(delta, a_in).ravel()
                grads[s.b] = delta
                delta = w.T @ delta
        else:
            a_out = cache.inputs[k + 1] if k + 1 < len(layers) else cache.output
            delta = _activation_grad(layer.activation, a_in, a_out, delta)
    return grads, delta


def mse_loss_and_grad(pred, label) -> tuple[float, np.ndarray]:
    """Mean squared error over the vector and its gradient ``2 (pred - label) / dim``."""
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if p.shape != y.shape:
        raise InvalidArgument(f"pred shape {p.shape} != label shape {y.shape}")
    r = p - y
    loss = float(np.mean(r * r))
    if not np.isfinite(loss):
        raise NumericFailure("non-finite loss")
    return loss, 2.0 * r / r.size


def mse_batch(pred: np.ndarray, label: np.ndarray) -> tuple[float, np.ndarray]:
    """Dataset-average MSE; the gradient rows are scaled by ``2 / (n * dim)``."""
    if pred.shape != label.shape:
        raise InvalidArgument(f"pred shape {pred.shape} != label shape {label.shape}")
    r = pred - label
    loss = float(np.mean(r * r))
    if not np.isfinite(loss):
        raise NumericFailure("non-finite loss")
    return loss, 2.0 * r / r.size


# -- accounting --------------------------------------------------------------

def flops(spec: ModelSpec, part: str, phase: str) -> int:
    """Floating-point operations of one pass over one sample.

    A multiply-accumulate counts as two.  Dense forward is ``in * out`` MACs;
    backward is twice that (weight gradient plus input gradient).  Biases and
    activations are not counted.  Inference is a forward pass.
    """
    if phase not in PHASES:
        raise InvalidArgument(f"unknown phase {phase!r}")
    macs = sum(l.in_dim * l.out_dim for l in spec.part_layers(part) if l.kind == "dense")
    return (4 if phase == "backward" else 2) * macs
