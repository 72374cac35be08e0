"""Slow scalar-loop reference implementations used as independent oracles.

Nothing here shares code with :mod:`mops.model` beyond the parameter layout;
the loops count every multiply-accumulate they execute so the analytic FLOPs
formula can be checked against actual work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelSpec, layout


@dataclass
class InstrumentedPass:
    output: list[float]
    param_grads: list[float]
    input_grad: list[float]
    forward_macs: int
    backward_macs: int


def _act(kind: str, x: float) -> float:
    if kind == "tanh":
        return math.tanh(x)
    if kind == "relu":
        return x if x > 0.0 else 0.0
    return x


def _dact(kind: str, x: float) -> float:
    if kind == "tanh":
        t = math.tanh(x)
        return 1.0 - t * t
    if kind == "relu":
        return 1.0 if x > 0.0 else 0.0
    return 1.0


def instrumented_pass(spec: ModelSpec, part: str, params, x, upstream=None) -> InstrumentedPass:
    layers = spec.part_layers(part)
    slots = {s.layer: s for s in layout(layers)}
    p = [float(v) for v in params]
    a = [float(v) for v in x]
    fwd = 0
    acts_in = []
    for k, layer in enumerate(layers):
        acts_in.append(a)
        if layer.kind == "dense":
            s = slots[k]
            rows, cols = s.shape
            out = []
            for r in range(rows):
                acc = 0.0
                for c in range(cols):
                    acc += p[s.w.start + r * cols + c] * a[c]
                    fwd += 1
                out.append(acc + p[s.b.start + r])
            a = out
        else:
            a = [_act(layer.activation, v) for v in a]
    output = a
    if upstream is None:
        return InstrumentedPass(output, [], [], fwd, 0)

    grads = [0.0] * len(p)
    delta = [float(v) for v in upstream]
    bwd = 0
    for k in range(len(layers) - 1, -1, -1):
        layer = layers[k]
        a_in = acts_in[k]
        if layer.kind == "dense":
            s = slots[k]
            rows, cols = s.shape
            for r in range(rows):
                for c in range(cols):
                    grads[s.w.start + r * cols + c] = delta[r] * a_in[c]
                    bwd += 1
                grads[s.b.start + r] = delta[r]
            new = [0.0] * cols
            for c in range(cols):
                acc = 0.0
                for r in range(rows):
                    acc += p[s.w.start + r * cols + c] * delta[r]
                    bwd += 1
                new[c] = acc
            delta = new
        else:
            delta = [d * _dact(layer.activation, v) for d, v in zip(delta, a_in)]
    return InstrumentedPass(output, grads, delta, fwd, bwd)


def monolithic_loss(spec: ModelSpec, params: np.ndarray, x, y) -> float:
    out = instrumented_pass(spec, "full", params, x).output
    return sum((o - t) ** 2 for o, t in zip(out, y)) / len(out)


def monolithic_grad(spec: ModelSpec, params: np.ndarray, x, y) -> np.ndarray:
    out = instrumented_pass(spec, "full", params, x).output
    upstream = [2.0 * (o - t) / len(out) for o, t in zip(out, y)]
    return np.array(instrumented_pass(spec, "full", params, x, upstream).param_grads)


def monolithic_sgd(spec: ModelSpec, params: np.ndarray, samples, beta: float) -> list[float]:
    """Plain per-sample SGD on the full model; returns the loss before each step."""
    w = np.array(params, dtype=np.float64)
    losses = []
    for x, y in samples:
        losses.append(monolithic_loss(spec, w, x, y))
        w = w - beta * monolithic_grad(spec, w, x, y)
    return losses
