"""Tape, surrogate spike derivatives and gradient buffers.

The tape is coarse grained: one node per layer-level primitive (affine map,
normalization, dropout, a whole neuron-layer unroll, readout, loss). Each node
owns a closure that maps the gradient of its output to the gradient of its
input and accumulates parameter gradients into a :class:`GradientSet`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ParameterRangeError, TapeReuseError
from .neurons import THETA

SPIKE_MODES = ("heaviside", "relaxed", "linear")


@dataclass(frozen=True)
class SurrogateSpec:
    kind: str = "boxcar"
    width: float = 0.5
    scale: float = 0.5

    def __post_init__(self):
        if self.kind != "boxcar":
            raise ParameterRangeError(f"unknown surrogate kind {self.kind!r}")
        if not (self.width > 0 and self.scale > 0):
            raise ParameterRangeError("surrogate width and scale must be positive")


def surrogate_derivative(u, spec: SurrogateSpec = SurrogateSpec(), theta: float = THETA):
    """Boxcar pseudo-derivative: ``scale`` where ``|u - theta| <= width``, else 0."""
    u = np.asarray(u)
    out = np.where(np.abs(u - theta) <= spec.width, spec.scale, 0.0)
    return out.astype(np.result_type(u, np.float32)) if out.ndim else float(out)


def relaxed_spike(u, spec: SurrogateSpec = SurrogateSpec(), theta: float = THETA):
    """Antiderivative of the boxcar, zero below the window.

    Ramps from 0 at ``theta - width`` to ``2 * width * scale`` at ``theta + width``.
    """
    u = np.asarray(u)
    return spec.scale * np.clip(u - theta + spec.width, 0.0, 2.0 * spec.width)


@dataclass(frozen=True)
class SpikeConfig:
    """How neuron layers emit spikes and route gradients through them.

    ``heaviside``: binary spikes, surrogate gradient in the backward pass.
    ``relaxed``: the forward uses the surrogate's antiderivative, so the
    backward pass is the exact derivative of the forward.
    ``linear``: no spikes and no reset; layers emit their linear readout.
    ``detach_reset`` blocks gradients through the spike-triggered feedback.
    """

    mode: str = "heaviside"
    surrogate: SurrogateSpec = SurrogateSpec()
    detach_reset: bool = False

    def __post_init__(self):
        if self.mode not in SPIKE_MODES:
            raise ParameterRangeError(f"spike mode must be one of {SPIKE_MODES}, got {self.mode!r}")

    def spike_fn(self, theta: float = THETA) -> Callable[[np.ndarray], np.ndarray]:
        if self.mode == "heaviside":
            return lambda v: (v >= theta).astype(v.real.dtype)
        if self.mode == "relaxed":
            return lambda v: relaxed_spike(v, self.surrogate, theta).astype(v.real.dtype)
        return lambda v: np.zeros_like(v.real)

    def spike_grad(self, v, theta: float = THETA):
        return surrogate_derivative(v, self.surrogate, theta)


class GradientSet(dict):
    """Parameter name -> gradient array, same shapes as the parameters."""

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "GradientSet":
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def zero(self) -> None:
        for g in self.values():
            g[...] = 0

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.values())


@dataclass
class Node:
    kind: str
    name: str
    backward: Callable[[np.ndarray, GradientSet], np.ndarray]
    saved: dict = field(default_factory=dict)
    visited: bool = False


class Tape:
    """Ordered record of a train-mode forward pass over a chain of layers."""

    KINDS = ("affine", "elementwise", "neuron-step", "normalization", "softmax", "loss")

    def __init__(self, params: dict[str, np.ndarray]):
        self.nodes: list[Node] = []
        self.params = params
        self.consumed = False

    def record(self, kind: str, name: str, backward, **saved) -> Node:
        if kind not in self.KINDS:
            raise ValueError(f"unknown node kind {kind!r}")
        node = Node(kind, name, backward, saved)
        self.nodes.append(node)
        return node

    def find(self, kind: str) -> list[Node]:
        return [n for n in self.nodes if n.kind == kind]

    def backward(self, loss_grad=1.0) -> GradientSet:
        if self.consumed:
            raise TapeReuseError("tape has already been consumed by a backward pass")
        self.consumed = True
        grads = GradientSet.zeros_like(self.params)
        g = loss_grad
        for node in reversed(self.nodes):
            g = node.backward(g, grads)
            node.visited = True
        return grads
