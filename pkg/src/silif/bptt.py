"""Unrolled forward pass, loss heads and the reverse sweep.

``forward`` runs a :class:`~silif.network.Network` over a batch and, in train
mode, appends the loss head to the tape so that ``backward(tape)`` yields the
gradient of the scalar loss. ``finite_difference_check`` is a second,
independent route to the same numbers: it only ever calls the forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradientSet, Tape
from .errors import DataError, ParameterRangeError, ShapeError
from .network import Network, RunContext, RunTrace, _softmax, softmax_sum
from .numerics import Rng

LOSSES = ("cross_entropy", "quadratic")


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(scores: np.ndarray, labels, timesteps: int | None = None) -> float:
    """Mean negative log-likelihood of time-summed softmax scores.

    Scores are renormalized to a distribution per sample (dividing by the
    number of timesteps is the same thing, since each step contributes 1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels, scores.shape[1])
    total = scores.sum(axis=1) if timesteps is None else float(timesteps)
    p = scores[np.arange(len(labels)), labels] / total
    return float(-np.mean(np.log(p)))


def quadratic_loss(logits: np.ndarray, labels) -> float:
    """``0.5 * mean((logits - onehot)**2)`` over batch, time and classes."""
    labels = _check_labels(labels, logits.shape[-1])
    target = np.eye(logits.shape[-1])[labels][:, None, :]
    return float(0.5 * np.mean((logits - target) ** 2))


@dataclass
class ForwardResult:
    logits: np.ndarray
    scores: np.ndarray
    trace: RunTrace
    tape: Tape | None = None
    loss: float | None = None

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)


def _record_loss(tape: Tape, logits, labels, loss: str):
    B, T, C = logits.shape
    if loss == "cross_entropy":
        p = _softmax(logits)
        scores = p.sum(1)
        idx = np.arange(B)

        def backward(g, grads):
            dsc = np.zeros((B, C))
            dsc[idx, labels] = -1.0 / (B * scores[idx, labels])
            dsc = g * dsc[:, None, :]
            return p * (dsc - (p * dsc).sum(-1, keepdims=True))

    else:
        target = np.eye(C)[labels][:, None, :]

        def backward(g, grads):
            return g * (logits - target) / logits.size

    tape.record("loss", loss, backward)


def forward(
    network: Network,
    batch: np.ndarray,
    mode: str = "eval",
    labels=None,
    loss: str = "cross_entropy",
    rng: Rng | None = None,
) -> ForwardResult:
    """Run the network; record a tape and compute the loss in train mode."""
    if mode not in ("train", "eval"):
        raise ParameterRangeError(f"mode must be 'train' or 'eval', got {mode!r}")
    if loss not in LOSSES:
        raise ParameterRangeError(f"loss must be one of {LOSSES}, got {loss!r}")
    batch = np.asarray(batch)
    if batch.ndim != 3:
        raise ShapeError(f"expected a batch x time x channel tensor, got shape {batch.shape}")
    if rng is None:
        rng = Rng(network.seed, 0).spawn("forward")
    tape = Tape(network.parameters()) if mode == "train" else None
    ctx = RunContext(mode, rng, tape, network.spike, network.random_init_state)
    logits, trace = network.run(batch, ctx)
    scores = softmax_sum(logits)
    result = ForwardResult(logits, scores, trace, tape)
    if labels is not None:
        labels = _check_labels(labels, network.n_classes)
        if len(labels) != batch.shape[0]:
            raise ShapeError(f"{len(labels)} labels for a batch of {batch.shape[0]}")
        if loss == "cross_entropy":
            result.loss = cross_entropy(scores, labels, batch.shape[1])
        else:
            result.loss = quadratic_loss(logits, labels)
        if tape is not None:
            _record_loss(tape, logits, labels, loss)
    return result


def backward(tape: Tape, loss_grad: float = 1.0) -> GradientSet:
    """Gradient of ``loss_grad * loss`` for every trainable tensor."""
    if not tape.nodes or tape.nodes[-1].kind != "loss":
        raise ParameterRangeError("tape has no loss node; pass labels to forward in train mode")
    return tape.backward(loss_grad)


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class ProbeResult:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale == 0 else abs(self.analytic - self.numeric) / scale


@dataclass
class GradCheckReport:
    h: float
    probes: list[ProbeResult] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.probes), default=0.0)

    def passed(self, tol: float = 1e-5) -> bool:
        return bool(self.probes) and self.max_rel_error < tol

    def lines(self):
        for p in self.probes:
            yield f"{p.name}{list(p.index)} analytic={p.analytic:.10e} numeric={p.numeric:.10e} rel={p.rel_error:.2e}"


UNTRAINABLE = ("theta", "sigma", "dt", "running_mean", "running_var")


def _select(params: dict, selector) -> list[str]:
    if selector is None:
        return list(params)
    if isinstance(selector, str):
        selector = [selector]
    names = []
    for pat in selector:
        tail = pat.rsplit(".", 1)[-1]
        if tail in UNTRAINABLE and not any(k.endswith("." + tail) for k in params):
            raise ParameterRangeError(f"{pat!r} is a fixed constant, not a trainable parameter; it has no gradient to check")
        # an exact name selects one tensor; anything else matches as a substring
        hits = [pat] if pat in params else [k for k in params if pat in k]
        if not hits:
            raise ParameterRangeError(f"no trainable parameter matches {pat!r}")
        names.extend(h for h in hits if h not in names)
    return names


def finite_difference_check(
    network: Network,
    batch: np.ndarray,
    labels,
    param_selector=None,
    h: float = 1e-6,
    per_tensor: int = 2,
    loss: str = "quadratic",
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients with central differences of the forward loss.

    Every forward call gets a freshly seeded generator, so dropout masks and
    random initial states are identical across the perturbed evaluations.
    Within each selected tensor the ``per_tensor`` entries with the largest
    analytic gradient are probed. BN running statistics are restored after.
    """
    if not h > 0:
        raise ParameterRangeError(f"finite-difference step must be positive, got {h}")
    if network.spike.mode == "heaviside":
        raise ParameterRangeError("finite differences need spike_mode 'linear' or 'relaxed'")
    params = network.parameters()
    names = _select(params, param_selector)
    saved_buffers = {k: v.copy() for k, v in network.buffers().items()}

    def run():
        return forward(network, batch, "train", labels, loss, Rng(seed, 0).spawn("gradcheck"))

    try:
        res = run()
        grads = backward(res.tape)
        report = GradCheckReport(h)
        for name in names:
            p = params[name]
            g = grads[name]
            order = np.argsort(-np.abs(g).ravel(), kind="stable")[:per_tensor]
            for flat in order:
                idx = np.unravel_index(int(flat), p.shape)
                orig = p[idx]
                p[idx] = orig + h
                lp = run().loss
                p[idx] = orig - h
                lm = run().loss
                p[idx] = orig
                num = (lp - lm) / (2 * h)
                report.probes.append(ProbeResult(name, tuple(int(i) for i in idx), float(g[idx]), float(num)))
        return report
    finally:
        for k, v in network.buffers().items():
            v[...] = saved_buffers[k]


def gradient_norm(grads: GradientSet) -> float:
    return math.sqrt(sum(float(np.sum(np.abs(g) ** 2)) for g in grads.values()))
