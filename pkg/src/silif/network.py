"""Layers and network assembly.

All layers consume and produce ``(batch, time, features)`` arrays. A layer's
``forward`` records a node on ``ctx.tape`` when one is present (train mode);
its closure reverses that single primitive.

Default wiring, per hidden layer::

    dense | dcls  ->  batchnorm  ->  spiking neurons  ->  dropout

followed by ``dense -> leaky-integrator readout``; the readout membrane is the
logit sequence consumed by :func:`softmax_sum`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradientSet, SpikeConfig, Tape
from .errors import ParameterRangeError, ShapeError
from .neurons import (
    AdLifParams,
    CSiLifParams,
    RfParams,
    SiLifParams,
    THETA,
    adlif_update,
    csilif_alpha,
    csilif_update,
    init_adlif,
    init_csilif,
    init_rf,
    init_silif,
    rf_update,
    silif_decays,
    silif_update,
)
from .numerics import Rng

log = logging.getLogger(__name__)

MODELS = ("silif", "csilif", "adlif", "cadlif", "rf")


@dataclass
class RunContext:
    mode: str = "eval"
    rng: Rng | None = None
    tape: Tape | None = None
    spike: SpikeConfig = field(default_factory=SpikeConfig)
    random_init_state: bool = False

    @property
    def train(self) -> bool:
        return self.mode == "train"


# ---------------------------------------------------------------------------
# stateless primitives


def dense(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``x @ weights.T`` over the trailing axis."""
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weights {weights.shape}")
    return x @ weights.T


def _outer_sum(g, x):
    """``sum_{b,t} g[b,t,:] x[b,t,:]^T`` as a single matmul."""
    return g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def dropout_mask(rng: Rng, shape, p: float, dtype=np.float64) -> np.ndarray:
    """Binary keep-mask scaled by ``1 / (1 - p)``."""
    if not 0 <= p < 1:
        raise ParameterRangeError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def dcls_kernel(d, sigma: float, max_delay: int) -> np.ndarray:
    """Normalized Gaussian delay kernel of length ``max_delay + 1``.

    Index ``p`` carries lag ``max_delay - 1 - p``, so the Gaussian is centred
    at ``max_delay - d - 1``. The last index would be a one-step look-ahead; it
    is kept in the layout but held at zero so the convolution stays causal.
    Works elementwise over an array of delays (kernel on the last axis).
    """
    if not sigma > 0:
        raise ParameterRangeError(f"sigma must be positive, got {sigma}")
    d = _clamp_delays(np.asarray(d, dtype=np.float64), max_delay)
    pos = np.arange(max_delay + 1, dtype=np.float64)
    center = (max_delay - 1 - d)[..., None]
    k = np.exp(-((pos - center) ** 2) / (2.0 * sigma**2))
    k[..., max_delay] = 0.0
    return k / k.sum(-1, keepdims=True)


def _clamp_delays(d, max_delay):
    lo, hi = 0.0, float(max_delay - 1)
    if np.any(d < lo) or np.any(d > hi):
        log.warning("delays outside [0, %s] clamped", hi)
        d = np.clip(d, lo, hi)
    return d


def rounded_kernel(d, max_delay: int) -> np.ndarray:
    """Eval-time kernel: all mass on the nearest integer delay."""
    d = _clamp_delays(np.asarray(d, dtype=np.float64), max_delay)
    lag = np.floor(d + 0.5).astype(np.int64)
    k = np.zeros(d.shape + (max_delay + 1,))
    np.put_along_axis(k, (max_delay - 1 - lag)[..., None], 1.0, axis=-1)
    return k


def sigma_schedule(epoch: int, total_epochs: int, max_delay: int) -> float:
    """Linear anneal from ``max_delay / 2`` to 0.5 over the first quarter of training."""
    if total_epochs < 4:
        raise ParameterRangeError("sigma schedule needs at least 4 epochs")
    start = max_delay / 2.0
    end_epoch = total_epochs / 4.0
    if epoch >= end_epoch:
        return 0.5
    return start + (0.5 - start) * (epoch / end_epoch)


def delay_convolve(spikes: np.ndarray, weights: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Causal per-synapse convolution ``I_o(t) = sum_i sum_lag w_oi k_oi[lag] S_i(t - lag)``.

    ``kernels`` has shape ``(out, in, max_delay + 1)`` in the index layout of
    :func:`dcls_kernel`.
    """
    max_delay = kernels.shape[-1] - 1
    B, T, n_in = spikes.shape
    if weights.shape[1] != n_in:
        raise ShapeError(f"input width {n_in} does not match weights {weights.shape}")
    padded = np.concatenate([np.zeros((B, max_delay, n_in), spikes.dtype), spikes], axis=1)
    out = np.zeros((B, T, weights.shape[0]), dtype=np.result_type(spikes, weights))
    for p in range(max_delay):
        lag = max_delay - 1 - p
        kp = (weights * kernels[:, :, p]).astype(out.dtype)
        if not kp.any():
            continue
        out += padded[:, max_delay - lag : max_delay - lag + T] @ kp.T
    return out


def shift_convolve(spikes: np.ndarray, weights: np.ndarray, delays: np.ndarray) -> np.ndarray:
    """Reference integer-delay synapses: weighted, shifted spike trains."""
    B, T, n_in = spikes.shape
    out = np.zeros((B, T, weights.shape[0]))
    for o in range(weights.shape[0]):
        for i in range(n_in):
            d = int(delays[o, i])
            if d < T:
                out[:, d:, o] += weights[o, i] * spikes[:, : T - d, i]
    return out


def softmax_sum(logits: np.ndarray) -> np.ndarray:
    """Per-step softmax over classes, summed over time: ``(B, T, C) -> (B, C)``."""
    return _softmax(logits).sum(axis=1)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def li_readout(currents: np.ndarray, alpha) -> np.ndarray:
    """Non-spiking leaky integrator ``u_t = alpha u_{t-1} + (1 - alpha) I_t`` from rest."""
    alpha = np.asarray(alpha)
    u = np.zeros(currents.shape[::2], dtype=np.result_type(currents, alpha))
    out = np.empty(currents.shape, dtype=u.dtype)
    for t in range(currents.shape[1]):
        u = alpha * u + (1.0 - alpha) * currents[:, t]
        out[:, t] = u
    return out


# ---------------------------------------------------------------------------
# parametrized layers


class Dense:
    def __init__(self, name: str, n_in: int, n_out: int, rng: Rng, dtype=np.float64):
        bound = 1.0 / math.sqrt(n_in)
        self.name = name
        self.weight = rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype)

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self):
        return {f"{self.name}.weight": self.weight}

    def forward(self, x, ctx: RunContext):
        y = dense(x, self.weight)
        if ctx.tape is not None:
            W, key = self.weight, f"{self.name}.weight"

            def backward(g, grads):
                grads[key] += _outer_sum(g, x)
                return g @ W

            ctx.tape.record("affine", self.name, backward)
        return y


class DclsDense:
    """Learnable-delay synapses with a shared, externally scheduled ``sigma``."""

    def __init__(self, name: str, n_in: int, n_out: int, max_delay: int, rng: Rng, dtype=np.float64):
        if max_delay < 1:
            raise ParameterRangeError("max_delay must be at least 1")
        bound = 1.0 / math.sqrt(n_in)
        self.name = name
        self.max_delay = int(max_delay)
        self.weight = rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype)
        self.delay = rng.uniform(0.0, max_delay - 1, (n_out, n_in)).astype(dtype)
        self.sigma = max_delay / 2.0

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.delay": self.delay}

    def forward(self, x, ctx: RunContext):
        if not ctx.train:
            return delay_convolve(x, self.weight, rounded_kernel(self.delay, self.max_delay))
        kern = dcls_kernel(self.delay, self.sigma, self.max_delay)
        y = delay_convolve(x, self.weight, kern)
        if ctx.tape is not None:
            self._record(x, kern, ctx.tape)
        return y

    def _record(self, x, kern, tape):
        W, D, Td, sigma = self.weight, self.delay, self.max_delay, self.sigma
        wkey, dkey = f"{self.name}.weight", f"{self.name}.delay"
        B, T, n_in = x.shape
        in_range = (D >= 0) & (D <= Td - 1)

        def backward(g, grads):
            padded = np.concatenate([np.zeros((B, Td, n_in), x.dtype), x], axis=1)
            dpad = np.zeros_like(padded)
            gflat = g.reshape(-1, g.shape[-1])
            dk = np.zeros(kern.shape)
            for p in range(Td):
                lag = Td - 1 - p
                xs = padded[:, Td - lag : Td - lag + T]
                dk[:, :, p] = gflat.T @ xs.reshape(-1, n_in)
                dpad[:, Td - lag : Td - lag + T] += g @ (W * kern[:, :, p]).astype(g.dtype)
            grads[wkey] += (dk * kern).sum(-1)
            # d kernel / d delay for a normalized Gaussian centred at Td - d - 1
            center = (Td - 1 - np.clip(D, 0, Td - 1))[..., None]
            z = (np.arange(Td + 1) - center) / sigma**2
            z[..., Td] = 0.0
            dkern_dd = -kern * (z - (kern * z).sum(-1, keepdims=True))
            grads[dkey] += np.where(in_range, (dk * W[..., None] * dkern_dd).sum(-1), 0.0)
            return dpad[:, Td:]

        tape.record("affine", self.name, backward)


class BatchNorm:
    def __init__(self, name: str, n: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.name = name
        self.gamma = np.ones(n, dtype=dtype)
        self.beta_shift = np.zeros(n, dtype=dtype)
        self.running_mean = np.zeros(n, dtype=dtype)
        self.running_var = np.ones(n, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta_shift": self.beta_shift}

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def forward(self, x, ctx: RunContext):
        """Normalize each feature over the flattened batch x time axis."""
        if not ctx.train:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
            return self.gamma * xhat + self.beta_shift
        flat = x.reshape(-1, x.shape[-1])
        m = flat.shape[0]
        if m < 2:
            raise ShapeError("train-mode batchnorm needs at least 2 samples per feature")
        mean = flat.mean(0)
        var = flat.var(0)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
        self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * var * m / (m - 1)
        if ctx.tape is not None:
            gamma, gkey, bkey = self.gamma, f"{self.name}.gamma", f"{self.name}.beta_shift"

            def backward(g, grads):
                gf = g.reshape(-1, g.shape[-1])
                xf = xhat.reshape(-1, g.shape[-1])
                grads[gkey] += (gf * xf).sum(0)
                grads[bkey] += gf.sum(0)
                dxhat = gf * gamma
                dx = inv / m * (m * dxhat - dxhat.sum(0) - xf * (dxhat * xf).sum(0))
                return dx.reshape(g.shape)

            ctx.tape.record("normalization", self.name, backward)
        return self.gamma * xhat + self.beta_shift


class Dropout:
    """Per-(sample, feature) mask held constant across time; identity in eval."""

    def __init__(self, name: str, p: float):
        if not 0 <= p < 1:
            raise ParameterRangeError(f"dropout rate must be in [0, 1), got {p}")
        self.name = name
        self.p = p

    def parameters(self):
        return {}

    def forward(self, x, ctx: RunContext):
        if not ctx.train or self.p == 0:
            return x
        mask = dropout_mask(ctx.rng, (x.shape[0], 1, x.shape[2]), self.p, x.dtype)
        if ctx.tape is not None:
            ctx.tape.record("elementwise", self.name, lambda g, grads: g * mask)
        return x * mask


# ---------------------------------------------------------------------------
# neuron layers


class _NeuronLayer:
    name: str
    n: int

    def _initial(self, ctx: RunContext, shape, dtype, fields=("u", "w", "s")):
        if ctx.train and ctx.random_init_state:
            return [ctx.rng.random(shape).astype(dtype) for _ in fields]
        return [np.zeros(shape, dtype) for _ in fields]

    def _check(self, current):
        if current.shape[-1] != self.n:
            raise ShapeError(f"{self.name}: expected {self.n} input features, got {current.shape[-1]}")


class SiLifLayer(_NeuronLayer):
    def __init__(self, name: str, params: SiLifParams, dtype=np.float64):
        self.name = name
        self.n = len(params)
        self.lambda_alpha_log = np.asarray(params.lambda_alpha_log, dtype=dtype)
        self.lambda_beta_log = np.asarray(params.lambda_beta_log, dtype=dtype)
        self.dt_log = np.asarray(params.dt_log, dtype=dtype)
        self.a = np.asarray(params.a, dtype=dtype)
        self.b = np.asarray(params.b, dtype=dtype)
        self.clamp_a = params.clamp_a
        self.clamp_b = params.clamp_b
        self.theta = params.theta

    @property
    def params(self) -> SiLifParams:
        return SiLifParams(
            self.lambda_alpha_log, self.lambda_beta_log, self.dt_log, self.a, self.b, self.theta, self.clamp_a, self.clamp_b
        )

    def parameters(self):
        names = ("lambda_alpha_log", "lambda_beta_log", "dt_log", "a", "b")
        return {f"{self.name}.{k}": getattr(self, k) for k in names}

    def forward(self, current, ctx: RunContext):
        self._check(current)
        p = self.params
        alpha, beta = silif_decays(p)
        a, b = p.clamped_a(), p.clamped_b()
        B, T, N = current.shape
        dtype = current.dtype
        linear = ctx.spike.mode == "linear"
        cur = np.moveaxis(current, 1, 0)
        u = np.empty((T + 1, B, N), dtype)
        w = np.empty_like(u)
        s = np.empty_like(u)
        u[0], w[0], s[0] = self._initial(ctx, (B, N), dtype)
        if linear:
            s[0] = 0
        spike = ctx.spike.spike_fn(self.theta)
        for t in range(T):
            u[t + 1], w[t + 1], s[t + 1] = silif_update(u[t], w[t], s[t], alpha, beta, a, b, cur[t], self.theta, spike)
        out = u[1:] if linear else s[1:]
        if ctx.tape is not None:
            self._record(ctx, u, w, s, cur, alpha, beta, a, b)
        return np.moveaxis(out, 0, 1)

    def _record(self, ctx, u, w, s, cur, alpha, beta, a, b):
        linear = ctx.spike.mode == "linear"
        reset_flows = not ctx.spike.detach_reset
        sg = None if linear else ctx.spike.spike_grad(u[1:], self.theta)
        a_mask = (self.a >= self.clamp_a[0]) & (self.a <= self.clamp_a[1])
        b_mask = (self.b >= self.clamp_b[0]) & (self.b <= self.clamp_b[1])
        keys = {k: f"{self.name}.{k}" for k in ("lambda_alpha_log", "lambda_beta_log", "dt_log", "a", "b")}
        T = cur.shape[0]

        def backward(g_out, grads):
            g = np.moveaxis(g_out, 1, 0)
            du = np.zeros_like(u[0])
            dw = np.zeros_like(u[0])
            ds = np.zeros_like(u[0])
            dA = np.zeros_like(u[0])
            dB = np.zeros_like(u[0])
            da = np.zeros_like(u[0])
            db = np.zeros_like(u[0])
            dcur = np.empty_like(cur)
            for t in range(T - 1, -1, -1):
                if linear:
                    du_t = du + g[t]
                else:
                    du_t = du + (ds + g[t]) * sg[t]
                dA += du_t * (u[t] - s[t] - cur[t] + w[t + 1])
                dcur[t] = (1.0 - alpha) * du_t
                dw_t = dw - (1.0 - alpha) * du_t
                dB += dw_t * w[t]
                da += dw_t * u[t]
                db += dw_t * s[t]
                du = alpha * du_t + a * dw_t
                dw = beta * dw_t
                ds = (b * dw_t - alpha * du_t) if reset_flows else np.zeros_like(du)
            dA, dB = dA.sum(0), dB.sum(0)
            rate_a = np.exp(self.lambda_alpha_log) * np.exp(self.dt_log)
            rate_b = np.exp(self.lambda_beta_log) * np.exp(self.dt_log)
            ga = -dA * alpha * rate_a
            gb = -dB * beta * rate_b
            grads[keys["lambda_alpha_log"]] += ga
            grads[keys["lambda_beta_log"]] += gb
            grads[keys["dt_log"]] += ga + gb
            grads[keys["a"]] += np.where(a_mask, da.sum(0), 0.0)
            grads[keys["b"]] += np.where(b_mask, db.sum(0), 0.0)
            return np.moveaxis(dcur, 0, 1)

        ctx.tape.record("neuron-step", self.name, backward, membrane=u[1:], spike_grad=sg, theta=self.theta)


class CSiLifLayer(_NeuronLayer):
    def __init__(self, name: str, params: CSiLifParams, dtype=np.float64):
        self.name = name
        self.n = len(params)
        self.lambda_real_log = np.asarray(params.lambda_real_log, dtype=dtype)
        self.lambda_img = np.asarray(params.lambda_img, dtype=dtype)
        self.dt_log = np.asarray(params.dt_log, dtype=dtype)
        self.b = np.asarray(params.b, dtype=dtype)
        self.theta = params.theta

    @property
    def params(self) -> CSiLifParams:
        return CSiLifParams(self.lambda_real_log, self.lambda_img, self.dt_log, self.b, self.theta)

    def parameters(self):
        return {f"{self.name}.{k}": getattr(self, k) for k in ("lambda_real_log", "lambda_img", "dt_log", "b")}

    def forward(self, current, ctx: RunContext):
        self._check(current)
        alpha = csilif_alpha(self.params)
        B, T, N = current.shape
        rdtype = current.dtype
        cdtype = np.result_type(rdtype, np.complex64)
        alpha = alpha.astype(cdtype)
        linear = ctx.spike.mode == "linear"
        cur = np.moveaxis(current, 1, 0)
        u = np.empty((T + 1, B, N), cdtype)
        s = np.empty((T + 1, B, N), rdtype)
        u0, s0 = self._initial(ctx, (B, N), rdtype, ("u", "s"))
        u[0] = u0
        s[0] = 0 if linear else s0
        spike = ctx.spike.spike_fn(self.theta)
        for t in range(T):
            u[t + 1], s[t + 1] = csilif_update(u[t], s[t], alpha, self.b, cur[t], self.theta, spike)
        out = (CSiLifParams.C_BAR * u[1:].real).astype(rdtype) if linear else s[1:]
        if ctx.tape is not None:
            self._record(ctx, u, s, cur, alpha)
        return np.moveaxis(out, 0, 1)

    def _record(self, ctx, u, s, cur, alpha):
        linear = ctx.spike.mode == "linear"
        reset_flows = not ctx.spike.detach_reset
        v = CSiLifParams.C_BAR * u[1:].real
        sg = None if linear else ctx.spike.spike_grad(v, self.theta)
        b = self.b
        T = cur.shape[0]
        name = self.name

        def backward(g_out, grads):
            g = np.moveaxis(g_out, 1, 0)
            gu = np.zeros_like(u[0])
            ds = np.zeros_like(s[0])
            g_alpha = np.zeros_like(u[0])
            g_b = np.zeros_like(s[0])
            dcur = np.empty_like(cur)
            for t in range(T - 1, -1, -1):
                if linear:
                    gu_t = gu + CSiLifParams.C_BAR * g[t]
                else:
                    gu_t = gu + CSiLifParams.C_BAR * (ds + g[t]) * sg[t]
                z = u[t] - 0.5 * s[t]
                g_alpha += gu_t * np.conj(z)
                g_b += gu_t.real * cur[t]
                dcur[t] = b * gu_t.real
                gu = np.conj(alpha) * gu_t
                ds = -0.5 * gu.real if reset_flows else np.zeros_like(ds)
            g_c = np.conj(alpha) * g_alpha.sum(0)
            dt = np.exp(self.dt_log)
            lam = np.exp(self.lambda_real_log)
            grads[f"{name}.lambda_real_log"] += g_c.real * (-lam * dt)
            grads[f"{name}.lambda_img"] += g_c.imag * dt
            grads[f"{name}.dt_log"] += g_c.real * (-lam * dt) + g_c.imag * (self.lambda_img * dt)
            grads[f"{name}.b"] += g_b.sum(0)
            return np.moveaxis(dcur, 0, 1)

        ctx.tape.record("neuron-step", name, backward, membrane=v, spike_grad=sg, theta=self.theta)


class AdLifLayer(_NeuronLayer):
    def __init__(self, name: str, params: AdLifParams, dtype=np.float64):
        self.name = name
        self.n = int(np.size(params.alpha))
        self.alpha = np.asarray(params.alpha, dtype=dtype)
        self.beta = np.asarray(params.beta, dtype=dtype)
        self.a = np.asarray(params.a, dtype=dtype)
        self.b = np.asarray(params.b, dtype=dtype)
        self.theta = params.theta
        self.clamps = (params.clamp_alpha, params.clamp_beta, params.clamp_a, params.clamp_b)

    @property
    def params(self) -> AdLifParams:
        return AdLifParams(self.alpha, self.beta, self.a, self.b, self.theta, *self.clamps)

    def parameters(self):
        return {f"{self.name}.{k}": getattr(self, k) for k in ("alpha", "beta", "a", "b")}

    def forward(self, current, ctx: RunContext):
        self._check(current)
        alpha, beta, a, b = self.params.clamped()
        B, T, N = current.shape
        dtype = current.dtype
        linear = ctx.spike.mode == "linear"
        cur = np.moveaxis(current, 1, 0)
        u = np.empty((T + 1, B, N), dtype)
        w = np.empty_like(u)
        s = np.empty_like(u)
        u[0], w[0], s[0] = self._initial(ctx, (B, N), dtype)
        if linear:
            s[0] = 0
        spike = ctx.spike.spike_fn(self.theta)
        for t in range(T):
            u[t + 1], w[t + 1], s[t + 1] = adlif_update(u[t], w[t], s[t], alpha, beta, a, b, cur[t], self.theta, spike)
        out = u[1:] if linear else s[1:]
        if ctx.tape is not None:
            self._record(ctx, u, w, s, cur, (alpha, beta, a, b))
        return np.moveaxis(out, 0, 1)

    def _record(self, ctx, u, w, s, cur, clamped):
        alpha, beta, a, b = clamped
        linear = ctx.spike.mode == "linear"
        reset_flows = not ctx.spike.detach_reset
        sg = None if linear else ctx.spike.spike_grad(u[1:], self.theta)
        masks = [(x >= lo) & (x <= hi) for x, (lo, hi) in zip((self.alpha, self.beta, self.a, self.b), self.clamps)]
        theta, T, name = self.theta, cur.shape[0], self.name

        def backward(g_out, grads):
            g = np.moveaxis(g_out, 1, 0)
            du = np.zeros_like(u[0])
            dw = np.zeros_like(u[0])
            ds = np.zeros_like(u[0])
            acc = [np.zeros_like(u[0]) for _ in range(4)]
            dcur = np.empty_like(cur)
            for t in range(T - 1, -1, -1):
                du_t = du + g[t] if linear else du + (ds + g[t]) * sg[t]
                dw_t = dw
                acc[0] += du_t * (u[t] - cur[t] + w[t])
                acc[1] += dw_t * w[t]
                acc[2] += dw_t * u[t]
                acc[3] += dw_t * s[t]
                dcur[t] = (1.0 - alpha) * du_t
                du = alpha * du_t + a * dw_t
                dw = beta * dw_t - (1.0 - alpha) * du_t
                ds = (b * dw_t - theta * du_t) if reset_flows else np.zeros_like(du)
            for key, gsum, mask in zip(("alpha", "beta", "a", "b"), acc, masks):
                grads[f"{name}.{key}"] += np.where(mask, gsum.sum(0), 0.0)
            return np.moveaxis(dcur, 0, 1)

        ctx.tape.record("neuron-step", name, backward, membrane=u[1:], spike_grad=sg, theta=theta)


class RfLayer(_NeuronLayer):
    def __init__(self, name: str, params: RfParams, dtype=np.float64):
        self.name = name
        self.n = int(np.size(params.alpha_real))
        self.alpha_real = np.asarray(params.alpha_real, dtype=dtype)
        self.alpha_img = np.asarray(params.alpha_img, dtype=dtype)
        self.dt = float(params.dt)
        self.theta = params.theta

    @property
    def params(self) -> RfParams:
        return RfParams(self.alpha_real, self.alpha_img, self.dt, self.theta)

    def parameters(self):
        return {f"{self.name}.alpha_real": self.alpha_real, f"{self.name}.alpha_img": self.alpha_img}

    def forward(self, current, ctx: RunContext):
        self._check(current)
        B, T, N = current.shape
        rdtype = current.dtype
        cdtype = np.result_type(rdtype, np.complex64)
        linear = ctx.spike.mode == "linear"
        cur = np.moveaxis(current, 1, 0)
        u = np.empty((T + 1, B, N), cdtype)
        s = np.empty((T + 1, B, N), rdtype)
        u0, s0 = self._initial(ctx, (B, N), rdtype, ("u", "s"))
        u[0] = u0
        s[0] = 0 if linear else s0
        spike = ctx.spike.spike_fn(self.theta)
        for t in range(T):
            u[t + 1], s[t + 1] = rf_update(u[t], s[t], self.alpha_real, self.alpha_img, self.dt, cur[t], self.theta, spike)
        out = u[1:].real.astype(rdtype) if linear else s[1:]
        if ctx.tape is not None:
            self._record(ctx, u, s, cur)
        return np.moveaxis(out, 0, 1)

    def _record(self, ctx, u, s, cur):
        linear = ctx.spike.mode == "linear"
        reset_flows = not ctx.spike.detach_reset
        v = u[1:].real
        sg = None if linear else ctx.spike.spike_grad(v, self.theta)
        gamma = (1.0 + self.dt * (self.alpha_real + 1j * self.alpha_img)).astype(u.dtype)
        dt, theta, T, name = self.dt, self.theta, cur.shape[0], self.name

        def backward(g_out, grads):
            g = np.moveaxis(g_out, 1, 0)
            gu = np.zeros_like(u[0])
            ds = np.zeros_like(s[0])
            g_gamma = np.zeros_like(u[0])
            dcur = np.empty_like(cur)
            for t in range(T - 1, -1, -1):
                gu_t = gu + g[t] if linear else gu + (ds + g[t]) * sg[t]
                g_gamma += gu_t * np.conj(u[t])
                dcur[t] = dt * gu_t.real
                ds = -theta * gu_t.real if reset_flows else np.zeros_like(ds)
                gu = np.conj(gamma) * gu_t
            gg = g_gamma.sum(0)
            grads[f"{name}.alpha_real"] += dt * gg.real
            grads[f"{name}.alpha_img"] += dt * gg.imag
            return np.moveaxis(dcur, 0, 1)

        ctx.tape.record("neuron-step", name, backward, membrane=v, spike_grad=sg, theta=theta)


class LiReadout:
    """Dense projection into non-firing leaky integrators, one per class."""

    def __init__(self, name: str, n_in: int, n_classes: int, rng: Rng, dtype=np.float64):
        self.name = name
        bound = 1.0 / math.sqrt(n_in)
        self.weight = rng.uniform(-bound, bound, (n_classes, n_in)).astype(dtype)
        lo, hi = 1.0 / 25.0, 1.0 / 5.0
        self.lambda_log = rng.uniform(math.log(lo), math.log(hi), n_classes).astype(dtype)

    @property
    def alpha(self):
        return np.exp(-np.exp(self.lambda_log))

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.lambda_log": self.lambda_log}

    def forward(self, x, ctx: RunContext):
        current = dense(x, self.weight)
        alpha = self.alpha.astype(current.dtype)
        logits = li_readout(current, alpha)
        if ctx.tape is not None:
            W, lam = self.weight, self.lambda_log
            wkey, lkey = f"{self.name}.weight", f"{self.name}.lambda_log"

            def backward(g, grads):
                T = g.shape[1]
                carry = np.zeros_like(g[:, 0])
                dalpha = np.zeros_like(g[:, 0])
                dcur = np.empty_like(g)
                for t in range(T - 1, -1, -1):
                    gt = g[:, t] + carry
                    prev = logits[:, t - 1] if t > 0 else 0.0
                    dalpha += gt * (prev - current[:, t])
                    dcur[:, t] = (1.0 - alpha) * gt
                    carry = alpha * gt
                grads[lkey] += dalpha.sum(0) * alpha * (-np.exp(lam))
                grads[wkey] += _outer_sum(dcur, x)
                return dcur @ W

            ctx.tape.record("affine", self.name, backward)
        return logits


# ---------------------------------------------------------------------------
# activity bookkeeping


@dataclass
class LayerActivity:
    name: str
    nonzero: int
    neurons: int
    timesteps: int
    samples: int
    fan_out: int
    spiking: bool


@dataclass
class RunTrace:
    """Per-source activity counts feeding SOP and sparsity profiling."""

    layers: list[LayerActivity] = field(default_factory=list)

    def add(self, name, activity: np.ndarray, fan_out: int, spiking: bool):
        B, T, N = activity.shape
        self.layers.append(LayerActivity(name, int(np.count_nonzero(activity)), N, T, B, int(fan_out), spiking))

    def merge(self, other: "RunTrace") -> "RunTrace":
        """Accumulate another batch into this trace (same architecture)."""
        if not self.layers:
            self.layers = [LayerActivity(**vars(l)) for l in other.layers]
            return self
        for mine, theirs in zip(self.layers, other.layers):
            mine.nonzero += theirs.nonzero
            mine.samples += theirs.samples
        return self


# ---------------------------------------------------------------------------
# network


@dataclass
class NeuronInit:
    lambda_min: float = 1.0 / 25.0
    lambda_max: float = 1.0 / 5.0
    dt0: float = 1.0
    a_min: float = 0.0
    a_max: float = 1.0
    b_min: float = 0.0
    b_max: float = 2.0
    dt_min: float = 0.01
    dt_max: float = 0.5
    rf_dt: float = 0.1


def make_neuron_layer(model: str, name: str, n: int, rng: Rng, init: NeuronInit, dtype):
    if model == "silif":
        lam = (init.lambda_min, init.lambda_max)
        p = init_silif(rng, n, lam, lam, (init.a_min, init.a_max), (init.b_min, init.b_max), init.dt0)
        return SiLifLayer(name, p, dtype)
    if model == "csilif":
        return CSiLifLayer(name, init_csilif(rng, n, init.dt_min, init.dt_max), dtype)
    if model in ("adlif", "cadlif"):
        return AdLifLayer(name, init_adlif(rng, n, constrained=model == "cadlif"), dtype)
    if model == "rf":
        return RfLayer(name, init_rf(rng, n, init.rf_dt), dtype)
    raise ParameterRangeError(f"unknown neuron model {model!r}; expected one of {MODELS}")


class HiddenBlock:
    def __init__(self, proj, bn: BatchNorm, neuron, drop: Dropout):
        self.proj = proj
        self.bn = bn
        self.neuron = neuron
        self.drop = drop

    def modules(self):
        return (self.proj, self.bn, self.neuron, self.drop)


class Network:
    """Feedforward spiking network with ``layers`` hidden blocks and an LI readout."""

    def __init__(
        self,
        n_in: int,
        n_classes: int,
        *,
        model: str = "silif",
        hidden: int = 512,
        layers: int = 2,
        dropout: float = 0.1,
        max_delay: int | None = None,
        neuron_init: NeuronInit | None = None,
        seed: int = 0,
        dtype=np.float64,
        spike: SpikeConfig | None = None,
        random_init_state: bool = True,
        bn_momentum: float = 0.1,
    ):
        if model not in MODELS:
            raise ParameterRangeError(f"unknown neuron model {model!r}; expected one of {MODELS}")
        if layers < 1 or hidden < 1:
            raise ParameterRangeError("need at least one hidden layer of positive width")
        self.model = model
        self.n_in = n_in
        self.n_classes = n_classes
        self.hidden = hidden
        self.max_delay = max_delay
        self.dtype = np.dtype(dtype)
        self.spike = spike or SpikeConfig()
        self.random_init_state = random_init_state
        self.seed = seed
        init = neuron_init or NeuronInit()
        root = Rng(seed, 0)
        self.blocks: list[HiddenBlock] = []
        width = n_in
        for i in range(layers):
            name = f"layer{i}"
            rng = root.spawn(name)
            if max_delay:
                proj = DclsDense(f"{name}.proj", width, hidden, max_delay, rng, dtype)
            else:
                proj = Dense(f"{name}.proj", width, hidden, rng, dtype)
            bn = BatchNorm(f"{name}.bn", hidden, bn_momentum, dtype=dtype)
            neuron = make_neuron_layer(model, f"{name}.neuron", hidden, rng, init, dtype)
            self.blocks.append(HiddenBlock(proj, bn, neuron, Dropout(f"{name}.dropout", dropout)))
            width = hidden
        self.readout = LiReadout("readout", width, n_classes, root.spawn("readout"), dtype)

    def modules(self):
        for blk in self.blocks:
            yield from blk.modules()
        yield self.readout

    def parameters(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for m in self.modules():
            out.update(m.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for blk in self.blocks:
            out.update(blk.bn.buffers())
        return out

    def param_group(self, name: str) -> str:
        if name.endswith(".delay"):
            return "delays"
        if ".neuron." in name:
            return "neuron"
        return "weights"

    def neuron_layers(self):
        return [blk.neuron for blk in self.blocks]

    def set_sigma(self, sigma: float) -> None:
        for blk in self.blocks:
            if isinstance(blk.proj, DclsDense):
                blk.proj.sigma = sigma

    def run(self, x: np.ndarray, ctx: RunContext) -> tuple[np.ndarray, RunTrace]:
        """Logits ``(B, T, classes)`` and the activity trace for one batch."""
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[-1] != self.n_in:
            raise ShapeError(f"expected batch x time x {self.n_in} input, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        trace = RunTrace()
        trace.add("input", x, self.blocks[0].proj.n_out, spiking=False)
        h = x
        for i, blk in enumerate(self.blocks):
            h = blk.proj.forward(h, ctx)
            h = blk.bn.forward(h, ctx)
            h = blk.neuron.forward(h, ctx)
            # activity is counted before dropout rescales it
            fan_out = self.blocks[i + 1].proj.n_out if i + 1 < len(self.blocks) else self.n_classes
            trace.add(blk.neuron.name, h, fan_out, spiking=True)
            h = blk.drop.forward(h, ctx)
        return self.readout.forward(h, ctx), trace
