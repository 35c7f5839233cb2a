"""Neuron parameter containers, single-step dynamics and initializers.

Every step function is pure and works elementwise on scalars or numpy arrays,
so the same code advances one neuron or a whole ``(batch, neurons)`` slab.
Parameter containers hold either scalars (one neuron) or equally shaped
arrays (one entry per neuron).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericError, ParameterRangeError
from .numerics import Rng, log_uniform_sample

log = logging.getLogger(__name__)

THETA = 1.0

# Default SiLIF ranges: decays between exp(-1/5) and exp(-1/25) at dt0 = 1.
SILIF_LAMBDA_RANGE = (1.0 / 25.0, 1.0 / 5.0)
SILIF_A_RANGE = (0.0, 1.0)
SILIF_B_RANGE = (0.0, 2.0)
CSILIF_DT_RANGE = (0.01, 0.5)

ADLIF_ALPHA_CLAMP = (0.36, 0.96)
ADLIF_BETA_CLAMP = (0.36, 0.98)
ADLIF_A_CLAMP = (-1.0, 1.0)
CADLIF_A_CLAMP = (0.0, 1.0)
ADLIF_B_CLAMP = (0.0, 2.0)


def heaviside(v, theta=THETA):
    return (np.asarray(v) >= theta).astype(np.result_type(v, np.float32))


SpikeFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class SiLifParams:
    lambda_alpha_log: np.ndarray | float
    lambda_beta_log: np.ndarray | float
    dt_log: np.ndarray | float
    a: np.ndarray | float
    b: np.ndarray | float
    theta: float = THETA
    clamp_a: tuple[float, float] = SILIF_A_RANGE
    clamp_b: tuple[float, float] = SILIF_B_RANGE

    def __len__(self) -> int:
        return int(np.size(self.lambda_alpha_log))

    def clamped_a(self):
        return np.clip(self.a, *self.clamp_a)

    def clamped_b(self):
        return np.clip(self.b, *self.clamp_b)


@dataclass
class CSiLifParams:
    lambda_real_log: np.ndarray | float
    lambda_img: np.ndarray | float
    dt_log: np.ndarray | float
    b: np.ndarray | float
    theta: float = THETA

    # the output projection is frozen; it only enters through the 2*Re(u) read
    C_BAR = 2.0

    def __len__(self) -> int:
        return int(np.size(self.lambda_real_log))


@dataclass
class AdLifParams:
    alpha: np.ndarray | float
    beta: np.ndarray | float
    a: np.ndarray | float
    b: np.ndarray | float
    theta: float = THETA
    clamp_alpha: tuple[float, float] = ADLIF_ALPHA_CLAMP
    clamp_beta: tuple[float, float] = ADLIF_BETA_CLAMP
    clamp_a: tuple[float, float] = ADLIF_A_CLAMP
    clamp_b: tuple[float, float] = ADLIF_B_CLAMP

    @classmethod
    def constrained(cls, alpha, beta, a, b, theta=THETA) -> "AdLifParams":
        """cAdLIF: AdLIF with the coupling ``a`` restricted to nonnegative values."""
        return cls(alpha, beta, a, b, theta, clamp_a=CADLIF_A_CLAMP)

    def clamped(self):
        return (
            np.clip(self.alpha, *self.clamp_alpha),
            np.clip(self.beta, *self.clamp_beta),
            np.clip(self.a, *self.clamp_a),
            np.clip(self.b, *self.clamp_b),
        )


@dataclass
class RfParams:
    alpha_real: np.ndarray | float
    alpha_img: np.ndarray | float
    dt: float = 0.1
    theta: float = THETA


@dataclass
class NeuronState:
    u: np.ndarray | float | complex
    w: np.ndarray | float = 0.0
    s: np.ndarray | float = 0.0


@dataclass
class SsmMatrices:
    a_bar: np.ndarray
    b_bar: np.ndarray
    c_bar: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))
    d_bar: float = 0.0

    def run(self, inputs, x0=None) -> np.ndarray:
        """Iterate ``x_t = A x_{t-1} + B u_t`` and return ``y_t = C x_t + D u_t``."""
        x = np.zeros(2) if x0 is None else np.asarray(x0, dtype=np.float64)
        ys = np.empty(len(inputs))
        for t, u in enumerate(inputs):
            x = self.a_bar @ x + self.b_bar * u
            ys[t] = self.c_bar @ x + self.d_bar * u
        return ys


def _check_finite(*xs):
    for x in xs:
        if not np.all(np.isfinite(x)):
            raise NumericError("neuron parameters must be finite")


def silif_decays(p: SiLifParams):
    """Decay factors ``exp(-exp(lambda_log) * exp(dt_log))`` for membrane and adaptation.

    Very negative log-rates saturate to exactly 1.0 in floating point; this is
    accepted and logged, not raised.
    """
    _check_finite(p.lambda_alpha_log, p.lambda_beta_log, p.dt_log)
    dt = np.exp(p.dt_log)
    alpha = np.exp(-np.exp(p.lambda_alpha_log) * dt)
    beta = np.exp(-np.exp(p.lambda_beta_log) * dt)
    if np.any(alpha == 1.0) or np.any(beta == 1.0) or np.any(alpha == 0.0) or np.any(beta == 0.0):
        log.info("SiLIF decay saturated to 0 or 1 in floating point")
    return alpha, beta


def csilif_alpha(p: CSiLifParams):
    """Complex transition ``exp((-exp(lambda_real_log) + i*lambda_img) * exp(dt_log))``."""
    _check_finite(p.lambda_real_log, p.lambda_img, p.dt_log)
    dt = np.exp(p.dt_log)
    return np.exp((-np.exp(p.lambda_real_log) + 1j * np.asarray(p.lambda_img)) * dt)


# ---------------------------------------------------------------------------
# array-level updates (used by the layers in the network module)


def silif_update(u, w, s, alpha, beta, a, b, current, theta=THETA, spike_fn: SpikeFn | None = None):
    """One SiLIF step. Adaptation reads the previous ``u`` and ``s`` and is updated first."""
    w_new = beta * w + a * u + b * s
    u_new = alpha * (u - s) + (1.0 - alpha) * (current - w_new)
    s_new = heaviside(u_new, theta) if spike_fn is None else spike_fn(u_new)
    return u_new, w_new, s_new


def csilif_update(u, s, alpha, b, current, theta=THETA, spike_fn: SpikeFn | None = None):
    u_new = alpha * (u - 0.5 * s) + b * current
    v = CSiLifParams.C_BAR * np.real(u_new)
    s_new = heaviside(v, theta) if spike_fn is None else spike_fn(v)
    return u_new, s_new


def _reset_amount(theta, s):
    # theta may be inf (no spiking); inf * 0 must stay 0
    if np.ndim(theta) == 0 and np.ndim(s) == 0:
        return 0.0 if s == 0 else theta * s
    with np.errstate(invalid="ignore"):
        return np.where(s == 0, 0.0, theta * s)


def adlif_update(u, w, s, alpha, beta, a, b, current, theta=THETA, spike_fn: SpikeFn | None = None):
    u_new = alpha * u + (1.0 - alpha) * (current - w) - _reset_amount(theta, s)
    w_new = beta * w + a * u + b * s
    s_new = heaviside(u_new, theta) if spike_fn is None else spike_fn(u_new)
    return u_new, w_new, s_new


def rf_update(u, s, alpha_real, alpha_img, dt, current, theta=THETA, spike_fn: SpikeFn | None = None):
    u_new = u + dt * ((alpha_real + 1j * alpha_img) * u + current) - _reset_amount(theta, s)
    v = np.real(u_new)
    s_new = heaviside(v, theta) if spike_fn is None else spike_fn(v)
    return u_new, s_new


# ---------------------------------------------------------------------------
# state/params level API


def silif_step(state: NeuronState, p: SiLifParams, current, alpha=None, beta=None):
    """Advance one SiLIF neuron. Decays may be passed in when precomputed."""
    if alpha is None:
        alpha, beta = silif_decays(p)
    u, w, s = silif_update(state.u, state.w, state.s, alpha, beta, p.clamped_a(), p.clamped_b(), current, p.theta)
    return NeuronState(u, w, s), s


def csilif_step(state: NeuronState, p: CSiLifParams, current, alpha=None):
    if alpha is None:
        alpha = csilif_alpha(p)
    u, s = csilif_update(state.u, state.s, alpha, p.b, current, p.theta)
    return NeuronState(u, 0.0, s), s


def adlif_step(state: NeuronState, p: AdLifParams, current):
    alpha, beta, a, b = p.clamped()
    u, w, s = adlif_update(state.u, state.w, state.s, alpha, beta, a, b, current, p.theta)
    return NeuronState(u, w, s), s


def rf_step(state: NeuronState, p: RfParams, current):
    u, s = rf_update(state.u, state.s, p.alpha_real, p.alpha_img, p.dt, current, p.theta)
    return NeuronState(u, 0.0, s), s


# ---------------------------------------------------------------------------
# initializers


def _check_range(name, lo, hi, positive=False):
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi or (positive and lo <= 0):
        raise ParameterRangeError(f"invalid {name} range [{lo}, {hi}]")


def init_silif(
    rng: Rng,
    n: int,
    lambda_alpha_range=SILIF_LAMBDA_RANGE,
    lambda_beta_range=SILIF_LAMBDA_RANGE,
    a_range=SILIF_A_RANGE,
    b_range=SILIF_B_RANGE,
    dt0: float = 1.0,
) -> SiLifParams:
    """Heterogeneous SiLIF parameters for ``n`` neurons (struct of arrays).

    Rates are drawn log-uniformly, the timestep starts at ``log(dt0)`` for every
    neuron, ``a`` and ``b`` are uniform over their clamp intervals.
    """
    _check_range("lambda_alpha", *lambda_alpha_range, positive=True)
    _check_range("lambda_beta", *lambda_beta_range, positive=True)
    _check_range("a", *a_range)
    _check_range("b", *b_range)
    if not dt0 > 0:
        raise ParameterRangeError(f"dt0 must be positive, got {dt0}")
    return SiLifParams(
        lambda_alpha_log=np.log(log_uniform_sample(rng, *lambda_alpha_range, size=n)),
        lambda_beta_log=np.log(log_uniform_sample(rng, *lambda_beta_range, size=n)),
        dt_log=np.full(n, math.log(dt0)),
        a=rng.uniform(*a_range, size=n),
        b=rng.uniform(*b_range, size=n),
        clamp_a=tuple(a_range),
        clamp_b=tuple(b_range),
    )


def init_csilif(rng: Rng, n: int, dt_min: float = CSILIF_DT_RANGE[0], dt_max: float = CSILIF_DT_RANGE[1]) -> CSiLifParams:
    """S4D-Lin style init: identical continuous poles, heterogeneous timesteps and gains."""
    _check_range("dt", dt_min, dt_max, positive=True)
    return CSiLifParams(
        lambda_real_log=np.full(n, math.log(0.5)),
        lambda_img=np.full(n, math.pi),
        dt_log=np.log(log_uniform_sample(rng, dt_min, dt_max, size=n)),
        b=rng.uniform(0.0, 1.0, size=n),
    )


def init_adlif(rng: Rng, n: int, constrained: bool = False) -> AdLifParams:
    alpha = rng.uniform(math.exp(-1 / 5), ADLIF_ALPHA_CLAMP[1], size=n)
    beta = rng.uniform(0.9, ADLIF_BETA_CLAMP[1], size=n)
    a_clamp = CADLIF_A_CLAMP if constrained else ADLIF_A_CLAMP
    a = rng.uniform(*a_clamp, size=n)
    b = rng.uniform(*ADLIF_B_CLAMP, size=n)
    return AdLifParams(alpha, beta, a, b, clamp_a=a_clamp)


def init_rf(rng: Rng, n: int, dt: float = 0.1) -> RfParams:
    return RfParams(
        alpha_real=rng.uniform(-1.0, -0.1, size=n),
        alpha_img=rng.uniform(-math.pi, math.pi, size=n),
        dt=dt,
    )


# ---------------------------------------------------------------------------
# linear-system views


def coupled_transition(alpha, beta, a) -> np.ndarray:
    """``[[alpha, alpha - 1], [a, beta]]`` stacked over any leading shape."""
    alpha, beta, a = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (alpha, beta, a)))
    return np.stack([np.stack([alpha, alpha - 1.0], -1), np.stack([a, beta], -1)], -2)


def subthreshold_matrices(p: SiLifParams | AdLifParams) -> SsmMatrices:
    """Linear SSM that reproduces the neuron exactly while it never spikes.

    For AdLIF both state variables read the previous step, giving the coupled
    form ``[[alpha, alpha-1], [a, beta]]``. SiLIF updates ``w`` first and feeds
    the new value into ``u``; substituting it gives
    ``[[alpha - (1-alpha)*a, -(1-alpha)*beta], [a, beta]]``, which reduces to the
    coupled form's spectrum only when ``a = 0``.
    """
    if isinstance(p, SiLifParams):
        alpha, beta = silif_decays(p)
        a = p.clamped_a()
        alpha, beta, a = float(alpha), float(beta), float(a)
        a_bar = np.array([[alpha - (1.0 - alpha) * a, -(1.0 - alpha) * beta], [a, beta]])
    else:
        alpha, beta, a, _ = (float(x) for x in p.clamped())
        a_bar = coupled_transition(alpha, beta, a)
    return SsmMatrices(a_bar=a_bar, b_bar=np.array([1.0 - alpha, 0.0]))


def complex_as_real(a: complex, b: complex) -> tuple[np.ndarray, np.ndarray]:
    """2x2 real system equivalent to the scalar recursion ``x_t = a x_{t-1} + b u_t``."""
    a = complex(a)
    b = complex(b)
    return np.array([[a.real, -a.imag], [a.imag, a.real]]), np.array([b.real, b.imag])
