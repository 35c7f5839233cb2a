"""Seeded randomness, 2x2 eigenvalues and diagonal ZOH discretization.

The random generator is SplitMix64 evaluated in counter mode: output ``i`` of
stream ``(seed, stream_id)`` is ``mix(key + (i + 1) * GOLDEN)`` with

    GOLDEN = 0x9E3779B97F4A7C15
    mix(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
            z ^= z >> 27; z *= 0x94D049BB133111EB
            z ^= z >> 31
    key    = mix(seed * GOLDEN + mix(stream_id + GOLDEN))

all in wrapping 64-bit arithmetic. Doubles are ``(x >> 11) * 2**-53``. These
constants make every draw reproducible in any language with 64-bit integers.
"""

from __future__ import annotations

import cmath
import math
import zlib
from typing import Sequence

import numpy as np

from .errors import NumericError, ParameterRangeError, SingularTransitionError

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def stream_id_for(name: str) -> int:
    """Stable stream id for a named parameter group or layer."""
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """Counter-based generator owned by exactly one caller at a time."""

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.stream_id = int(stream_id) & _MASK
        self.counter = int(counter)
        with np.errstate(over="ignore"):
            inner = _mix(np.array([self.stream_id], dtype=np.uint64) + GOLDEN)
            key = np.array([self.seed], dtype=np.uint64) * GOLDEN + inner
            self._key = _mix(key)[0]

    def spawn(self, name: str | int) -> "Rng":
        sid = stream_id_for(name) if isinstance(name, str) else int(name)
        return Rng(self.seed, sid ^ self.stream_id)

    def state(self) -> tuple[int, int, int]:
        return self.seed, self.stream_id, self.counter

    def random_raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(self._key + idx * GOLDEN)

    def random(self, size: int | Sequence[int] | None = None) -> np.ndarray | float:
        """Uniform doubles on [0, 1)."""
        shape = () if size is None else (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.random_raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if size is None:
            return float(u[0])
        return u.reshape(shape)

    def uniform(self, lo: float, hi: float, size=None):
        return lo + (hi - lo) * self.random(size)

    def integers(self, lo: int, hi: int, size=None):
        """Integers in [lo, hi)."""
        u = self.random(size)
        return (lo + np.floor(u * (hi - lo))).astype(np.int64) if size is not None else int(lo + math.floor(u * (hi - lo)))

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates; one draw per swap
        out = np.arange(n)
        if n < 2:
            return out
        u = self.random(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            out[i], out[j] = out[j], out[i]
        return out


def log_uniform_sample(rng: Rng, lo: float, hi: float, size=None):
    """Sample ``exp(U(log lo, log hi))``."""
    if not (lo > 0 and lo <= hi):
        raise ParameterRangeError(f"log-uniform range requires 0 < lo <= hi, got [{lo}, {hi}]")
    if lo == hi:
        return lo if size is None else np.full(size, float(lo))
    x = np.exp(rng.uniform(math.log(lo), math.log(hi), size))
    # exp/log round-trip can step one ulp outside the interval
    x = np.clip(x, lo, hi)
    return float(x) if size is None else x


def eig_2x2(m) -> tuple[complex, complex]:
    """Both eigenvalues of a real 2x2 matrix, ordered by (re, im) descending.

    The discriminant is evaluated as ``(m00 - m11)**2 + 4*m01*m10`` rather than
    ``tr**2 - 4*det`` so that its sign is free of cancellation.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("eig_2x2 requires finite entries")
    l1, l2 = eig_2x2_arrays(m[0, 0], m[0, 1], m[1, 0], m[1, 1])
    roots = sorted((complex(l1), complex(l2)), key=lambda z: (z.real, z.imag), reverse=True)
    return roots[0], roots[1]


def eig_2x2_arrays(m00, m01, m10, m11):
    """Vectorized eigenvalues; first root has the larger real part or positive imaginary part."""
    m00, m01, m10, m11 = (np.asarray(x, dtype=np.float64) for x in (m00, m01, m10, m11))
    half_tr = 0.5 * (m00 + m11)
    disc = (m00 - m11) ** 2 + 4.0 * m01 * m10
    real = disc >= 0
    root = 0.5 * np.sqrt(np.abs(disc))
    # for real roots use the cancellation-free pair (q, det / q)
    det = m00 * m11 - m01 * m10
    q = half_tr + np.copysign(root, half_tr)
    with np.errstate(divide="ignore", invalid="ignore"):
        other = np.where(q != 0, det / np.where(q != 0, q, 1.0), half_tr - np.copysign(root, half_tr))
    r_hi = np.maximum(q, other)
    r_lo = np.minimum(q, other)
    l1 = np.where(real, r_hi + 0j, half_tr + 1j * root)
    l2 = np.where(real, r_lo + 0j, half_tr - 1j * root)
    # exact answers for the two structured cases, immune to rounding and underflow
    tri = (m01 == 0) | (m10 == 0)
    l1 = np.where(tri, np.maximum(m00, m11) + 0j, l1)
    l2 = np.where(tri, np.minimum(m00, m11) + 0j, l2)
    rot = (m00 == m11) & (m01 == -m10) & (m10 != 0)
    l1 = np.where(rot, m00 + 1j * np.abs(m10), l1)
    l2 = np.where(rot, m00 - 1j * np.abs(m10), l2)
    return l1, l2


def zoh_discretize_diag(a: complex, b: complex, dt: float) -> tuple[complex, complex]:
    """Zero-order hold for a scalar (diagonal) continuous system.

    Returns ``(exp(a*dt), (exp(a*dt) - 1) / a * b)``. A zero ``a`` is rejected;
    its limit ``b * dt`` must be requested explicitly by the caller.
    """
    if not dt > 0:
        raise ParameterRangeError(f"dt must be positive, got {dt}")
    a = complex(a)
    b = complex(b)
    if a == 0:
        raise SingularTransitionError("a = 0: use the limit b_bar = b * dt")
    a_bar = cmath.exp(a * dt)
    b_bar = (a_bar - 1.0) / a * b
    return a_bar, b_bar
