"""Spike tensors, the SPKT container, event binning and a synthetic task.

SPKT layout (all integers little-endian)::

    b"SPKT"  version:u32  dtype:u8  ndim:u8  dims:u64[ndim]
    payload (row-major; dtype 0 = u8, 1 = f32)
    n_labels:u64  labels:u32[n_labels]
    meta_len:u64  meta: UTF-8 JSON object
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterRangeError
from .numerics import Rng

SPKT_MAGIC = b"SPKT"
SPKT_VERSION = 1
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}


@dataclass
class SpikeTensor:
    """``batch x time x channel`` activity with per-sample labels."""

    data: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        if self.data.ndim != 3:
            raise DataError(f"spike tensor must be 3-D (batch, time, channel), got shape {self.data.shape}")
        if len(self.labels) != self.data.shape[0]:
            raise DataError(f"{len(self.labels)} labels for {self.data.shape[0]} samples")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def timesteps(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.data == 0) | (self.data == 1)))

    @property
    def n_classes(self) -> int:
        declared = self.meta.get("classes")
        if declared:
            return int(declared)
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx) -> "SpikeTensor":
        return SpikeTensor(self.data[idx], self.labels[idx], dict(self.meta))


# ---------------------------------------------------------------------------
# SPKT container


def encode_spkt(t: SpikeTensor) -> bytes:
    if t.data.dtype in (np.uint8, np.bool_):
        code, payload = 0, t.data.astype("<u1")
    elif t.data.dtype == np.float32:
        code, payload = 1, t.data.astype("<f4")
    else:
        raise DataError(f"SPKT stores u8 or f32 data, got {t.data.dtype}; convert explicitly")
    meta = json.dumps(t.meta, sort_keys=True).encode("utf-8")
    parts = [
        SPKT_MAGIC,
        struct.pack("<IBB", SPKT_VERSION, code, payload.ndim),
        struct.pack(f"<{payload.ndim}Q", *payload.shape),
        np.ascontiguousarray(payload).tobytes(),
        struct.pack("<Q", len(t.labels)),
        t.labels.astype("<u4").tobytes(),
        struct.pack("<Q", len(meta)),
        meta,
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_spkt(buf: bytes) -> SpikeTensor:
    r = _Reader(buf)
    if r.take(4, "magic") != SPKT_MAGIC:
        raise FormatError("bad magic, expected b'SPKT'", 0)
    (version,) = r.unpack("<I", "version")
    if version != SPKT_VERSION:
        raise FormatError(f"unsupported SPKT version {version}", 4)
    code, ndim = r.unpack("<BB", "dtype/ndim")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 8)
    if ndim != 3:
        raise FormatError(f"expected 3 dimensions, got {ndim}", 9)
    dims = r.unpack(f"<{ndim}Q", "dims")
    dtype = _DTYPES[code]
    n = math.prod(dims) * dtype.itemsize
    data = np.frombuffer(r.take(n, "payload"), dtype=dtype).reshape(dims).copy()
    (n_labels,) = r.unpack("<Q", "label count")
    if n_labels != dims[0]:
        raise FormatError(f"label count {n_labels} does not match batch size {dims[0]}", r.pos - 8)
    labels = np.frombuffer(r.take(4 * n_labels, "labels"), dtype="<u4").copy()
    (meta_len,) = r.unpack("<Q", "metadata length")
    start = r.pos
    raw = r.take(meta_len, "metadata")
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid UTF-8 JSON: {exc}", start) from None
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after metadata", r.pos)
    return SpikeTensor(data.astype(dtype.newbyteorder("=")), labels, meta)


def save_spkt(path, t: SpikeTensor) -> None:
    Path(path).write_bytes(encode_spkt(t))


def load_spkt(path) -> SpikeTensor:
    return decode_spkt(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# event streams


@dataclass
class EventStream:
    """One sample: nondecreasing timestamps in microseconds and channel ids."""

    times_us: np.ndarray
    channels: np.ndarray
    label: int = 0

    def __post_init__(self):
        self.times_us = np.asarray(self.times_us, dtype=np.int64)
        self.channels = np.asarray(self.channels, dtype=np.int64)
        if self.times_us.shape != self.channels.shape or self.times_us.ndim != 1:
            raise DataError("times and channels must be 1-D arrays of equal length")
        if np.any(np.diff(self.times_us) < 0):
            bad = int(np.argmax(np.diff(self.times_us) < 0)) + 1
            raise DataError(f"timestamps decrease at event {bad}")
        if np.any(self.times_us < 0):
            raise DataError("negative timestamp")


def bin_events(
    streams,
    bin_ms: float,
    pool_factor: int,
    channels: int,
    n_bins: int | None = None,
) -> SpikeTensor:
    """Bin event streams into a binary tensor.

    Raw channel ``c`` lands in pooled channel ``c // pool_factor``; a bin is 1
    when at least one event fell into it. Samples are zero-padded to the
    longest one (or to ``n_bins``) and their own lengths go into the metadata.
    """
    if isinstance(streams, EventStream):
        streams = [streams]
    if not bin_ms > 0:
        raise ParameterRangeError(f"bin width must be positive, got {bin_ms}")
    if pool_factor < 1 or channels % pool_factor:
        raise ParameterRangeError(f"pool factor {pool_factor} must divide the channel count {channels}")
    bin_us = bin_ms * 1000.0
    lengths = []
    for i, s in enumerate(streams):
        if len(s.channels) and (s.channels.min() < 0 or s.channels.max() >= channels):
            raise DataError(f"sample {i}: channel outside [0, {channels})")
        lengths.append(int(s.times_us[-1] // bin_us) + 1 if len(s.times_us) else 0)
    T = n_bins if n_bins is not None else max(lengths + [1])
    out = np.zeros((len(streams), T, channels // pool_factor), dtype=np.uint8)
    for i, s in enumerate(streams):
        b = (s.times_us // bin_us).astype(np.int64)
        keep = b < T
        out[i, b[keep], s.channels[keep] // pool_factor] = 1
    meta = {"bin_ms": bin_ms, "channels": channels // pool_factor, "lengths": [min(l, T) for l in lengths]}
    return SpikeTensor(out, [s.label for s in streams], meta)


def read_event_text(path, label: int = 0) -> EventStream:
    """Parse ``t_us,channel`` lines (blank lines and ``#`` comments ignored)."""
    times, chans = [], []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                t, c = line.split(",")
                times.append(int(t))
                chans.append(int(c))
            except ValueError:
                raise DataError(f"{path}:{lineno}: expected 't_us,channel', got {line!r}") from None
    return EventStream(np.array(times, dtype=np.int64), np.array(chans, dtype=np.int64), label)


def read_labels(path) -> list[int]:
    out = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise DataError(f"{path}:{lineno}: label must be an integer, got {line!r}") from None
    return out


# ---------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class SynthTaskSpec:
    classes: int = 10
    channels: int = 64
    timesteps: int = 100
    template_rate: float = 0.05
    jitter_steps: int = 2
    drop_prob: float = 0.2
    samples_per_class: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("template_rate", "drop_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ParameterRangeError(f"{name} must be a probability, got {v}")
        for name in ("classes", "channels", "timesteps", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ParameterRangeError(f"{name} must be at least 1")
        if self.jitter_steps < 0:
            raise ParameterRangeError("jitter_steps must be non-negative")


SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


def synthetic_templates(spec: SynthTaskSpec) -> np.ndarray:
    rng = Rng(spec.seed).spawn("synthetic.templates")
    return (rng.random((spec.classes, spec.timesteps, spec.channels)) < spec.template_rate).astype(np.uint8)


def _sample_from(template: np.ndarray, spec: SynthTaskSpec, rng: Rng) -> np.ndarray:
    t_idx, c_idx = np.nonzero(template)
    n = len(t_idx)
    keep = rng.random(n) >= spec.drop_prob
    shift = rng.integers(-spec.jitter_steps, spec.jitter_steps + 1, n)
    t_new = t_idx + shift
    ok = keep & (t_new >= 0) & (t_new < spec.timesteps)
    out = np.zeros_like(template)
    out[t_new[ok], c_idx[ok]] = 1
    return out


def gen_synthetic(spec: SynthTaskSpec = SynthTaskSpec()) -> dict[str, SpikeTensor]:
    """Jittered, thinned copies of one random template per class.

    Each spike of the template is dropped with ``drop_prob``, otherwise moved
    by a uniform integer offset in ``[-jitter, jitter]`` (spikes pushed off the
    ends vanish). Splits are stratified 70/15/15 per class.
    """
    templates = synthetic_templates(spec)
    root = Rng(spec.seed).spawn("synthetic.samples")
    n = spec.samples_per_class
    cuts = [round(n * SPLIT_FRACTIONS[0]), round(n * (SPLIT_FRACTIONS[0] + SPLIT_FRACTIONS[1]))]
    parts = {s: ([], []) for s in SPLITS}
    for k in range(spec.classes):
        rng = root.spawn(k)
        samples = [_sample_from(templates[k], spec, rng) for _ in range(n)]
        order = rng.permutation(n)
        for split, idx in zip(SPLITS, np.split(order, cuts)):
            parts[split][0].extend(samples[i] for i in idx)
            parts[split][1].extend([k] * len(idx))
    meta = {"bin_ms": 1.0, "channels": spec.channels, "classes": spec.classes, "source": "synthetic", "seed": spec.seed}
    out = {}
    for split, (xs, ys) in parts.items():
        shape = (0, spec.timesteps, spec.channels)
        data = np.stack(xs) if xs else np.zeros(shape, np.uint8)
        out[split] = SpikeTensor(data, ys, dict(meta, split=split))
    return out


def nearest_template_accuracy(tensor: SpikeTensor, templates: np.ndarray) -> float:
    """Accuracy of assigning each sample to the template at least Hamming distance."""
    x = tensor.data.reshape(len(tensor), -1).astype(np.int32)
    tp = templates.reshape(len(templates), -1).astype(np.int32)
    # |x - t| = |x| + |t| - 2 x.t for binary vectors
    dist = x.sum(1)[:, None] + tp.sum(1)[None, :] - 2 * x @ tp.T
    return float(np.mean(np.argmin(dist, axis=1) == tensor.labels))


def iterate_batches(t: SpikeTensor, batch: int, rng: Rng | None = None):
    """Yield ``(data, labels)`` minibatches, shuffled when ``rng`` is given."""
    order = rng.permutation(len(t)) if rng is not None else np.arange(len(t))
    for start in range(0, len(t), batch):
        idx = order[start : start + batch]
        yield t.data[idx], t.labels[idx].astype(np.int64)
