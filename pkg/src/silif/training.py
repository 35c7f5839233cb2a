"""Adam, learning-rate schedules, checkpoints and the epoch loop.

Checkpoint layout (``.slck``, little-endian)::

    b"SLCK"  version:u32  count:u32
    count x { name_len:u32  name:utf-8  dtype:u8  ndim:u8  dims:u64[ndim]  data }

dtype codes: 0 u8, 1 f32, 2 f64, 3 i64, 4 u64. Entries are written in sorted
name order, so identical states produce identical files.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import count_sops, sparsity
from .autodiff import GradientSet, SpikeConfig, SurrogateSpec
from .bptt import backward, cross_entropy, forward
from .config import RunConfig
from .data import SpikeTensor, SynthTaskSpec, gen_synthetic, iterate_batches, load_spkt
from .errors import ConfigError, FormatError, NumericError, ParameterRangeError, ShapeError
from .network import Network, NeuronInit, RunTrace, sigma_schedule
from .numerics import Rng

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over named tensors, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, grads: GradientSet, lr_for) -> None:
        """``lr_for`` is a float or a callable mapping a tensor name to its lr."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.sum(~np.isfinite(g)))
                raise NumericError(f"non-finite gradient in {name!r} ({bad} of {g.size} entries); step {self.step_count + 1} aborted")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            lr = lr_for(name) if callable(lr_for) else lr_for
            p, m, v = self.params[name], self.m[name], self.v[name]
            g = g.astype(p.dtype, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr == 0:
                continue
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# schedules; each exposes ``lr`` and ``end_epoch(epoch, metric)``


class ConstantLr:
    def __init__(self, base: float):
        self.lr = base

    def end_epoch(self, epoch: int, metric: float | None = None) -> float:
        return self.lr

    def state(self):
        return [self.lr]

    def load(self, s):
        self.lr = float(s[0])


class PlateauLr:
    """Multiply by ``factor`` once the metric has failed to improve on its best
    for more than ``patience`` epochs in a row (maximizing, strict improvement)."""

    def __init__(self, base: float, patience: int = 5, factor: float = 0.7):
        if not 0 < factor < 1:
            raise ParameterRangeError(f"plateau factor must lie in (0, 1), got {factor}")
        self.lr = base
        self.patience = patience
        self.factor = factor
        self.best = -math.inf
        self.bad_epochs = 0

    def end_epoch(self, epoch: int, metric: float | None = None) -> float:
        if metric is None:
            return self.lr
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
        return self.lr

    def state(self):
        return [self.lr, self.best, float(self.bad_epochs)]

    def load(self, s):
        self.lr, self.best, self.bad_epochs = float(s[0]), float(s[1]), int(s[2])


def _cos_anneal(start, end, pct):
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * pct))


class OneCycleLr:
    """Cosine warm-up to ``max_mult * base`` over 30% of the epochs, then cosine decay."""

    def __init__(self, base: float, epochs: int, max_mult: float = 5.0, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div: float = 1e4):
        self.max_lr = base * max_mult
        self.initial = self.max_lr / div_factor
        self.final = self.initial / final_div
        self.total = max(int(epochs), 1)
        self.up_end = max(pct_start * self.total - 1.0, 0.0)
        self.down_end = self.total - 1.0
        self.lr = self.lr_at(0)

    def lr_at(self, epoch: int) -> float:
        e = float(epoch)
        if e <= self.up_end:
            pct = e / self.up_end if self.up_end > 0 else 1.0
            return _cos_anneal(self.initial, self.max_lr, pct)
        span = self.down_end - self.up_end
        pct = min((e - self.up_end) / span, 1.0) if span > 0 else 1.0
        return _cos_anneal(self.max_lr, self.final, pct)

    def end_epoch(self, epoch: int, metric: float | None = None) -> float:
        self.lr = self.lr_at(epoch + 1)
        return self.lr

    def state(self):
        return [self.lr]

    def load(self, s):
        self.lr = float(s[0])


class CosineLr:
    def __init__(self, base: float, epochs: int):
        self.base = base
        self.t_max = max(int(epochs), 1)
        self.lr = base

    def lr_at(self, epoch: int) -> float:
        return self.base * (1.0 + math.cos(math.pi * min(epoch, self.t_max) / self.t_max)) / 2.0

    def end_epoch(self, epoch: int, metric: float | None = None) -> float:
        self.lr = self.lr_at(epoch + 1)
        return self.lr

    def state(self):
        return [self.lr]

    def load(self, s):
        self.lr = float(s[0])


def make_schedule(kind: str, base: float, epochs: int, patience: int = 5, factor: float = 0.7, max_mult: float = 5.0):
    if kind == "plateau":
        return PlateauLr(base, patience, factor)
    if kind == "one_cycle":
        return OneCycleLr(base, epochs, max_mult)
    if kind == "cosine":
        return CosineLr(base, epochs)
    if kind == "none":
        return ConstantLr(base)
    raise ParameterRangeError(f"unknown schedule {kind!r}")


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"SLCK"
CKPT_VERSION = 1
_CODE = {np.dtype("u1"): 0, np.dtype("f4"): 1, np.dtype("f8"): 2, np.dtype("i8"): 3, np.dtype("u8"): 4}
_DTYPE = {0: "<u1", 1: "<f4", 2: "<f8", 3: "<i8", 4: "<u8"}


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("=")
        if dt not in _CODE:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}", sum(map(len, parts)))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODE[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(_DTYPE[_CODE[dt]]).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated while reading {what}", pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad magic, expected b'SLCK'", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        start = pos
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", start) from None
        code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if code not in _DTYPE:
            raise FormatError(f"unknown dtype code {code} for {name!r}", pos - 2)
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        dt = np.dtype(_DTYPE[code])
        data = np.frombuffer(take(math.prod(dims) * dt.itemsize, f"data of {name!r}"), dtype=dt)
        out[name] = data.reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return out


@dataclass
class TrainState:
    network: Network
    optimizer: Adam
    schedules: dict
    rng: Rng
    epoch: int = 0
    best_metric: float = -math.inf
    config_text: str = ""


def state_tensors(st: TrainState) -> dict[str, np.ndarray]:
    t: dict[str, np.ndarray] = {}
    for k, v in st.network.parameters().items():
        t[f"param/{k}"] = v
        t[f"adam.m/{k}"] = st.optimizer.m[k]
        t[f"adam.v/{k}"] = st.optimizer.v[k]
    for k, v in st.network.buffers().items():
        t[f"buffer/{k}"] = v
    t["adam.step"] = np.array([st.optimizer.step_count], dtype=np.int64)
    t["rng"] = np.array(st.rng.state(), dtype=np.uint64)
    t["epoch"] = np.array([st.epoch], dtype=np.int64)
    t["best_metric"] = np.array([st.best_metric], dtype=np.float64)
    for g, sch in st.schedules.items():
        t[f"schedule/{g}"] = np.array(sch.state(), dtype=np.float64)
    t["config"] = np.frombuffer(st.config_text.encode("utf-8"), dtype=np.uint8)
    return t


def save_checkpoint(path, st: TrainState) -> None:
    Path(path).write_bytes(encode_tensors(state_tensors(st)))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def checkpoint_config_text(tensors) -> str:
    return bytes(tensors["config"]).decode("utf-8")


def restore_state(tensors: dict[str, np.ndarray], st: TrainState) -> None:
    """Copy checkpoint contents into ``st`` in place; shapes must match exactly."""
    targets = {}
    for k, v in st.network.parameters().items():
        targets[f"param/{k}"] = v
        targets[f"adam.m/{k}"] = st.optimizer.m[k]
        targets[f"adam.v/{k}"] = st.optimizer.v[k]
    for k, v in st.network.buffers().items():
        targets[f"buffer/{k}"] = v
    # validate everything before touching anything
    for k, v in targets.items():
        if k not in tensors:
            raise FormatError(f"checkpoint lacks tensor {k!r}", 0)
        if tensors[k].shape != v.shape or tensors[k].dtype != v.dtype:
            raise ShapeError(f"{k}: checkpoint has {tensors[k].dtype}{tensors[k].shape}, model has {v.dtype}{v.shape}")
    for k, v in targets.items():
        v[...] = tensors[k]
    st.optimizer.step_count = int(tensors["adam.step"][0])
    seed, stream, counter = (int(x) for x in tensors["rng"])
    st.rng = Rng(seed, stream, counter)
    st.epoch = int(tensors["epoch"][0])
    st.best_metric = float(tensors["best_metric"][0])
    for g, sch in st.schedules.items():
        if f"schedule/{g}" in tensors:
            sch.load(tensors[f"schedule/{g}"])
    st.config_text = checkpoint_config_text(tensors)


def load_network_from_checkpoint(path) -> tuple[Network, RunConfig, dict]:
    from .config import parse_config

    tensors = read_checkpoint(path)
    cfg = parse_config(checkpoint_config_text(tensors))
    meta = {"epoch": int(tensors["epoch"][0]), "best_metric": float(tensors["best_metric"][0])}
    shapes = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    n_in = shapes["layer0.proj.weight"].shape[1]
    n_classes = shapes["readout.weight"].shape[0]
    net = build_network(cfg, n_in, n_classes)
    st = TrainState(net, Adam(net.parameters()), {}, Rng(cfg.seed))
    restore_state(tensors, st)
    return net, cfg, meta


# ---------------------------------------------------------------------------
# training loop


def build_network(cfg: RunConfig, n_in: int, n_classes: int, dtype=None) -> Network:
    n = cfg.neuron
    init = NeuronInit(n.lambda_min, n.lambda_max, n.dt0, n.a_min, n.a_max, n.b_min, n.b_max, n.dt_min, n.dt_max, n.rf_dt)
    s = cfg.surrogate
    spike = SpikeConfig(s.spike_mode, SurrogateSpec("boxcar", s.width, s.scale), s.detach_reset)
    return Network(
        n_in,
        n_classes,
        model=cfg.model,
        hidden=cfg.hidden,
        layers=cfg.layers,
        dropout=cfg.dropout,
        max_delay=cfg.delays.max_delay if cfg.delays.enabled else None,
        neuron_init=init,
        seed=cfg.seed,
        dtype=dtype or np.dtype(cfg.dtype),
        spike=spike,
        random_init_state=n.random_init_state,
    )


def load_datasets(cfg: RunConfig) -> dict[str, SpikeTensor]:
    d = cfg.data
    if d.source == "synthetic":
        spec = SynthTaskSpec(d.classes, d.channels, d.timesteps, d.template_rate, d.jitter, d.drop, d.samples_per_class, cfg.seed)
        return gen_synthetic(spec)
    return {split: load_spkt(getattr(d, split)) for split in ("train", "val", "test")}


def check_datasets(ds: dict[str, SpikeTensor]) -> tuple[int, int]:
    channels = {t.channels for t in ds.values()}
    if len(channels) != 1:
        raise ConfigError(f"splits disagree on channel count: {sorted(channels)}", "data")
    if len(ds["train"]) == 0:
        raise ConfigError("training split is empty", "data")
    n_classes = max(t.n_classes for t in ds.values())
    return channels.pop(), n_classes


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    sparsity: float
    sops: float
    trace: RunTrace
    predictions: np.ndarray


def evaluate(net: Network, data: SpikeTensor, batch: int = 256, delay_enabled: bool = False,
             dense_input_macs: bool = False) -> EvalResult:
    """Eval-mode pass: zero initial states, running BN statistics, no dropout."""
    trace = RunTrace()
    losses, preds = [], []
    for x, y in iterate_batches(data, batch):
        res = forward(net, x, "eval", y)
        losses.append(res.loss * len(y))
        preds.append(res.predictions)
        trace.merge(res.trace)
    preds = np.concatenate(preds) if preds else np.zeros(0, np.int64)
    n = max(len(data), 1)
    return EvalResult(
        float(np.sum(losses) / n),
        float(np.mean(preds == data.labels)) if len(data) else 0.0,
        sparsity(trace),
        count_sops(trace, delay_enabled, dense_input_macs),
        trace,
        preds,
    )


def _record(epoch, split, loss, acc, spars, sops, lrs) -> dict:
    return {
        "epoch": epoch,
        "split": split,
        "loss": round(float(loss), 12),
        "accuracy": round(float(acc), 12),
        "sparsity": round(float(spars), 12),
        "sops": round(float(sops), 6),
        "lr_weights": lrs["weights"],
        "lr_delays": lrs.get("delays"),
    }


def make_train_state(cfg: RunConfig, n_in: int, n_classes: int) -> TrainState:
    net = build_network(cfg, n_in, n_classes)
    o = cfg.optimizer
    opt = Adam(net.parameters(), (o.beta1, o.beta2), o.eps)
    schedules = {"weights": make_schedule(cfg.weight_schedule, o.lr, cfg.epochs, o.patience, o.factor, o.max_lr_mult)}
    if cfg.delays.enabled:
        schedules["delays"] = make_schedule(o.schedule_delays, o.lr_delays, cfg.epochs, o.patience, o.factor, o.max_lr_mult)
    return TrainState(net, opt, schedules, Rng(cfg.seed).spawn("train"), config_text=cfg.source_text)


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_checkpoint: Path | None = None
    state: TrainState | None = None
    seconds: float = 0.0


def train(cfg: RunConfig, datasets: dict[str, SpikeTensor] | None = None, out_dir=None, log_path=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs; keep the best-validation checkpoint.

    Writes ``best.slck`` and ``last.slck`` into ``out_dir`` (when given) and
    appends one JSON line per record to ``log_path``. With zero epochs only
    the initial evaluation is logged and no checkpoint is written.
    """
    t0 = time.perf_counter()
    ds = datasets if datasets is not None else load_datasets(cfg)
    n_in, n_classes = check_datasets(ds)
    st = make_train_state(cfg, n_in, n_classes)
    net = st.network
    delays = cfg.delays.enabled
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    logfh = open(log_path, "w") if log_path else None
    result = TrainResult(state=st)

    def emit(rec):
        result.log.append(rec)
        if logfh:
            logfh.write(json.dumps(rec, sort_keys=True) + "\n")
            logfh.flush()

    def lrs():
        return {g: s.lr for g, s in st.schedules.items()}

    mult = cfg.optimizer.neuron_lr_mult

    def lr_for(name):
        group = net.param_group(name)
        if group == "delays":
            return st.schedules["delays"].lr
        base = st.schedules["weights"].lr
        return base * mult if group == "neuron" else base

    try:
        if delays:
            net.set_sigma(sigma_schedule(0, max(cfg.epochs, 4), cfg.delays.max_delay))
        ev = evaluate(net, ds["val"], cfg.eval.batch, delays)
        emit(_record(0, "init", ev.loss, ev.accuracy, ev.sparsity, ev.sops, lrs()))
        for epoch in range(1, cfg.epochs + 1):
            if delays:
                net.set_sigma(sigma_schedule(epoch - 1, cfg.epochs, cfg.delays.max_delay))
            shuffle = st.rng.spawn(epoch)
            trace = RunTrace()
            tot_loss, correct, seen = 0.0, 0, 0
            for x, y in iterate_batches(ds["train"], cfg.batch, shuffle):
                if len(y) < 2:
                    continue
                res = forward(net, x, "train", y, cfg.optimizer.loss, shuffle)
                grads = backward(res.tape)
                st.optimizer.step(grads, lr_for)
                tot_loss += res.loss * len(y)
                correct += int(np.sum(res.predictions == y))
                seen += len(y)
                trace.merge(res.trace)
            st.epoch = epoch
            cur = lrs()
            emit(_record(epoch, "train", tot_loss / max(seen, 1), correct / max(seen, 1), sparsity(trace),
                         count_sops(trace, delays), cur))
            ev = evaluate(net, ds["val"], cfg.eval.batch, delays)
            emit(_record(epoch, "val", ev.loss, ev.accuracy, ev.sparsity, ev.sops, cur))
            for sch in st.schedules.values():
                sch.end_epoch(epoch - 1, ev.accuracy)
            if ev.accuracy > st.best_metric:
                st.best_metric = ev.accuracy
                if out is not None:
                    save_checkpoint(out / "best.slck", st)
                    result.best_checkpoint = out / "best.slck"
            log.info("epoch %d train_loss %.4f val_acc %.4f", epoch, tot_loss / max(seen, 1), ev.accuracy)
        if out is not None and cfg.epochs > 0:
            save_checkpoint(out / "last.slck", st)
    finally:
        if logfh:
            logfh.close()
    result.seconds = time.perf_counter() - t0
    return result
