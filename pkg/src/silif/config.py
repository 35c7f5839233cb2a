"""Run configuration: TOML text with top-level keys and fixed sections.

Grammar: standard TOML restricted to scalars (string, integer, float,
boolean) and arrays of strings. Top-level keys describe the model and run,
and the sections ``[neuron]``, ``[delays]``, ``[optimizer]``, ``[data]``,
``[surrogate]`` and ``[eval]`` hold the rest. Every key is optional; unknown
keys and out-of-range values are rejected with the offending key and line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

from .errors import ConfigError


def _opt(default, doc, *, choices=None, lo=None, hi=None, lo_open=False, hi_open=False):
    meta = {"doc": doc, "choices": choices, "lo": lo, "hi": hi, "lo_open": lo_open, "hi_open": hi_open}
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class NeuronConfig:
    lambda_min: float = _opt(1 / 25, "lower bound of the continuous decay rates, log-uniform init", lo=0, lo_open=True)
    lambda_max: float = _opt(1 / 5, "upper bound of the continuous decay rates", lo=0, lo_open=True)
    dt0: float = _opt(1.0, "initial timestep of the two-state model", lo=0, lo_open=True)
    a_min: float = _opt(0.0, "coupling init lower bound and clamp")
    a_max: float = _opt(1.0, "coupling init upper bound and clamp")
    b_min: float = _opt(0.0, "spike adaptation init lower bound and clamp")
    b_max: float = _opt(2.0, "spike adaptation init upper bound and clamp")
    dt_min: float = _opt(0.01, "complex model: smallest initial timestep", lo=0, lo_open=True)
    dt_max: float = _opt(0.5, "complex model: largest initial timestep", lo=0, lo_open=True)
    rf_dt: float = _opt(0.1, "resonate-and-fire Euler step", lo=0, lo_open=True)
    random_init_state: bool = _opt(True, "draw initial states from U(0, 1) in training (always zero in eval)")


@dataclass
class DelayConfig:
    enabled: bool = _opt(False, "learnable Gaussian synaptic delays in every hidden projection")
    max_delay: int = _opt(11, "longest delay in timesteps", lo=1)


@dataclass
class OptimizerConfig:
    lr: float = _opt(1e-3, "base learning rate for weights and neuron parameters", lo=0, lo_open=True)
    lr_delays: float = _opt(0.1, "base learning rate for delays", lo=0, lo_open=True)
    schedule: str = _opt("auto", "weights schedule; auto = plateau, or one_cycle with delays",
                         choices=("auto", "plateau", "one_cycle", "cosine", "none"))
    schedule_delays: str = _opt("cosine", "delay schedule", choices=("plateau", "one_cycle", "cosine", "none"))
    patience: int = _opt(5, "plateau: stagnant epochs tolerated before a reduction", lo=0)
    factor: float = _opt(0.7, "plateau: multiplicative reduction", lo=0, hi=1, lo_open=True, hi_open=True)
    max_lr_mult: float = _opt(5.0, "one-cycle: peak learning rate as a multiple of the base", lo=1)
    neuron_lr_mult: float = _opt(1.0, "learning-rate multiplier for neuron parameters", lo=0, lo_open=True)
    beta1: float = _opt(0.9, "Adam first-moment decay", lo=0, hi=1, hi_open=True)
    beta2: float = _opt(0.999, "Adam second-moment decay", lo=0, hi=1, hi_open=True)
    eps: float = _opt(1e-8, "Adam denominator offset", lo=0, lo_open=True)
    loss: str = _opt("cross_entropy", "training loss", choices=("cross_entropy", "quadratic"))


@dataclass
class DataConfig:
    source: str = _opt("synthetic", "synthetic task or SPKT files", choices=("synthetic", "files"))
    train: str = _opt("", "SPKT path of the training split (source = files)")
    val: str = _opt("", "SPKT path of the validation split")
    test: str = _opt("", "SPKT path of the test split")
    classes: int = _opt(10, "synthetic: number of classes", lo=1)
    channels: int = _opt(64, "synthetic: input channels", lo=1)
    timesteps: int = _opt(100, "synthetic: sequence length", lo=2)
    template_rate: float = _opt(0.05, "synthetic: spike probability per template cell", lo=0, hi=1)
    jitter: int = _opt(2, "synthetic: max temporal jitter in steps", lo=0)
    drop: float = _opt(0.2, "synthetic: per-spike deletion probability", lo=0, hi=1)
    samples_per_class: int = _opt(200, "synthetic: samples generated per class", lo=3)


@dataclass
class SurrogateConfig:
    width: float = _opt(0.5, "boxcar half-width around the threshold", lo=0, lo_open=True)
    scale: float = _opt(0.5, "boxcar height", lo=0, lo_open=True)
    detach_reset: bool = _opt(False, "block gradients through the reset and spike adaptation")
    spike_mode: str = _opt("heaviside", "heaviside spikes, relaxed ramp, or linear (no spikes)",
                           choices=("heaviside", "relaxed", "linear"))


@dataclass
class EvalConfig:
    split: str = _opt("test", "split evaluated by the eval command", choices=("train", "val", "test"))
    dense_input_macs: bool = _opt(False, "count every input entry as an operation, not only nonzeros")
    batch: int = _opt(256, "evaluation batch size", lo=1)
    # gradcheck
    probes_per_tensor: int = _opt(2, "gradcheck: largest-gradient entries probed per tensor", lo=1)
    fd_step: float = _opt(1e-6, "gradcheck: central-difference step", lo=0, lo_open=True)
    gradcheck_samples: int = _opt(8, "gradcheck: batch size drawn from the training split", lo=2)
    gradcheck_timesteps: int = _opt(30, "gradcheck: leading timesteps kept", lo=2)
    gradcheck_params: list = _opt([], "gradcheck: substrings selecting parameters (empty = all)")


SECTIONS = {
    "neuron": NeuronConfig,
    "delays": DelayConfig,
    "optimizer": OptimizerConfig,
    "data": DataConfig,
    "surrogate": SurrogateConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    model: str = _opt("silif", "neuron model", choices=("silif", "csilif", "adlif", "cadlif", "rf"))
    layers: int = _opt(2, "number of hidden spiking layers", lo=1)
    hidden: int = _opt(512, "neurons per hidden layer", lo=1)
    dropout: float = _opt(0.1, "dropout rate after each spiking layer", lo=0, hi=1, hi_open=True)
    seed: int = _opt(0, "master seed; every random stream derives from it", lo=0)
    epochs: int = _opt(100, "training epochs", lo=0)
    batch: int = _opt(128, "training batch size", lo=1)
    dtype: str = _opt("float32", "training precision (gradcheck always uses float64)", choices=("float32", "float64"))
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    delays: DelayConfig = field(default_factory=DelayConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    source_text: str = field(default="", repr=False, compare=False)

    @property
    def weight_schedule(self) -> str:
        s = self.optimizer.schedule
        if s == "auto":
            return "one_cycle" if self.delays.enabled else "plateau"
        return s


_KEY_LINE = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")
_SECTION_LINE = re.compile(r"^\s*\[\s*([A-Za-z0-9_\-]+)\s*\]")


def _line_map(text: str) -> dict[str, int]:
    lines: dict[str, int] = {}
    section = ""
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION_LINE.match(line)
        if m:
            section = m.group(1)
            lines.setdefault(section, no)
            continue
        m = _KEY_LINE.match(line)
        if m:
            key = f"{section}.{m.group(1)}" if section else m.group(1)
            lines.setdefault(key, no)
    return lines


def _coerce(key, value, f, line):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key, line)
    elif kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key, line)
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key, line)
        value = float(value)
    elif kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key, line)
    elif kind == "list":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"expected an array of strings, got {value!r}", key, line)
    m = f.metadata
    if m.get("choices") and value not in m["choices"]:
        raise ConfigError(f"must be one of {', '.join(m['choices'])}; got {value!r}", key, line)
    lo, hi = m.get("lo"), m.get("hi")
    if lo is not None and (value < lo or (m["lo_open"] and value == lo)):
        raise ConfigError(f"must be {'>' if m['lo_open'] else '>='} {lo}; got {value}", key, line)
    if hi is not None and (value > hi or (m["hi_open"] and value == hi)):
        raise ConfigError(f"must be {'<' if m['hi_open'] else '<='} {hi}; got {value}", key, line)
    return value


def _fill(cls, table: dict, prefix: str, lines: dict):
    known = {f.name: f for f in fields(cls) if f.name != "source_text"}
    kwargs = {}
    for key, value in table.items():
        full = f"{prefix}.{key}" if prefix else key
        line = lines.get(full)
        if key not in known or (not prefix and key in SECTIONS and not isinstance(value, dict)):
            raise ConfigError("unknown key", full, line)
        if not prefix and key in SECTIONS:
            kwargs[key] = _fill(SECTIONS[key], value, key, lines)
        else:
            if isinstance(value, dict):
                raise ConfigError("unexpected table", full, line)
            kwargs[key] = _coerce(full, value, known[key], line)
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    """Parse and validate config text; missing keys take their defaults."""
    try:
        table = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        m = re.search(r"line (\d+)", str(exc))
        if line is None and m:
            line = int(m.group(1))
        raise ConfigError(f"syntax error: {exc}", None, line) from None
    lines = _line_map(text)
    cfg = _fill(RunConfig, table, "", lines)
    _cross_check(cfg, lines)
    cfg.source_text = text
    return cfg


def _cross_check(cfg: RunConfig, lines):
    n = cfg.neuron
    for lo, hi in (("lambda_min", "lambda_max"), ("a_min", "a_max"), ("b_min", "b_max"), ("dt_min", "dt_max")):
        if getattr(n, lo) > getattr(n, hi):
            raise ConfigError(f"{lo} exceeds {hi}", f"neuron.{lo}", lines.get(f"neuron.{lo}"))
    if cfg.data.source == "files":
        for split in ("train", "val", "test"):
            if not getattr(cfg.data, split):
                raise ConfigError("path required when source = files", f"data.{split}", lines.get("data.source"))
    if cfg.delays.enabled and cfg.epochs and cfg.epochs < 4:
        raise ConfigError("delay sigma annealing needs at least 4 epochs", "epochs", lines.get("epochs"))


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return repr(v)


def _emit(obj, out: list):
    for f in fields(obj):
        if f.name == "source_text" or f.name in SECTIONS and obj.__class__ is RunConfig:
            continue
        doc = f.metadata.get("doc", "")
        choices = f.metadata.get("choices")
        if choices:
            doc += f" ({' | '.join(choices)})"
        out.append(f"# {doc}")
        out.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")


def render_config(cfg: RunConfig) -> str:
    """TOML text that parses back to ``cfg``, with a comment per key."""
    out: list[str] = []
    _emit(cfg, out)
    for name in SECTIONS:
        out.append("")
        out.append(f"[{name}]")
        _emit(getattr(cfg, name), out)
    return "\n".join(out) + "\n"


def default_config_text() -> str:
    return render_config(RunConfig())

