"""Eigenvalue spectra, regime labels, SOP and sparsity profiling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .network import AdLifLayer, CSiLifLayer, LayerActivity, Network, RfLayer, RunTrace, SiLifLayer
from .neurons import AdLifParams, CSiLifParams, RfParams, SiLifParams, csilif_alpha, silif_decays
from .numerics import eig_2x2_arrays

RESONATOR = "Resonator"
INTEGRATOR = "Integrator"


# ---------------------------------------------------------------------------
# spectra


@dataclass
class SpectrumReport:
    """Eigenvalues per neuron: ``(n, 2)`` for two-state models, ``(n, 1)`` for complex scalars."""

    model: str
    layer: int
    eigenvalues: np.ndarray
    regimes: list[str] = field(default_factory=list)

    @property
    def flat(self) -> np.ndarray:
        return self.eigenvalues.ravel()

    @property
    def n_complex(self) -> int:
        return int(np.sum(np.any(self.eigenvalues.imag != 0, axis=1)))

    @property
    def n_real(self) -> int:
        return len(self.eigenvalues) - self.n_complex

    def magnitude_histogram(self, bins: int = 20, upper: float = 1.2):
        return np.histogram(np.abs(self.flat), bins=bins, range=(0.0, upper))

    def summary(self) -> dict:
        mags = np.abs(self.flat)
        counts, edges = self.magnitude_histogram()
        return {
            "model": self.model,
            "layer": self.layer,
            "neurons": len(self.eigenvalues),
            "complex_pairs": self.n_complex,
            "real_pairs": self.n_real,
            "max_magnitude": float(mags.max()) if mags.size else 0.0,
            "hist_counts": counts.tolist(),
            "hist_edges": edges.tolist(),
        }


def regime_discriminant(alpha, beta, a):
    return (np.asarray(alpha) - beta) ** 2 + 4.0 * np.asarray(a) * (np.asarray(alpha) - 1.0)


def classify_regime(alpha, beta, a):
    """``Resonator`` when the coupled transition has complex eigenvalues, else ``Integrator``.

    Scalars return a string, arrays return an array of strings.
    """
    disc = regime_discriminant(alpha, beta, a)
    out = np.where(disc < 0, RESONATOR, INTEGRATOR)
    return str(out) if out.ndim == 0 else out


def _two_state_eigs(alpha, beta, a):
    # coupled form [[alpha, alpha - 1], [a, beta]]
    l1, l2 = eig_2x2_arrays(alpha, alpha - 1.0, a, beta)
    return np.stack([np.atleast_1d(l1), np.atleast_1d(l2)], axis=1)


def spectrum(model, layer: int = 0) -> SpectrumReport:
    """Transition eigenvalues for a neuron layer or parameter container."""
    if isinstance(model, (SiLifLayer, CSiLifLayer, AdLifLayer, RfLayer)):
        model = model.params
    if isinstance(model, SiLifParams):
        alpha, beta = silif_decays(model)
        a = model.clamped_a()
        alpha, beta, a = np.broadcast_arrays(alpha, beta, a)
        return SpectrumReport("silif", layer, _two_state_eigs(alpha, beta, a), list(np.atleast_1d(classify_regime(alpha, beta, a))))
    if isinstance(model, AdLifParams):
        alpha, beta, a, _ = model.clamped()
        alpha, beta, a = np.broadcast_arrays(alpha, beta, a)
        return SpectrumReport("adlif", layer, _two_state_eigs(alpha, beta, a), list(np.atleast_1d(classify_regime(alpha, beta, a))))
    if isinstance(model, CSiLifParams):
        lam = np.atleast_1d(csilif_alpha(model)).astype(np.complex128)
        return SpectrumReport("csilif", layer, lam[:, None], [RESONATOR if z.imag != 0 else INTEGRATOR for z in lam])
    if isinstance(model, RfParams):
        lam = np.atleast_1d(1.0 + model.dt * (np.asarray(model.alpha_real) + 1j * np.asarray(model.alpha_img)))
        return SpectrumReport("rf", layer, lam[:, None], [RESONATOR if z.imag != 0 else INTEGRATOR for z in lam])
    raise TypeError(f"cannot take the spectrum of {type(model).__name__}")


def network_spectra(net: Network) -> list[SpectrumReport]:
    return [spectrum(layer, i) for i, layer in enumerate(net.neuron_layers())]


def write_eigen_pairs(path, reports) -> None:
    """Two-column ``re im`` text file, one eigenvalue per line (plot-ready)."""
    with open(path, "w") as fh:
        for rep in reports:
            for z in rep.flat:
                fh.write(f"{z.real:.17g} {z.imag:.17g}\n")


# ---------------------------------------------------------------------------
# SOPs and sparsity


def count_sops(trace: RunTrace, delay_enabled: bool = False, dense_input_macs: bool = False) -> float:
    """Synaptic operations per sample.

    Each nonzero activity reaching a weight matrix costs one operation per
    target neuron. With ``dense_input_macs`` every input entry counts, as a
    dense multiply-accumulate would. Delays double the total.
    """
    total = 0
    samples = 0
    for l in trace.layers:
        events = l.neurons * l.timesteps * l.samples if (dense_input_macs and not l.spiking) else l.nonzero
        total += events * l.fan_out
        samples = max(samples, l.samples)
    if samples == 0:
        return 0.0
    return (2 if delay_enabled else 1) * total / samples


def recount_sops(activities, fan_outs, delay_enabled: bool = False) -> float:
    """Reference count straight from raw activity tensors, one event at a time."""
    total = 0
    samples = 0
    for act, fan_out in zip(activities, fan_outs):
        act = np.asarray(act)
        samples = max(samples, act.shape[0])
        for b in range(act.shape[0]):
            for t in range(act.shape[1]):
                for n in range(act.shape[2]):
                    if act[b, t, n] != 0:
                        total += fan_out
    if samples == 0:
        return 0.0
    return (2 if delay_enabled else 1) * total / samples


def layer_sparsity(l: LayerActivity) -> float:
    slots = l.neurons * l.timesteps * l.samples
    return 1.0 if slots == 0 else 1.0 - l.nonzero / slots


def sparsity(trace: RunTrace) -> float:
    """Fraction of silent neuron-timesteps, averaged over spiking layers."""
    vals = [layer_sparsity(l) for l in trace.layers if l.spiking]
    return float(np.mean(vals)) if vals else 1.0


def sparsity_breakdown(trace: RunTrace) -> dict[str, float]:
    return {l.name: layer_sparsity(l) for l in trace.layers if l.spiking}


# ---------------------------------------------------------------------------
# Event-SSM closed form


@dataclass(frozen=True)
class EventSsmSops:
    block1: float
    block2: float

    @property
    def total(self) -> float:
        return self.block1 + self.block2


def eventssm_sops(
    state_size: int,
    events_block1: float,
    events_block2: float,
    ssm_count_block2: int = 3,
    dense_count_block2: int = 2,
) -> EventSsmSops:
    """Per-sample SOPs of a two-block event-driven SSM.

    The first block is one SSM (two ``state x state`` matrices per event); the
    second has ``dense`` projections plus ``ssm`` SSMs of two matrices each.
    Event counts are per-sample averages and may be fractional.
    """
    for name, v in (("state_size", state_size), ("events_block1", events_block1), ("events_block2", events_block2)):
        if v < 0:
            raise ValueError(f"{name} must be non-negative, got {v}")
    s2 = state_size * state_size
    block1 = events_block1 * 2 * s2
    block2 = events_block2 * (dense_count_block2 + 2 * ssm_count_block2) * s2
    return EventSsmSops(block1, block2)


def format_millions(x: float) -> str:
    return f"{x / 1e6:.1f}M"


def activity_report(trace: RunTrace, delay_enabled: bool = False) -> dict:
    return {
        "sops": count_sops(trace, delay_enabled),
        "sparsity": sparsity(trace),
        "layers": [
            {"name": l.name, "nonzero": l.nonzero, "fan_out": l.fan_out, "spiking": l.spiking, "sparsity": layer_sparsity(l)}
            for l in trace.layers
        ],
    }


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
