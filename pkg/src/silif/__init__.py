"""Spiking neurons with state-space parametrization, trained by surrogate-gradient BPTT."""
