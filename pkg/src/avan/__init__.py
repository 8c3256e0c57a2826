"""Cleft-conditioned synaptic partner assignment on synthetic EM volumes."""

__version__ = "0.1.0"
