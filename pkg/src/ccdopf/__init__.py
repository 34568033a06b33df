"""Radial feeder OPF with inverter policies and chance-constrained consensus ADMM."""

__version__ = "0.1.0"
