"""Structured-sparse neural network accelerator: compiler, simulator and cost model."""

__version__ = "0.1.0"
