"""Offset-free MPC for neural NARX models with a water-heating benchmark."""

__version__ = "0.1.0"
