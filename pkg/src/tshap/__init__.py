"""Temporally smoothed Shapley explanations for skeleton activity recognition."""

__version__ = "0.1.0"
