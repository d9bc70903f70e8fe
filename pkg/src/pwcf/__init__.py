"""Penalty-SQP solver with constraint folding, plus desk-scale robustness evaluation."""

__version__ = "0.1.0"
