"""Conditional diffusion distillation on a desk-scale, fully checkable stack."""

__version__ = "0.1.0"
