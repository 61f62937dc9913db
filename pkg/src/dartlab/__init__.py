"""Adversarially robust domain adaptation on small MLPs with a hand-written autodiff engine."""

__version__ = "0.1.0"
