"""Beneficial-perturbation feature augmentation attacks on toy face-embedding networks."""

__version__ = "0.1.0"
