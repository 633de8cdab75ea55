"""LM-aware discriminative training of HAT transducers at desk scale."""

__version__ = "0.1.0"
