"""Frequency-guided, coarse-to-fine conditional diffusion for synthesizing
missing image modalities, at desk scale on synthetic phantoms."""

__version__ = "0.1.0"
