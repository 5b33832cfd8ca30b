"""Volumetric masked-autoencoder pretraining and downstream adaptation for multi-parametric MRI."""

__version__ = "0.1.0"
