"""Masked volumetric pre-training: masked encoders, a voxel feature volume and
an SDF volume renderer trained against synthetic analytic scenes."""

__version__ = "0.1.0"
