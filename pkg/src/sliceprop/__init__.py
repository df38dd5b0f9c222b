"""Universal automatic/interactive volumetric segmentation via cluster-center propagation."""

__version__ = "0.1.0"
