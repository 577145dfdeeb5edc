"""Zonal-aware self-supervised mesh network for anisotropic bpMRI."""
__version__ = "0.1.0"
