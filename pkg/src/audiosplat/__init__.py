"""Audio-conditioned 3D Gaussian splatting for dynamic head synthesis on CPU."""

__version__ = "0.1.0"
