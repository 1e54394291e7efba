"""Dynamic 3D Gaussian splatting with spatio-temporal decoupling masks."""
__version__ = "0.1.0"
