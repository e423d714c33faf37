"""Framework-free flow-matching generator for small 3D molecules."""

__version__ = "0.1.0"
