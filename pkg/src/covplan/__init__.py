"""Joint trajectory and camera planning for 3D surface coverage."""

__version__ = "0.1.0"
