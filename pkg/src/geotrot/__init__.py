"""geotrot: geometric variational MPC, gait library, and trot simulator."""

__version__ = "0.1.0"
