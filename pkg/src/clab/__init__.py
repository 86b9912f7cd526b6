"""Complex geometric optics, Calderon data and wall potentials on a periodic lab grid."""

__version__ = "0.1.0"
