"""Polarimetric cloud tomography from a simulated small-satellite formation.

Single-scattering vector rendering, a polarization-camera sensor model,
parametric initialization and preconditioned gradient-descent retrieval of
liquid water content and effective radius on a voxel grid.
"""

__version__ = "0.1.0"
