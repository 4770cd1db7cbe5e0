"""
cellmix

Simulation and verification toolkit for dissipation enhancement by cellular flows:
the cutoff cellular velocity field, the advection-diffusion dynamics as an SDE and as a
pseudospectral PDE, the staged probabilistic coupling, and boundary-layer crossing clocks.
"""

__version__ = "1.0.0"
