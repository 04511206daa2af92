"""Isogeometric solver for the Westervelt equation with acoustic-lens shape optimization.

The package simulates focused ultrasound through a two-material lens/fluid
domain discretized with multipatch NURBS, computes adjoint-based shape
sensitivities of a pressure-tracking cost, and runs a gradient-descent loop
that reshapes the lens boundary toward a target pressure distribution.
"""

__version__ = "0.1.0"
