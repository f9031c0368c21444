"""Hybrid vortex dynamics: reduced point-vortex laws coupled to a harmonic
boundary correction, with a multilevel-preconditioned linear solver, a
classical emulator of the Schrödingerized solve, a nonlinear Schrödinger
reference solver and a 3D filament model."""

__version__ = "0.1.0"

from .grid2d import ComplexField2D, Grid2D, Scaling  # noqa: E402
from .vortex import GL_FREE, NLS_M1, LawKind, MotionLaw, VortexConfig  # noqa: E402

__all__ = [
    "ComplexField2D",
    "GL_FREE",
    "Grid2D",
    "LawKind",
    "MotionLaw",
    "NLS_M1",
    "Scaling",
    "VortexConfig",
    "__version__",
]
