"""Theta-method MINI finite-element solver for the incompressible
Navier-Stokes equations on the periodic box, with energy and local-energy
diagnostics."""
from .errors import ConfigurationError, SolverError
from .flows import RandomDivergenceFree, TaylorGreen
from .mesh import PeriodicMesh, build_periodic_mesh
from .operators import AssembledForms, assemble_forms
from .spaces import Field, PressureSpace, VelocitySpace
from .stepper import SchemeConfig, SnapshotSequence, build_forms, run_scheme, theta_step

__all__ = [
    "AssembledForms", "ConfigurationError", "Field", "PeriodicMesh", "PressureSpace",
    "RandomDivergenceFree", "SchemeConfig", "SnapshotSequence", "SolverError", "TaylorGreen",
    "VelocitySpace", "assemble_forms", "build_forms", "build_periodic_mesh", "run_scheme",
    "theta_step",
]
__version__ = "0.1.0"
