"""Insensitizing controls for stochastic parabolic equations with dynamic boundary conditions."""

from .mesh import BulkSurfaceField, Mesh, build_annulus_mesh, build_interval_mesh
from .tree import AdaptedField, NoiseTree, build_tree
from .solvers import Potentials, duality_pairing, solve_backward, solve_forward
from .cascade import ControlTriple, ProblemSpec, phi, phi_tau_derivative, solve_adjoint, solve_cascade
from .hum import HumConfig, HumResult, gramian_apply, solve_hum, verify_insensitization

__all__ = [
    "AdaptedField",
    "BulkSurfaceField",
    "ControlTriple",
    "HumConfig",
    "HumResult",
    "Mesh",
    "NoiseTree",
    "Potentials",
    "ProblemSpec",
    "build_annulus_mesh",
    "build_interval_mesh",
    "build_tree",
    "duality_pairing",
    "gramian_apply",
    "phi",
    "phi_tau_derivative",
    "solve_adjoint",
    "solve_backward",
    "solve_cascade",
    "solve_forward",
    "solve_hum",
    "verify_insensitization",
]
