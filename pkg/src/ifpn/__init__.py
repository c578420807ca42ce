"""Implicit feature-pyramid equilibrium networks in numpy.

The pyramid update P <- G(P + B) is solved to its fixed point P* with
Picard iteration, weight-tied unrolling or limited-memory Broyden, and
gradients flow through the equilibrium by implicit differentiation.
"""
from .autodiff import GradBundle, ParamSet
from .implicit import adjoint_solve, implicit_grads, unrolled_grads
from .solver import SolverConfig, SolverReport, broyden_solve, picard_solve, solve, unroll_solve
from .tensor_core import FeaturePyramid, ShapeError, pack, unpack
from .transform import PyramidTransform, TransformConfig, apply, init_params, make_transform, vjp_transform

__version__ = "0.1.0"

__all__ = [
    "FeaturePyramid", "GradBundle", "ParamSet", "PyramidTransform", "ShapeError", "SolverConfig",
    "SolverReport", "TransformConfig", "adjoint_solve", "apply", "broyden_solve", "implicit_grads",
    "init_params", "make_transform", "pack", "picard_solve", "solve", "unpack", "unroll_solve",
    "unrolled_grads", "vjp_transform",
]
