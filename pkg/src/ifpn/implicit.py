"""Gradients through the equilibrium.

At P* = G(P* + B) the loss gradient is carried by the adjoint ``u`` solving
the linear fixed point ``u = J^T u + g`` with ``J = dG/dz`` at ``z = P* + B``
and ``g = dL/dP*``. One more vector-Jacobian product with ``u`` yields both
``dL/dtheta`` and ``dL/dB``. Only VJPs are needed; J is never formed.

``unrolled_grads`` backpropagates exactly through T weight-tied steps and is
the oracle the implicit route is checked against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GradBundle, ParamSet
from .solver import SolverConfig, SolverReport, broyden_fixed_point, picard_fixed_point, unroll_solve
from .tensor_core import FeaturePyramid, ShapeError, pack, unpack


@dataclass
class AdjointState:
    u: FeaturePyramid
    report: SolverReport

    @property
    def converged(self) -> bool:
        return self.report.converged

    @property
    def residual_history(self) -> list[float]:
        return self.report.residual_history


def _adjoint(trace, g: FeaturePyramid, cfg: SolverConfig) -> AdjointState:
    layout = g.layout()
    gv = pack(g).data

    def f(uv):
        return pack(trace.vjp(unpack(uv, layout), params=False)).data + gv

    u0 = np.zeros_like(gv)
    if cfg.method == "broyden":
        uv, rep = broyden_fixed_point(f, u0, cfg)
    else:
        uv, rep = picard_fixed_point(f, u0, cfg.tol, cfg.max_iters, cfg.divergence_factor)
    rep.method = "adjoint-" + rep.method
    return AdjointState(unpack(uv, layout), rep)


def adjoint_solve(G, P_star: FeaturePyramid, B: FeaturePyramid, g: FeaturePyramid,
                  cfg: SolverConfig | None = None, mask=None) -> AdjointState:
    """Solve u = J_G(P* + B)^T u + g matrix-free.

    Broyden is used when ``cfg.method == "broyden"``, plain fixed-point
    iteration otherwise.
    """
    cfg = cfg or SolverConfig()
    if not (P_star.shapes == B.shapes == g.shapes):
        raise ShapeError(f"layouts differ: P* {P_star.shapes}, B {B.shapes}, g {g.shapes}")
    return _adjoint(G.trace(P_star + B, mask), g, cfg)


def adjoint_residual(G, P_star, B, g, u, mask=None) -> float:
    """||u - J^T u - g|| / max(||u||, eps), computed from scratch."""
    r = u - G.trace(P_star + B, mask).vjp(u, params=False) - g
    return r.norm() / max(u.norm(), 1e-8)


def implicit_grads(G, P_star, B, g, cfg: SolverConfig | None = None, mask=None,
                   return_state: bool = False):
    cfg = cfg or SolverConfig()
    if not (P_star.shapes == B.shapes == g.shapes):
        raise ShapeError(f"layouts differ: P* {P_star.shapes}, B {B.shapes}, g {g.shapes}")
    trace = G.trace(P_star + B, mask)
    state = _adjoint(trace, g, cfg)
    grads = trace.vjp(state.u)
    return (grads, state) if return_state else grads


def backprop_traces(G, traces, g: FeaturePyramid, B: FeaturePyramid) -> GradBundle:
    """Chain rule backwards through recorded steps P_t = G(P_{t-1} + B)."""
    d_theta = G.params.zeros_like()
    d_B = B.zeros_like()
    u = g
    for tr in reversed(traces):
        step = tr.vjp(u)
        d_theta = d_theta + step.d_theta
        d_B = d_B + step.d_input
        u = step.d_input
    return GradBundle(d_theta, d_B)


def unrolled_grads(G, B, P0=None, T: int = 0, g: FeaturePyramid | None = None, mask=None) -> GradBundle:
    """Reverse-mode gradients through exactly T applications of G.

    With T = 0 the output is P0, which does not depend on B or theta, so
    both gradients are zero.
    """
    if g is None:
        raise ValueError("a cotangent g for the final iterate is required")
    if g.shapes != B.shapes:
        raise ShapeError(f"g layout {g.shapes} != B layout {B.shapes}")
    _, traces = unroll_solve(G, B, P0, T, mask, record=True)
    return backprop_traces(G, traces, g, B)


def flat_theta(grads: GradBundle | ParamSet) -> np.ndarray:
    p = grads.d_theta if isinstance(grads, GradBundle) else grads
    return p.flat().data
