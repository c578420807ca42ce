"""Gradients of a loss on P* without storing the solver's iterations.

The adjoint u = J^T u + g is itself a fixed point, solved with VJPs only.
We compare against backpropagation through 50 unrolled steps and against
finite differences of the re-solved loss.
"""
import numpy as np

from ifpn import (FeaturePyramid, SolverConfig, TransformConfig, implicit_grads, make_transform, solve,
                  unrolled_grads)
from ifpn.harness.gradcheck import GradcheckConfig, gradcheck

G = make_transform(TransformConfig(levels=3, channels=4, variant="dense_fpn"), seed=2)
rng = np.random.default_rng(3)
B = FeaturePyramid.random(rng, 1, 4, 8, 8, 3)
g = FeaturePyramid.random(rng, 1, 4, 8, 8, 3)   # dL/dP* for L = <g, P*>

cfg = SolverConfig(tol=1e-10, max_iters=200)
P, _ = solve(G, B, cfg)
implicit, state = implicit_grads(G, P, B, g, cfg, return_state=True)
unrolled = unrolled_grads(G, B, T=50, g=g)
print("adjoint iterations:", state.report.iterations_used)

a, b = implicit.d_theta.flat().data, unrolled.d_theta.flat().data
print("cosine(implicit, unrolled):", a @ b / np.linalg.norm(a) / np.linalg.norm(b))
print("relative L2 difference    :", np.linalg.norm(a - b) / np.linalg.norm(b))

# a tiny instance small enough to difference every coordinate
report = gradcheck(GradcheckConfig(), suites=("implicit", "unrolled"))
print(report.format())
