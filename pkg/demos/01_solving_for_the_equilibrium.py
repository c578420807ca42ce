"""Solving P* = G(P* + B) three ways.

A freshly initialised pyramid transform is contractive, so plain repeated
application converges. Broyden's method gets there in fewer map
evaluations, and a fixed number of unrolled steps stops wherever it stops.
"""
import numpy as np

from ifpn import FeaturePyramid, SolverConfig, TransformConfig, make_transform, solve

G = make_transform(TransformConfig(levels=3, channels=4, variant="res_pyramid_conv"), seed=0)
B = FeaturePyramid.random(np.random.default_rng(1), 1, 4, 32, 32, 3)
print("pyramid shapes:", B.shapes)

for cfg in (SolverConfig(method="picard", max_iters=100),
            SolverConfig(method="broyden"),
            SolverConfig(method="unroll", unroll_steps=2)):
    P, report = solve(G, B, cfg)
    hist = ", ".join(f"{r:.1e}" for r in report.residual_history[1:8])
    print(f"{cfg.label():>10}: {report.iterations_used:3d} iterations, "
          f"final relative residual {report.final_rel_residual:.2e}  [{hist}{', ...' if report.iterations_used > 7 else ''}]")

# the returned residual is a certificate: recompute it from scratch
P, report = solve(G, B, SolverConfig())
recomputed = (G(P + B) - P).norm() / P.norm()
print("reported", report.final_rel_residual, "recomputed", recomputed)

# any starting point leads to the same equilibrium
P2, _ = solve(G, B, SolverConfig(), P0=FeaturePyramid.random(np.random.default_rng(7), 1, 4, 32, 32, 3))
print("distance between solutions from two starts:", (P - P2).norm() / P.norm())
