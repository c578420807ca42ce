"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``; the summary
block at the end of any pytest session repeats the lines.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import AffineMap, criterion, flat, one_level
from ifpn.harness import checkpoint as ck
from ifpn.harness.bench import run_bench
from ifpn.harness.config import ExperimentConfig, OptimizerConfig
from ifpn.harness.data import make_splits
from ifpn.harness.gradcheck import GradcheckConfig, gradcheck
from ifpn.harness.train import evaluate, train
from ifpn.harness.trend import run_trend
from ifpn.implicit import flat_theta, implicit_grads, unrolled_grads
from ifpn.solver import SolverConfig, broyden_solve, solve
from ifpn.tensor_core import FeaturePyramid, pack
from ifpn.transform import VARIANTS, TransformConfig, apply, make_transform


# ---------------------------------------------------------------------------
# 1. affine fixed-point oracle
# ---------------------------------------------------------------------------

def test_criterion_1_affine_fixed_point_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_err, over, dims = 0.0, [], []
    for k in range(20):
        d = 1 + k % 8
        A = rng.standard_normal((d, d))
        A *= rng.uniform(0.1, 0.89) / np.abs(np.linalg.eigvals(A)).max()
        b = rng.standard_normal(d)
        cfg = SolverConfig(tol=1e-10, max_iters=60, memory=60)
        P, rep = broyden_solve(AffineMap(A, b), one_level(np.zeros(d)), cfg=cfg)
        exact = np.linalg.solve(np.eye(d) - A, b)
        worst_err = max(worst_err, np.linalg.norm(flat(P) - exact) / np.linalg.norm(exact))
        dims.append((d, rep.iterations_used))
        if rep.iterations_used > d + 1:
            over.append(f"d={d}:{rep.iterations_used}")
    seconds = time.perf_counter() - t0
    ok = worst_err <= 1e-8 and not over and seconds < 1.0
    detail = (f"worst rel err {worst_err:.1e} (<= 1e-8), {len(over)}/20 maps above d+1 iterations"
              f"{' [' + ', '.join(over) + ']' if over else ''}, {seconds:.2f}s (< 1s)")
    assert criterion(1, ok, detail), detail


# ---------------------------------------------------------------------------
# 2. forward certificate for every method
# ---------------------------------------------------------------------------

def test_criterion_2_forward_certificate():
    tol = 1e-6
    methods = {
        "picard": SolverConfig(method="picard", tol=tol, max_iters=100),
        "broyden": SolverConfig(method="broyden", tol=tol, max_iters=100),
        "unroll": SolverConfig(method="unroll", tol=tol, unroll_steps=50),
    }
    t0 = time.perf_counter()
    worst, worst_gap, runs = 0.0, 0.0, 0
    for levels in (2, 3):
        for channels in (4, 8):
            for seed in (0, 1):
                G = make_transform(TransformConfig(levels=levels, channels=channels), seed)
                B = FeaturePyramid.random(np.random.default_rng([seed, levels, channels]), 1, channels, 16, 16, levels)
                for cfg in methods.values():
                    P, rep = solve(G, B, cfg)
                    indep = (G(P + B) - P).norm() / max(P.norm(), 1e-8)
                    worst = max(worst, indep)
                    worst_gap = max(worst_gap, abs(indep - rep.final_rel_residual))
                    runs += 1
    seconds = time.perf_counter() - t0
    ok = worst <= tol and worst_gap <= 1e-12 and seconds < 30
    detail = (f"{runs} solves, worst recomputed residual {worst:.2e} (<= {tol:g}), "
              f"report vs recomputed {worst_gap:.1e}, {seconds:.1f}s (< 30s)")
    assert criterion(2, ok, detail), detail


# ---------------------------------------------------------------------------
# 3. implicit gradients against finite differences
# ---------------------------------------------------------------------------

GRADCHECK_INSTANCES = [
    GradcheckConfig(variant="dense_fpn", levels=2, channels=2, seed=0),
    GradcheckConfig(variant="res_dense", levels=2, channels=1, groups=1, seed=1),
    GradcheckConfig(variant="res_pyramid_conv", levels=2, channels=1, groups=1, seed=2),
]


def test_criterion_3_gradient_exactness():
    t0 = time.perf_counter()
    worst, failures, n_params = 0.0, [], []
    for cfg in GRADCHECK_INSTANCES:
        n_params.append(make_transform(TransformConfig(levels=cfg.levels, channels=cfg.channels,
                                                       variant=cfg.variant, groups=cfg.groups), 0).params.size)
        report = gradcheck(cfg, suites=("implicit",))
        for s in report.suites:
            worst = max(worst, s.worst)
            if not s.passed:
                failures.append(f"{cfg.variant}: {s.line()}")
    seconds = time.perf_counter() - t0
    ok = not failures and max(n_params) <= 200 and seconds < 120
    detail = (f"params {n_params} (<= 200), every d_theta and d_B coordinate, worst rel err {worst:.1e} "
              f"(<= 1e-4), {seconds:.1f}s (< 120s)")
    assert criterion(3, ok, detail), "\n".join([detail] + failures)


# ---------------------------------------------------------------------------
# 4. implicit vs unrolled(50)
# ---------------------------------------------------------------------------

def test_criterion_4_implicit_vs_unrolled():
    t0 = time.perf_counter()
    worst_cos, worst_rel = 1.0, 0.0
    cases = [(2, 4, "res_pyramid_conv"), (3, 4, "dense_fpn"), (3, 8, "res_dense"), (4, 2, "res_pyramid_conv"),
             (2, 8, "dense_fpn"), (4, 4, "res_dense")]
    for seed, (levels, channels, variant) in enumerate(cases):
        G = make_transform(TransformConfig(levels=levels, channels=channels, variant=variant), seed)
        rng = np.random.default_rng([seed, 4])
        B = FeaturePyramid.random(rng, 1, channels, 8, 8, levels)
        g = FeaturePyramid.random(rng, 1, channels, 8, 8, levels)
        cfg = SolverConfig(tol=1e-10, max_iters=200)
        P, rep = solve(G, B, cfg)
        assert rep.converged
        a = flat_theta(implicit_grads(G, P, B, g, cfg))
        b = flat_theta(unrolled_grads(G, B, T=50, g=g))
        worst_cos = min(worst_cos, float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))
        worst_rel = max(worst_rel, float(np.linalg.norm(a - b) / np.linalg.norm(b)))
    seconds = time.perf_counter() - t0
    ok = worst_cos >= 0.999 and worst_rel <= 1e-3 and seconds < 120
    detail = (f"{len(cases)} instances, min cosine {worst_cos:.6f} (>= 0.999), "
              f"max rel L2 {worst_rel:.1e} (<= 1e-3), {seconds:.1f}s (< 120s)")
    assert criterion(4, ok, detail), detail


# ---------------------------------------------------------------------------
# 5. Broyden vs Picard iterations
# ---------------------------------------------------------------------------

def test_criterion_5_solver_efficiency():
    t0 = time.perf_counter()
    result = run_bench(n_instances=10)
    seconds = time.perf_counter() - t0
    ok = result.not_worse >= 9 and result.strictly_fewer >= 7 and seconds < 60
    detail = (f"broyden <= picard on {result.not_worse}/10 (>= 9), strictly fewer on "
              f"{result.strictly_fewer}/10 (>= 7), {seconds:.1f}s (< 60s)")
    assert criterion(5, ok, detail), detail + "\n" + result.table()


# ---------------------------------------------------------------------------
# 6 and 7 share the trend runs
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trend():
    t0 = time.perf_counter()
    result = run_trend(keep_checkpoints=True, progress=print)
    return result, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_6_unrolling_depth_ordering(trend):
    result, seconds = trend
    checks = "; ".join(f"{name} {'ok' if ok else 'NOT MET'} ({d})" for name, ok, d in result.checks())
    ok = result.ordered and seconds < 30 * 60
    detail = f"3 seeds x 4 settings x 2000 steps, {seconds / 60:.1f} min (< 30 min): {checks}"
    assert criterion(6, ok, detail), detail + "\n" + result.table()


@pytest.mark.slow
def test_criterion_7_reduced_eval_iterations(trend):
    result, _ = trend
    ckpt = result.checkpoints["broyden"][0]
    cfg = ckpt.config
    assert cfg.solver.method == "broyden" and cfg.solver.max_iters == 15
    _, held = make_splits(cfg.task, cfg.seed)
    model = ckpt.model()
    full = evaluate(model, held, cfg.solver)
    short = evaluate(model, held, replace(cfg.solver, eval_iters=7), training=False)
    rel = np.abs(short - full) / np.abs(full)
    ok = rel.max() <= 0.01
    detail = (f"{len(held)} held-out samples, max per-sample relative change {rel.max():.2e} "
              f"(<= 1e-2), mean loss {full.mean():.5f} vs {short.mean():.5f}")
    assert criterion(7, ok, detail), detail


# ---------------------------------------------------------------------------
# 8. weight-norm scale invariance
# ---------------------------------------------------------------------------

def test_criterion_8_weight_norm_scale_invariance():
    worst, checked = 0.0, 0
    rng = np.random.default_rng(8)
    for variant in VARIANTS:
        G = make_transform(TransformConfig(levels=3, channels=4, variant=variant), 3)
        z = FeaturePyramid.random(rng, 2, 4, 16, 16, 3)
        ref = pack(apply(G, z)).data
        for name in [k for k in G.params if k.endswith(".v")]:
            H = G.with_params(G.params.replace(**{name: G.params[name] * 10.0}))
            worst = max(worst, float(np.abs(pack(apply(H, z)).data - ref).max()))
            checked += 1
    ok = worst <= 1e-10
    detail = f"{checked} direction tensors over {len(VARIANTS)} variants, max |change| {worst:.1e} (<= 1e-10)"
    assert criterion(8, ok, detail), detail


# ---------------------------------------------------------------------------
# 9. determinism and persistence
# ---------------------------------------------------------------------------

def test_criterion_9_determinism_and_persistence(tmp_path):
    cfg = replace(ExperimentConfig(), optimizer=OptimizerConfig(iterations=25, warmup=5))
    a_ck, a = train(cfg, tmp_path / "a.jsonl")
    b_ck, b = train(cfg, tmp_path / "b.jsonl")
    strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_time"} for r in recs]
    same_metrics = strip(a) == strip(b)
    same_ckpt = ck.dumps(a_ck) == ck.dumps(b_ck)

    ck.save(a_ck, tmp_path / "m.ckpt")
    back = ck.load(tmp_path / "m.ckpt")
    _, held = make_splits(cfg.task, cfg.seed)
    outs = []
    for c in (a_ck, back):
        m = c.model()
        P, _ = solve(m.transform, m.encode(held[0][0][None]), c.config.solver)
        outs.append(pack(P).data.tobytes())
    same_solve = outs[0] == outs[1]
    ok = same_metrics and same_ckpt and same_solve
    detail = (f"metrics bitwise equal (wall time excluded): {same_metrics}; checkpoints equal: {same_ckpt}; "
              f"re-solve after round trip bitwise equal: {same_solve}")
    assert criterion(9, ok, detail), detail
