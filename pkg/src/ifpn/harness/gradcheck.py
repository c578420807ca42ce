"""Gradient-check suites: primitives, transform VJPs, implicit gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import PRIMITIVES, record, vjp_primitive
from ..implicit import implicit_grads, unrolled_grads
from ..solver import SolverConfig, solve
from ..tensor_core import FeaturePyramid, pack, unpack
from ..transform import PyramidTransform, TransformConfig, init_params


@dataclass(frozen=True)
class GradcheckConfig:
    levels: int = 2
    channels: int = 2
    variant: str = "dense_fpn"
    groups: int = 1
    size: int = 4
    seed: int = 0
    n_coords: int | None = None  # None checks every coordinate
    fd_step: float = 1e-6
    implicit_fd_step: float = 1e-4
    solve_tol: float = 1e-11
    oracle_tol: float = 1e-13
    vjp_rtol: float = 1e-5
    implicit_rtol: float = 1e-4
    cosine_min: float = 0.999
    unrolled_rel_max: float = 1e-3
    contraction: float = 0.5
    jitter: float = 0.1


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    where: str = ""
    checked: int = 0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        loc = f" at {self.where}" if self.where and not self.passed else ""
        return f"[{tag}] {self.name}: worst={self.worst:.3e} tol={self.tolerance:.1e} checked={self.checked}{loc}"


@dataclass
class GradcheckReport:
    suites: list[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def format(self) -> str:
        return "\n".join(s.line() for s in self.suites)


def rel_error(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _pick(n: int, k: int | None, rng) -> np.ndarray:
    if k is None or k >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def _coordwise(name, analytic, numeric, idx, tol, labels=None, floor=1e-8) -> SuiteResult:
    if len(idx) == 0:
        return SuiteResult(name, True, 0.0, tol, checked=0)
    err = rel_error(analytic, numeric, floor)
    k = int(np.argmax(err))
    where = labels(idx[k]) if labels else f"coordinate {idx[k]}"
    where += f" (analytic {analytic[k]:.6e}, numeric {numeric[k]:.6e})"
    return SuiteResult(name, bool(err[k] <= tol), float(err[k]), tol, where, len(idx))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _primitive_cases(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    return [
        ("conv2d k3 s1", "conv2d", [x, rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3)], {"stride": 1}),
        ("conv2d k3 s2", "conv2d", [x, rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3)], {"stride": 2}),
        ("conv2d k1", "conv2d", [x, rng.standard_normal((1, 1, 2, 2)), rng.standard_normal(2)], {"stride": 1}),
        ("upsample nearest", "upsample", [x], {"mode": "nearest"}),
        ("upsample bilinear", "upsample", [x], {"mode": "bilinear"}),
        ("group_norm", "group_norm", [x, rng.standard_normal(2), rng.standard_normal(2)], {"groups": 2}),
        ("relu", "relu", [x + 0.05 * np.sign(x)], {}),
        ("add", "add", [x, rng.standard_normal(x.shape)], {}),
        ("scale", "scale", [x], {"a": 0.7}),
        ("weight_norm", "weight_norm", [rng.standard_normal((3, 3, 2, 2)), rng.standard_normal(2)], {}),
    ]


def check_primitive(op, args, attrs, rng, step=1e-6, tol=1e-6) -> SuiteResult:
    """Every argument coordinate of one primitive's VJP against central differences."""
    _, entry, vals = record(op, *args, **attrs)
    out = PRIMITIVES[op].forward(*vals, **attrs)[0]
    u = rng.standard_normal(out.shape)
    ins, ps = vjp_primitive(op, entry, u, vals)
    grads = list(ins) + list(ps)
    worst = SuiteResult(op, True, 0.0, tol)
    for a, (arg, gr) in enumerate(zip(vals, grads)):
        flat = arg.ravel()
        num = np.empty(flat.size)
        for i in range(flat.size):
            hi = [v.copy() for v in vals]
            lo = [v.copy() for v in vals]
            hi[a].ravel()[i] += step
            lo[a].ravel()[i] -= step
            fh = PRIMITIVES[op].forward(*hi, **attrs)[0]
            fl = PRIMITIVES[op].forward(*lo, **attrs)[0]
            num[i] = np.vdot(u, fh - fl) / (2 * step)
        res = _coordwise(op, gr.ravel(), num, np.arange(flat.size), tol,
                         lambda i, a=a: f"argument {a} entry {i}")
        if res.worst >= worst.worst:
            worst = SuiteResult(op, res.passed and worst.passed, res.worst, tol, res.where,
                                worst.checked + res.checked)
        else:
            worst.checked += res.checked
            worst.passed = worst.passed and res.passed
    return worst


def suite_primitives(rng) -> SuiteResult:
    results = []
    for label, op, args, attrs in _primitive_cases(rng):
        r = check_primitive(op, args, attrs, rng)
        r.name = label
        results.append(r)
    bad = max(results, key=lambda r: r.worst)
    return SuiteResult("primitive VJPs", all(r.passed for r in results), bad.worst, bad.tolerance,
                       f"{bad.name}: {bad.where}", sum(r.checked for r in results))


# ---------------------------------------------------------------------------
# transform and implicit suites
# ---------------------------------------------------------------------------

def _instance(cfg: GradcheckConfig):
    tcfg = TransformConfig(levels=cfg.levels, channels=cfg.channels, variant=cfg.variant, groups=cfg.groups)
    rng = np.random.default_rng([cfg.seed, 99])
    params = init_params(tcfg, cfg.seed, cfg.contraction)
    # freshly initialised biases are exactly zero, which can park a ReLU input
    # exactly on its kink; a small jitter keeps the instance differentiable
    params = params.replace(**{k: v + cfg.jitter * rng.standard_normal(v.shape)
                               for k, v in params.items() if k.endswith((".b", ".beta", ".gamma"))})
    G = PyramidTransform(tcfg, params)
    B = FeaturePyramid.random(rng, 1, cfg.channels, cfg.size, cfg.size, cfg.levels)
    w = FeaturePyramid.random(rng, 1, cfg.channels, cfg.size, cfg.size, cfg.levels)
    return G, B, w, rng


def suite_transform_fd(cfg: GradcheckConfig, G, z, u, rng) -> list[SuiteResult]:
    """d_theta and d_input of vjp_transform against central differences of <u, G>."""
    h = cfg.fd_step
    gb = G.trace(z).vjp(u)
    theta = G.params.flat()
    idx = _pick(theta.data.size, cfg.n_coords, rng)
    num = []
    for i in idx:
        e = np.zeros_like(theta.data)
        e[i] = h
        Gp = G.with_params(G.params.from_flat(theta.data + e, theta.layout))
        Gm = G.with_params(G.params.from_flat(theta.data - e, theta.layout))
        num.append((Gp(z).dot(u) - Gm(z).dot(u)) / (2 * h))
    names = [n for n, shape in theta.layout for _ in range(int(np.prod(shape)))]
    r1 = _coordwise("transform d_theta (finite differences)", gb.d_theta.flat().data[idx],
                    np.array(num), idx, cfg.vjp_rtol, lambda i: f"theta[{i}] ({names[i]})")
    zf = pack(z)
    jdx = _pick(zf.data.size, cfg.n_coords, rng)
    num = []
    for i in jdx:
        e = np.zeros_like(zf.data)
        e[i] = h
        num.append((G(unpack(zf.data + e, zf.layout)).dot(u) - G(unpack(zf.data - e, zf.layout)).dot(u)) / (2 * h))
    r2 = _coordwise("transform d_input (finite differences)", pack(gb.d_input).data[jdx],
                    np.array(num), jdx, cfg.vjp_rtol, lambda i: f"z[{i}]")
    return [r1, r2]


def suite_dot_product(cfg: GradcheckConfig, G, z, rng) -> SuiteResult:
    """<u, J t> (forward differences) against <J^T u, t>."""
    tol = cfg.vjp_rtol
    if cfg.n_coords == 0:
        return SuiteResult("dot-product transpose test", True, 0.0, tol)
    worst = 0.0
    h = 1e-7
    for _ in range(5):
        t = FeaturePyramid([rng.standard_normal(a.shape) for a in z])
        u = FeaturePyramid([rng.standard_normal(a.shape) for a in z])
        jt = (G(z + t * h) - G(z)) * (1.0 / h)
        lhs = u.dot(jt)
        rhs = G.trace(z).vjp(u, params=False).dot(t)
        worst = max(worst, float(rel_error(lhs, rhs)))
    return SuiteResult("dot-product transpose test", worst <= tol, worst, tol, checked=5)


def central_difference(f, h: float) -> float:
    """Fourth-order central stencil; ``f(t)`` evaluates the loss at offset t."""
    return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)


def suite_implicit_fd(cfg: GradcheckConfig, G, B, w, rng) -> list[SuiteResult]:
    """Implicit d_theta and d_B against differences of L = <w, P*> re-solved.

    The gradient under test comes from a solve at ``cfg.solve_tol``; the
    finite-difference oracle re-solves (warm-started) at ``cfg.oracle_tol`` so
    that its own noise stays below the tolerance being certified. Agreement is
    ``|a - b| <= rtol * max(|a|, |b|, noise / rtol)``.
    """
    fwd = SolverConfig(method="broyden", tol=cfg.solve_tol, max_iters=200, memory=200)
    oracle = SolverConfig(method="broyden", tol=cfg.oracle_tol, max_iters=200, memory=200)
    P, _ = solve(G, B, fwd)
    grads = implicit_grads(G, P, B, w, fwd)
    h = cfg.implicit_fd_step

    def loss(Gx, Bx):
        Px, _ = solve(Gx, Bx, oracle, P0=P)
        return Px.dot(w)

    theta = G.params.flat()
    idx = _pick(theta.data.size, cfg.n_coords, rng)
    num = []
    for i in idx:
        e = np.zeros_like(theta.data)
        e[i] = 1.0
        num.append(central_difference(
            lambda t: loss(G.with_params(G.params.from_flat(theta.data + t * e, theta.layout)), B), h))
    names = [n for n, shape in theta.layout for _ in range(int(np.prod(shape)))]
    a_theta = grads.d_theta.flat().data
    a_B = pack(grads.d_input).data
    # Coordinates below the oracle's resolution cannot be checked relatively:
    # a solve certified to oracle_tol moves <w, P*> by about
    # oracle_tol * ||P*|| * ||w||, and the stencil divides that by h.
    noise = cfg.oracle_tol * P.norm() * w.norm() / h
    floor = noise / cfg.implicit_rtol
    r1 = _coordwise("implicit d_theta (finite differences)", a_theta[idx], np.array(num), idx,
                    cfg.implicit_rtol, lambda i: f"theta[{i}] ({names[i]})", floor)
    bf = pack(B)
    jdx = _pick(bf.data.size, cfg.n_coords, rng)
    num = []
    for i in jdx:
        e = np.zeros_like(bf.data)
        e[i] = 1.0
        num.append(central_difference(lambda t: loss(G, unpack(bf.data + t * e, bf.layout)), h))
    r2 = _coordwise("implicit d_B (finite differences)", a_B[jdx], np.array(num), jdx,
                    cfg.implicit_rtol, lambda i: f"B[{i}]", floor)
    return [r1, r2]


def suite_implicit_vs_unrolled(cfg: GradcheckConfig, G, B, w, T: int = 50) -> SuiteResult:
    name = f"implicit vs unrolled(T={T})"
    if cfg.n_coords == 0:
        return SuiteResult(name, True, 0.0, cfg.unrolled_rel_max)
    sc = SolverConfig(method="broyden", tol=1e-10, max_iters=100)
    P, _ = solve(G, B, sc)
    a = implicit_grads(G, P, B, w, sc).d_theta.flat().data
    b = unrolled_grads(G, B, None, T, w).d_theta.flat().data
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    rel = float(np.linalg.norm(a - b) / np.linalg.norm(b))
    ok = cos >= cfg.cosine_min and rel <= cfg.unrolled_rel_max
    return SuiteResult(name, ok, rel, cfg.unrolled_rel_max, f"cosine {cos:.8f}", a.size)


def gradcheck(cfg: GradcheckConfig | None = None, suites: tuple[str, ...] | None = None) -> GradcheckReport:
    cfg = cfg or GradcheckConfig()
    wanted = set(suites or ("primitives", "transform", "dot", "implicit", "unrolled"))
    G, B, w, rng = _instance(cfg)
    report = GradcheckReport()
    if "primitives" in wanted:
        report.suites.append(suite_primitives(np.random.default_rng([cfg.seed, 1])) if cfg.n_coords != 0
                             else SuiteResult("primitive VJPs", True, 0.0, 1e-6))
    z = B + w * 0.5
    if "transform" in wanted:
        report.suites += suite_transform_fd(cfg, G, z, w, rng)
    if "dot" in wanted:
        report.suites.append(suite_dot_product(cfg, G, z, rng))
    if "implicit" in wanted:
        report.suites += suite_implicit_fd(cfg, G, B, w, rng)
    if "unrolled" in wanted:
        report.suites.append(suite_implicit_vs_unrolled(cfg, G, B, w))
    return report
