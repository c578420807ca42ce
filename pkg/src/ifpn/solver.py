"""Forward solvers for the equilibrium P* = G(P* + B).

The vector-level routines (``picard_fixed_point``, ``broyden_fixed_point``)
find fixed points of any map ``f: R^d -> R^d``; the pyramid-level wrappers
pack pyramids into flat vectors and hand them ``x -> pack(G(unpack(x) + B))``.
The adjoint solve in :mod:`ifpn.implicit` reuses the same routines.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .tensor_core import FeaturePyramid, ShapeError, pack, unpack

EPS = 1e-8
BREAKDOWN = 1e-12
METHODS = ("picard", "unroll", "broyden")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "broyden"
    unroll_steps: int = 0
    tol: float = 1e-6
    max_iters: int = 15
    step_size: float = 1.0
    memory: int | None = None  # None: keep every factor within max_iters
    eval_iters: int | None = None
    line_search: bool = True
    max_halvings: int = 4
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.unroll_steps < 0:
            raise ValueError("unroll_steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.memory is not None and self.memory < 1:
            raise ValueError("Broyden memory must be >= 1")
        if self.eval_iters is not None and self.eval_iters < 1:
            raise ValueError("eval_iters must be >= 1")

    @property
    def effective_memory(self) -> int:
        return self.max_iters if self.memory is None else self.memory

    def label(self) -> str:
        return f"unroll({self.unroll_steps})" if self.method == "unroll" else self.method

    def for_eval(self) -> "SolverConfig":
        if self.eval_iters is None:
            return self
        return replace(self, max_iters=self.eval_iters)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        return cls(**d)


@dataclass
class SolverReport:
    converged: bool
    iterations_used: int
    residual_history: list[float]
    final_rel_residual: float
    status: str = "converged"  # converged | max_iters | diverged | nonfinite | fixed_steps
    method: str = ""
    evaluations: int = 0
    abs_residual_history: list[float] = field(default_factory=list)

    def to_lines(self) -> str:
        """Line-oriented record: a header, then ``iteration residual`` pairs."""
        head = (
            f"# method={self.method} status={self.status} converged={int(self.converged)} "
            f"iterations={self.iterations_used} evaluations={self.evaluations} "
            f"final_rel_residual={self.final_rel_residual:.6e}"
        )
        rows = [f"{k} {r:.6e}" for k, r in enumerate(self.residual_history)]
        return "\n".join([head, *rows])


class BroydenState:
    """Limited-memory inverse-Jacobian estimate M = -I + sum_k u_k v_k^T."""

    def __init__(self, memory: int):
        self.memory = memory
        self.us: list[np.ndarray] = []
        self.vs: list[np.ndarray] = []
        self.x: np.ndarray | None = None
        self.q: np.ndarray | None = None

    def matvec(self, a: np.ndarray) -> np.ndarray:
        out = -a
        if self.us:
            out = out + np.array(self.us).T @ (np.array(self.vs) @ a)
        return out

    def rmatvec(self, a: np.ndarray) -> np.ndarray:
        out = -a
        if self.us:
            out = out + np.array(self.vs).T @ (np.array(self.us) @ a)
        return out

    def update(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Rank-one "good Broyden" update enforcing M y = s; False on breakdown."""
        my = self.matvec(y)
        v = self.rmatvec(s)
        denom = float(v @ y)
        if abs(denom) < BREAKDOWN:
            return False
        self.us.append((s - my) / denom)
        self.vs.append(v)
        if len(self.us) > self.memory:
            del self.us[0], self.vs[0]
        return True


def _rel(qn: float, x: np.ndarray) -> float:
    return qn / max(float(np.linalg.norm(x)), EPS)


class _Tracker:
    """Shared bookkeeping: residual history, best iterate, divergence guard."""

    def __init__(self, x, q, factor):
        self.abs0 = float(np.linalg.norm(q))
        self.factor = factor
        self.rel = [_rel(self.abs0, x)]
        self.abs = [self.abs0]
        self.best = (self.rel[0], x)
        self.status = None

    def push(self, x, q) -> bool:
        qn = float(np.linalg.norm(q))
        if not (np.all(np.isfinite(x)) and np.isfinite(qn)):
            self.status = "nonfinite"
            return False
        self.rel.append(_rel(qn, x))
        self.abs.append(qn)
        if self.rel[-1] < self.best[0]:
            self.best = (self.rel[-1], x)
        if self.abs0 > 0 and qn >= self.factor * self.abs0:
            self.status = "diverged"
            return False
        return True

    def report(self, x, tol, method, evals):
        status = self.status
        if status in ("diverged", "nonfinite"):
            rel, x = self.best
        else:
            rel = self.rel[-1]
            status = "converged" if rel <= tol else "max_iters"
        rep = SolverReport(
            converged=status == "converged",
            iterations_used=len(self.rel) - 1,
            residual_history=list(self.rel),
            final_rel_residual=rel,
            status=status,
            method=method,
            evaluations=evals,
            abs_residual_history=list(self.abs),
        )
        return x, rep


def picard_fixed_point(
    f: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    tol: float,
    max_iters: int,
    divergence_factor: float = 1e3,
) -> tuple[np.ndarray, SolverReport]:
    x = np.array(x0, dtype=np.float64)
    fx = f(x)
    evals = 1
    track = _Tracker(x, fx - x, divergence_factor)
    for _ in range(max_iters):
        if track.rel[-1] <= tol:
            break
        x = fx
        fx = f(x)
        evals += 1
        if not track.push(x, fx - x):
            break
    return track.report(x, tol, "picard", evals)


def broyden_fixed_point(
    f: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    cfg: SolverConfig,
    max_iters: int | None = None,
) -> tuple[np.ndarray, SolverReport]:
    """Limited-memory Broyden on q(x) = f(x) - x, starting from M = -I.

    Each step is ``x <- x - t * step_size * M q`` where the backtracking
    factor ``t`` is halved (at most ``max_halvings`` times) until the
    residual norm decreases; if none does, the trial with the smallest
    residual is taken.
    """
    max_iters = cfg.max_iters if max_iters is None else max_iters
    state = BroydenState(cfg.effective_memory)
    x = np.array(x0, dtype=np.float64)
    q = f(x) - x
    evals = 1
    track = _Tracker(x, q, cfg.divergence_factor)
    state.x, state.q = x, q
    for _ in range(max_iters):
        if track.rel[-1] <= cfg.tol:
            break
        qn = track.abs[-1]
        d = -cfg.step_size * state.matvec(q)
        t = 1.0
        best = None
        for _h in range(cfg.max_halvings + 1 if cfg.line_search else 1):
            xt = x + t * d
            qt = f(xt) - xt
            evals += 1
            nt = float(np.linalg.norm(qt))
            if best is None or nt < best[2]:
                best = (xt, qt, nt)
            if nt < qn or not np.isfinite(nt):
                break
            t *= 0.5
        xn, qnew, _ = best
        state.update(xn - x, qnew - q)
        x, q = xn, qnew
        state.x, state.q = x, q
        if not track.push(x, q):
            break
    return track.report(x, cfg.tol, "broyden", evals)


# ---------------------------------------------------------------------------
# pyramid-level solvers
# ---------------------------------------------------------------------------

def residual(G, P: FeaturePyramid, B: FeaturePyramid, mask=None) -> FeaturePyramid:
    """Q(P) = G(P + B) - P."""
    if P.shapes != B.shapes:
        raise ShapeError(f"P layout {P.shapes} != B layout {B.shapes}")
    return G(P + B, mask) - P


def relative_residual(G, P: FeaturePyramid, B: FeaturePyramid, mask=None) -> float:
    return residual(G, P, B, mask).norm() / max(P.norm(), EPS)


def _fixed_point_map(G, B: FeaturePyramid, mask):
    layout = B.layout()

    def f(x):
        return pack(G(unpack(x, layout) + B, mask)).data

    return f, layout


def _start(B: FeaturePyramid, P0: FeaturePyramid | None) -> FeaturePyramid:
    if P0 is None:
        return B.zeros_like()
    if P0.shapes != B.shapes:
        raise ShapeError(f"P0 layout {P0.shapes} != B layout {B.shapes}")
    return P0


def picard_solve(G, B, P0=None, cfg: SolverConfig | None = None, mask=None):
    cfg = cfg or SolverConfig(method="picard")
    f, layout = _fixed_point_map(G, B, mask)
    x, rep = picard_fixed_point(f, pack(_start(B, P0)).data, cfg.tol, cfg.max_iters, cfg.divergence_factor)
    return unpack(x, layout), rep


def broyden_solve(G, B, P0=None, cfg: SolverConfig | None = None, mask=None):
    cfg = cfg or SolverConfig()
    f, layout = _fixed_point_map(G, B, mask)
    x, rep = broyden_fixed_point(f, pack(_start(B, P0)).data, cfg)
    return unpack(x, layout), rep


def unroll_solve(G, B, P0=None, T: int = 0, mask=None, record: bool = True):
    """Exactly T weight-tied applications P <- G(P + B).

    Returns the final pyramid and, when ``record``, one evaluation trace per
    application (oldest first) for exact backpropagation.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    P = _start(B, P0)
    traces = []
    for _ in range(T):
        if record:
            tr = G.trace(P + B, mask)
            traces.append(tr)
            P = tr.output
        else:
            P = G(P + B, mask)
    return P, traces


def _unroll_with_report(G, B, P0, cfg: SolverConfig, mask):
    P = _start(B, P0)
    nxt = G(P + B, mask)
    track = _Tracker(pack(P).data, pack(nxt - P).data, np.inf)
    for _ in range(cfg.unroll_steps):
        P = nxt
        nxt = G(P + B, mask)
        track.push(pack(P).data, pack(nxt - P).data)
    _, rep = track.report(pack(P).data, cfg.tol, f"unroll({cfg.unroll_steps})", cfg.unroll_steps + 1)
    if not rep.converged:
        rep.status = "fixed_steps"
    return P, rep


def solve(G, B: FeaturePyramid, cfg: SolverConfig, P0=None, mask=None, training: bool = True):
    """Dispatch on ``cfg.method``; inference calls honour ``cfg.eval_iters``."""
    if not training:
        cfg = cfg.for_eval()
    if cfg.method == "picard":
        return picard_solve(G, B, P0, cfg, mask)
    if cfg.method == "broyden":
        return broyden_solve(G, B, P0, cfg, mask)
    return _unroll_with_report(G, B, P0, cfg, mask)
