"""Unrolling-depth trend experiment: final held-out loss per solver setting."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ..solver import SolverConfig
from .config import ExperimentConfig
from .data import make_splits
from .train import evaluate, train

DEFAULT_SEEDS = (0, 1, 2)


def trend_settings(include_unroll4: bool = False) -> list[tuple[str, SolverConfig]]:
    out = [(f"unroll({t})", SolverConfig(method="unroll", unroll_steps=t)) for t in (0, 1, 2)]
    if include_unroll4:
        out.append(("unroll(4)", SolverConfig(method="unroll", unroll_steps=4)))
    out.append(("broyden", SolverConfig(method="broyden")))
    return out


def pooled_std(a, b) -> float:
    """Pooled sample standard deviation of two equally sized groups."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or len(b) < 2:
        return 0.0
    return float(np.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2.0))


@dataclass
class TrendResult:
    losses: dict[str, list[float]] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    checkpoints: dict[str, list] = field(default_factory=dict)

    def mean(self, label: str) -> float:
        return float(np.mean(self.losses[label]))

    def std(self, label: str) -> float:
        v = self.losses[label]
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def checks(self) -> list[tuple[str, bool, str]]:
        """The ordering claims, each as ``(name, holds, detail)``.

        Strict steps need the mean gap to exceed one pooled standard
        deviation; the final step allows Broyden to sit within one pooled
        standard deviation above the deepest compared unroll.
        """
        out = []
        chain = [k for k in ("unroll(0)", "unroll(1)", "unroll(2)") if k in self.losses]
        for hi, lo in zip(chain, chain[1:]):
            gap = self.mean(hi) - self.mean(lo)
            m = pooled_std(self.losses[hi], self.losses[lo])
            out.append((f"{hi} > {lo}", gap > m,
                        f"{self.mean(hi):.5f} - {self.mean(lo):.5f} = {gap:.5f} vs margin {m:.5f}"))
        if "broyden" in self.losses and chain:
            ref = chain[-1]
            m = pooled_std(self.losses["broyden"], self.losses[ref])
            ok = self.mean("broyden") <= self.mean(ref) + m
            out.append((f"broyden <= {ref} + margin", ok,
                        f"{self.mean('broyden'):.5f} <= {self.mean(ref):.5f} + {m:.5f}"))
        return out

    @property
    def ordered(self) -> bool:
        return all(ok for _, ok, _ in self.checks())

    def table(self) -> str:
        lines = [f"{'setting':<12} {'mean':>9} {'std':>9}  per-seed"]
        for k, v in self.losses.items():
            seeds = " ".join(f"{x:.5f}" for x in v)
            lines.append(f"{k:<12} {self.mean(k):>9.5f} {self.std(k):>9.5f}  {seeds}")
        for name, ok, detail in self.checks():
            lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return "\n".join(lines)


def train_and_score(cfg: ExperimentConfig):
    """Train with ``cfg``; returns ``(mean held-out loss, checkpoint)``."""
    ckpt, _ = train(cfg)
    _, held = make_splits(cfg.task, cfg.seed)
    return float(evaluate(ckpt.model(), held, cfg.solver).mean()), ckpt


def final_loss(cfg: ExperimentConfig) -> float:
    return train_and_score(cfg)[0]


def run_trend(base: ExperimentConfig | None = None, seeds=DEFAULT_SEEDS,
              settings: list[tuple[str, SolverConfig]] | None = None,
              progress: Callable[[str], None] | None = None,
              keep_checkpoints: bool = False) -> TrendResult:
    base = base or ExperimentConfig()
    settings = settings or trend_settings()
    result = TrendResult()
    for label, solver in settings:
        t0 = time.perf_counter()
        result.losses[label] = []
        for seed in seeds:
            cfg = replace(base, solver=solver, seed=seed)
            loss, ckpt = train_and_score(cfg)
            result.losses[label].append(loss)
            if keep_checkpoints:
                result.checkpoints.setdefault(label, []).append(ckpt)
            if progress:
                progress(f"{label} seed {seed}: held-out loss {loss:.5f}")
        result.seconds[label] = time.perf_counter() - t0
    return result
