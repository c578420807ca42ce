"""Training loop: encode, solve, head/loss, implicit (or unrolled) backward, SGD."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..autodiff import ParamSet
from ..implicit import backprop_traces, implicit_grads
from ..solver import SolverConfig, SolverReport, relative_residual, solve, unroll_solve
from ..transform import PyramidTransform, init_params, sample_dropout_mask
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import collate, make_splits
from .model import Model, encode_with_vjp, head_and_loss, init_encoder, init_head, per_sample_losses

log = logging.getLogger(__name__)

MAX_SKIP_FRACTION = 0.2
METRIC_FIELDS = ("step", "loss", "fwd_iters", "fwd_residual", "bwd_iters", "bwd_residual",
                 "lr", "skipped", "wall_time")


class TrainingAborted(RuntimeError):
    pass


def build_model(cfg: ExperimentConfig) -> Model:
    rng = np.random.default_rng([cfg.seed, 3])
    t = cfg.transform
    G = PyramidTransform(t, init_params(t, cfg.seed, cfg.init_contraction))
    return Model(init_encoder(t.levels, t.channels, rng), G, init_head(t.levels, t.channels, rng))


@dataclass
class StepResult:
    loss: float
    ok: bool
    grads: tuple[ParamSet, ParamSet, ParamSet] | None
    forward: SolverReport | None
    backward: SolverReport | None


def forward_backward(model: Model, images, targets, solver: SolverConfig, mask=None) -> StepResult:
    G = model.transform
    B, enc_backward = encode_with_vjp(model.encoder, images, model.levels, model.groups)
    if solver.method == "unroll":
        T = solver.unroll_steps
        P, traces = unroll_solve(G, B, None, T, mask, record=True)
        fwd = SolverReport(True, T, [], relative_residual(G, P, B, mask), "fixed_steps",
                           f"unroll({T})", T)
        fwd.residual_history = [fwd.final_rel_residual]
        loss, g, d_head = head_and_loss(model.head, P, targets)
        grads = backprop_traces(G, traces, g, B)
        bwd = None
    else:
        P, fwd = solve(G, B, solver, mask=mask)
        if not fwd.converged:
            return StepResult(float("nan"), False, None, fwd, None)
        loss, g, d_head = head_and_loss(model.head, P, targets)
        grads, state = implicit_grads(G, P, B, g, solver, mask, return_state=True)
        bwd = state.report
        if bwd.status in ("diverged", "nonfinite"):
            return StepResult(loss, False, None, fwd, bwd)
    d_enc = enc_backward(grads.d_input)
    return StepResult(loss, True, (d_enc, grads.d_theta, d_head), fwd, bwd)


def _sgd(params: ParamSet, grads: ParamSet, vel: dict, lr: float, momentum: float) -> ParamSet:
    new = []
    for k, p in params.items():
        v = momentum * vel[k] + grads[k]
        vel[k] = v
        new.append((k, p - lr * v))
    return ParamSet(new)


def evaluate(model: Model, data, solver: SolverConfig, training: bool = False) -> np.ndarray:
    """Per-sample held-out losses; each sample is solved on its own."""
    out = []
    for image, target in data:
        B = model.encode(image[None])
        P, _ = solve(model.transform, B, solver, training=training)
        out.append(per_sample_losses(model.head, P, target)[0])
    return np.array(out)


def train(cfg: ExperimentConfig, metrics_path: str | Path | None = None,
          progress: Callable[[dict], None] | None = None):
    """Run SGD with momentum; returns ``(checkpoint, metrics records)``."""
    model = build_model(cfg)
    train_data, _ = make_splits(cfg.task, cfg.seed)
    opt = cfg.optimizer
    batch_rng = np.random.default_rng([cfg.seed, 5])
    drop_rng = np.random.default_rng([cfg.seed, 7])
    vel = [{k: np.zeros_like(v) for k, v in ps.items()}
           for ps in (model.encoder, model.transform.params, model.head)]
    order: list[int] = []
    records = []
    skipped = 0
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(opt.iterations):
            t0 = time.perf_counter()
            if len(order) < opt.batch_size:
                order += list(batch_rng.permutation(len(train_data)))
            idx, order = order[:opt.batch_size], order[opt.batch_size:]
            images, targets = collate([train_data[i] for i in idx])
            mask = None
            if cfg.transform.dropout_rate > 0:
                mask = sample_dropout_mask(cfg.transform, len(idx), drop_rng)
            lr = opt.lr_at(step)
            res = forward_backward(model, images, targets, cfg.solver, mask)
            if res.ok:
                d_enc, d_G, d_head = res.grads
                model = Model(
                    _sgd(model.encoder, d_enc, vel[0], lr, opt.momentum),
                    model.transform.with_params(_sgd(model.transform.params, d_G, vel[1], lr, opt.momentum)),
                    _sgd(model.head, d_head, vel[2], lr, opt.momentum),
                )
            else:
                skipped += 1
                log.warning("step %d skipped: forward %s", step,
                            res.forward.status if res.forward else "?")
            rec = {
                "step": step,
                "loss": res.loss,
                "fwd_iters": res.forward.iterations_used if res.forward else None,
                "fwd_residual": res.forward.final_rel_residual if res.forward else None,
                "bwd_iters": res.backward.iterations_used if res.backward else None,
                "bwd_residual": res.backward.final_rel_residual if res.backward else None,
                "lr": lr,
                "skipped": int(not res.ok),
                "wall_time": time.perf_counter() - t0,
            }
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
            if progress:
                progress(rec)
            done = step + 1
            if done >= 20 and skipped / done >= MAX_SKIP_FRACTION:
                raise TrainingAborted(f"{skipped} of {done} steps skipped (forward solve not certified)")
    finally:
        if sink:
            sink.close()
    return Checkpoint.from_model(model, cfg, opt.iterations), records


def load_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def metrics_to_csv(records: list[dict]) -> str:
    lines = [",".join(METRIC_FIELDS)]
    for r in records:
        lines.append(",".join("" if r.get(k) is None else repr(r[k]) for k in METRIC_FIELDS))
    return "\n".join(lines) + "\n"
