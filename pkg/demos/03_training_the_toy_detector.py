"""Train encoder, equilibrium pyramid and head on the synthetic blob task.

Each step: encode -> Broyden solve -> per-level head and MSE -> implicit
gradients -> SGD with momentum. A short run is enough to see the loss
fall; afterwards inference is repeated with only 7 forward iterations.
"""
from dataclasses import replace

import numpy as np

from ifpn import SolverConfig
from ifpn.harness import ExperimentConfig, OptimizerConfig, evaluate, train
from ifpn.harness.data import make_splits

cfg = ExperimentConfig(optimizer=OptimizerConfig(iterations=300, warmup=30))
cfg = replace(cfg, task=replace(cfg.task, samples=128, heldout=32))

ckpt, records = train(cfg)
losses = np.array([r["loss"] for r in records])
print("loss, first 20 steps:", losses[:20].mean(), " last 20 steps:", losses[-20:].mean())
print("mean forward iterations:", np.mean([r["fwd_iters"] for r in records]),
      " mean adjoint iterations:", np.mean([r["bwd_iters"] for r in records]))

_, held = make_splits(cfg.task, cfg.seed)
model = ckpt.model()
full = evaluate(model, held, cfg.solver)
short = evaluate(model, held, SolverConfig(eval_iters=7), training=False)
print("held-out loss, 15 iterations:", full.mean(), " 7 iterations:", short.mean())
print("largest per-sample relative change:", np.max(np.abs(short - full) / full))
