"""Unrolling depth against solving to equilibrium, at a glance.

The full experiment (``ifpn trend``) trains 3 seeds x 4 settings for 2000
steps each. This shortened version uses one seed and 400 steps, so read the
numbers as a rough picture rather than a test.
"""
from dataclasses import replace

from ifpn.harness import ExperimentConfig, OptimizerConfig, run_trend

base = ExperimentConfig(optimizer=OptimizerConfig(iterations=400, warmup=40))
base = replace(base, task=replace(base.task, samples=256, heldout=128))
result = run_trend(base, seeds=(0,), progress=print)
for label, secs in result.seconds.items():
    print(f"{label:>10}: {secs:6.1f}s")
