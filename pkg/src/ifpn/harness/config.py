"""Experiment configuration and its TOML representation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from ..solver import SolverConfig
from ..transform import TransformConfig


@dataclass(frozen=True)
class SyntheticTaskSpec:
    image_size: int = 32
    levels: int = 3
    channels: int = 4
    blobs_min: int = 1
    blobs_max: int = 3
    noise: float = 0.05
    samples: int = 1024
    heldout: int = 512

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.image_size % 2 ** (self.levels - 1):
            raise ValueError(f"image size {self.image_size} not divisible by 2^{self.levels - 1}")
        if not 0 <= self.blobs_min <= self.blobs_max:
            raise ValueError("need 0 <= blobs_min <= blobs_max")
        if self.noise < 0 or self.samples < 1 or self.heldout < 0:
            raise ValueError("noise must be >= 0, samples >= 1, heldout >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    iterations: int = 2000
    warmup: int = 100
    decay_at: tuple[float, ...] = (0.6, 0.85)
    decay_factor: float = 0.1
    batch_size: int = 2

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for frac in self.decay_at:
            if step >= frac * self.iterations:
                lr *= self.decay_factor
        if self.warmup and step < self.warmup:
            lr *= (step + 1) / self.warmup
        return lr


@dataclass(frozen=True)
class ExperimentConfig:
    transform: TransformConfig = field(default_factory=lambda: TransformConfig(variant="res_dense"))
    solver: SolverConfig = field(default_factory=SolverConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    init_contraction: float = 0.9

    def __post_init__(self):
        t, k = self.transform, self.task
        if (t.levels, t.channels) != (k.levels, k.channels):
            raise ValueError(
                f"transform ({t.levels} levels, {t.channels} ch) and task "
                f"({k.levels} levels, {k.channels} ch) disagree"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["decay_at"] = list(self.optimizer.decay_at)
        d["solver"] = {k: v for k, v in d["solver"].items() if v is not None}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        opt = dict(d.get("optimizer", {}))
        if "decay_at" in opt:
            opt["decay_at"] = tuple(opt["decay_at"])
        return cls(
            transform=_build(TransformConfig, d.get("transform", {})),
            solver=_build(SolverConfig, d.get("solver", {})),
            task=_build(SyntheticTaskSpec, d.get("task", {})),
            optimizer=_build(OptimizerConfig, opt),
            seed=int(d.get("seed", 0)),
            init_contraction=float(d.get("init_contraction", 0.9)),
        )

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def with_overrides(self, seed: int | None = None, eval_iters: int | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if eval_iters is not None:
            cfg = replace(cfg, solver=replace(cfg.solver, eval_iters=eval_iters))
        return cfg


def _build(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        return ExperimentConfig.from_dict(tomllib.load(fh))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dumps_config(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    lines = [f"{k} = {_toml_value(v)}" for k, v in d.items() if not isinstance(v, dict)]
    for section, body in d.items():
        if isinstance(body, dict):
            lines += ["", f"[{section}]"]
            lines += [f"{k} = {_toml_value(v)}" for k, v in body.items()]
    return "\n".join(lines) + "\n"


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg))
