"""The pyramid transformation whose fixed point the solvers look for.

Three fusion architectures are supported:

``dense_fpn``
    every output level sums contributions from all input levels (1x1
    lateral, 1x1 + nearest upsampling from coarser levels, chains of
    stride-2 3x3 convolutions from finer levels).
``res_dense``
    a basic residual block per level, then the dense fusion.
``res_pyramid_conv``
    a residual block per level, then fusion restricted to adjacent levels
    ``j in {i-1, i, i+1}`` with 3x3 convolutions (bilinear upsampling from
    the coarser level, stride-2 from the finer one).

All fused sums go through a ReLU. Every convolution is weight-normalised
(``g * v / ||v||`` per output channel) unless ``weight_norm=False``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import Eager, GradBundle, ParamSet, Tape
from .tensor_core import FeaturePyramid, ShapeError

VARIANTS = ("dense_fpn", "res_dense", "res_pyramid_conv")


@dataclass(frozen=True)
class TransformConfig:
    levels: int = 3
    channels: int = 4
    variant: str = "res_pyramid_conv"
    groups: int = 2
    weight_norm: bool = True
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"need at least 2 levels, got {self.levels}")
        if self.channels < 1 or self.groups < 1 or self.channels % self.groups:
            raise ValueError(f"{self.channels} channels not divisible into {self.groups} groups")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformConfig":
        return cls(**d)


@dataclass(frozen=True)
class ConvSpec:
    name: str
    kernel: int
    stride: int
    output_stage: bool  # last linear op on a fusion path; G is 1-homogeneous in its gain


def fusion_sources(cfg: TransformConfig, i: int) -> list[int]:
    """Input levels (1-based) feeding output level ``i``."""
    if cfg.variant == "res_pyramid_conv":
        return [j for j in (i - 1, i, i + 1) if 1 <= j <= cfg.levels]
    return list(range(1, cfg.levels + 1))


def conv_specs(cfg: TransformConfig) -> list[ConvSpec]:
    specs = []
    if cfg.variant != "dense_fpn":
        for j in range(1, cfg.levels + 1):
            specs.append(ConvSpec(f"res{j}.conv1", 3, 1, False))
            specs.append(ConvSpec(f"res{j}.conv2", 3, 1, False))
    for i in range(1, cfg.levels + 1):
        for j in fusion_sources(cfg, i):
            if cfg.variant == "res_pyramid_conv":
                specs.append(ConvSpec(f"fuse{i}.{j}", 3, 2 if j < i else 1, True))
            elif j >= i:
                specs.append(ConvSpec(f"fuse{i}.{j}", 1, 1, True))
            else:
                gap = i - j
                for k in range(gap):
                    specs.append(ConvSpec(f"fuse{i}.{j}.d{k}", 3, 2, k == gap - 1))
    return specs


def norm_names(cfg: TransformConfig) -> list[str]:
    if cfg.variant == "dense_fpn":
        return []
    return [f"res{j}.gn{k}" for j in range(1, cfg.levels + 1) for k in (1, 2)]


def output_gain_names(cfg: TransformConfig) -> list[str]:
    suffix = ".g" if cfg.weight_norm else ".w"
    return [s.name + suffix for s in conv_specs(cfg) if s.output_stage]


# ---------------------------------------------------------------------------
# forward graph
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self, ctx, cfg: TransformConfig, handles: dict):
        self.ctx, self.cfg, self.p = ctx, cfg, handles

    def conv(self, name: str, x, stride: int = 1):
        if self.cfg.weight_norm:
            w = self.ctx.call("weight_norm", self.p[name + ".v"], self.p[name + ".g"])
        else:
            w = self.p[name + ".w"]
        return self.ctx.call("conv2d", x, w, self.p[name + ".b"], stride=stride)

    def gn(self, name: str, x):
        return self.ctx.call(
            "group_norm", x, self.p[name + ".gamma"], self.p[name + ".beta"], groups=self.cfg.groups
        )

    def res_block(self, j: int, z):
        ctx = self.ctx
        h = ctx.call("relu", self.gn(f"res{j}.gn1", self.conv(f"res{j}.conv1", z)))
        h = self.gn(f"res{j}.gn2", self.conv(f"res{j}.conv2", h))
        return ctx.call("relu", ctx.call("add", z, h))

    def path(self, i: int, j: int, r):
        ctx, cfg = self.ctx, self.cfg
        if cfg.variant == "res_pyramid_conv":
            if j == i:
                return self.conv(f"fuse{i}.{j}", r)
            if j > i:
                return ctx.call("upsample", self.conv(f"fuse{i}.{j}", r), mode="bilinear")
            return self.conv(f"fuse{i}.{j}", r, stride=2)
        if j == i:
            return self.conv(f"fuse{i}.{j}", r)
        if j > i:
            h = self.conv(f"fuse{i}.{j}", r)
            for _ in range(j - i):
                h = ctx.call("upsample", h, mode="nearest")
            return h
        h = r
        for k in range(i - j):
            h = self.conv(f"fuse{i}.{j}.d{k}", h, stride=2)
        return h

    def __call__(self, z: Sequence, mask: Sequence | None):
        ctx, cfg = self.ctx, self.cfg
        if cfg.variant == "dense_fpn":
            r = list(z)
        else:
            r = [self.res_block(j, z[j - 1]) for j in range(1, cfg.levels + 1)]
        if mask is not None:
            r = [ctx.call("scale", rj, a=m) for rj, m in zip(r, mask)]
        out = []
        for i in range(1, cfg.levels + 1):
            total = None
            for j in fusion_sources(cfg, i):
                term = self.path(i, j, r[j - 1])
                total = term if total is None else ctx.call("add", total, term)
            out.append(ctx.call("relu", total))
        return out


class TransformTrace:
    """A recorded evaluation of G at one input, replayable for many cotangents."""

    def __init__(self, G: "PyramidTransform", z: FeaturePyramid, mask=None):
        self.G = G
        self.tape = Tape()
        self.z_vars = [self.tape.input(a) for a in z]
        self.p_vars = {k: self.tape.input(v, k) for k, v in G.params.items()}
        outs = _Builder(self.tape, G.config, self.p_vars)(self.z_vars, G._check_mask(z, mask))
        self.out_vars = outs
        self.output = FeaturePyramid([v.value for v in outs])

    def vjp(self, u: FeaturePyramid, params: bool = True) -> GradBundle | FeaturePyramid:
        """u^T dG/dz (and u^T dG/dtheta when ``params``)."""
        if u.shapes != self.output.shapes:
            raise ShapeError(f"cotangent layout {u.shapes} != output layout {self.output.shapes}")
        wanted = list(self.z_vars) + (list(self.p_vars.values()) if params else [])
        grads = self.tape.backward(dict(zip(self.out_vars, u.levels)), wanted)
        d_in = FeaturePyramid([
            grads[v.index] if grads[v.index] is not None else np.zeros_like(v.value)
            for v in self.z_vars
        ])
        if not params:
            return d_in
        d_theta = ParamSet(
            (k, grads[v.index] if grads[v.index] is not None else np.zeros_like(v.value))
            for k, v in self.p_vars.items()
        )
        return GradBundle(d_theta, d_in)


class PyramidTransform:
    def __init__(self, config: TransformConfig, params: ParamSet):
        self.config = config
        expected = param_layout(config)
        got = params.layout()
        if dict(got) != dict(expected) or len(got) != len(expected):
            missing = set(dict(expected)) ^ set(dict(got))
            raise ShapeError(f"parameter set does not match config (mismatched: {sorted(missing)[:5]})")
        self.params = ParamSet((k, params[k]) for k, _ in expected)

    def with_params(self, params: ParamSet) -> "PyramidTransform":
        return PyramidTransform(self.config, params)

    def _check_input(self, z: FeaturePyramid):
        if len(z) != self.config.levels or z.channels != self.config.channels:
            raise ShapeError(
                f"transform expects {self.config.levels} levels of {self.config.channels} channels, "
                f"got {len(z)} levels of {z.channels}"
            )

    def _check_mask(self, z: FeaturePyramid, mask):
        self._check_input(z)
        if self.config.dropout_rate > 0 and mask is None:
            raise ValueError("dropout_rate > 0 requires a fixed dropout mask for the solve")
        if mask is None:
            return None
        if len(mask) != len(z):
            raise ShapeError(f"mask has {len(mask)} levels, pyramid has {len(z)}")
        return [np.asarray(m, dtype=np.float64) for m in mask]

    def __call__(self, z: FeaturePyramid, mask=None) -> FeaturePyramid:
        return apply(self, z, mask)

    def trace(self, z: FeaturePyramid, mask=None) -> TransformTrace:
        return TransformTrace(self, z, mask)


def apply(G: PyramidTransform, z: FeaturePyramid, rng_mask=None) -> FeaturePyramid:
    mask = G._check_mask(z, rng_mask)
    return FeaturePyramid(_Builder(Eager(), G.config, dict(G.params))(list(z), mask))


def vjp_transform(G: PyramidTransform, z: FeaturePyramid, u: FeaturePyramid, rng_mask=None) -> GradBundle:
    return G.trace(z, rng_mask).vjp(u)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_layout(cfg: TransformConfig) -> list[tuple[str, tuple[int, ...]]]:
    c = cfg.channels
    out = []
    for s in conv_specs(cfg):
        kshape = (s.kernel, s.kernel, c, c)
        if cfg.weight_norm:
            out += [(s.name + ".v", kshape), (s.name + ".g", (c,))]
        else:
            out.append((s.name + ".w", kshape))
        out.append((s.name + ".b", (c,)))
    for name in norm_names(cfg):
        out += [(name + ".gamma", (c,)), (name + ".beta", (c,))]
    return out


def _standard_init(cfg: TransformConfig, rng: np.random.Generator) -> ParamSet:
    c = cfg.channels
    seg = []
    for s in conv_specs(cfg):
        bound = 1.0 / np.sqrt(s.kernel * s.kernel * c)
        v = rng.uniform(-bound, bound, size=(s.kernel, s.kernel, c, c))
        if cfg.weight_norm:
            seg += [(s.name + ".v", v), (s.name + ".g", np.sqrt((v * v).sum(axis=(0, 1, 2))))]
        else:
            seg.append((s.name + ".w", v))
        seg.append((s.name + ".b", np.zeros(c)))
    for name in norm_names(cfg):
        seg += [(name + ".gamma", np.ones(c)), (name + ".beta", np.zeros(c))]
    return ParamSet(seg)


def scale_output_gains(G: PyramidTransform, factor: float) -> PyramidTransform:
    """Multiply the gain of every output-stage convolution by ``factor``.

    With zero biases G is positively homogeneous in these gains, so its
    Lipschitz constant scales by exactly ``factor``.
    """
    names = output_gain_names(G.config)
    return G.with_params(G.params.with_values({k: G.params[k] * factor for k in names}))


def probe_shape(cfg: TransformConfig) -> tuple[int, int]:
    side = max(16, 2 ** cfg.levels)
    return side, side


def lipschitz_probe(
    G: PyramidTransform,
    rng: np.random.Generator,
    n_pairs: int = 100,
    size: tuple[int, int] | None = None,
    rel_step: float = 1e-2,
) -> float:
    """Max over random nearby pairs (z, z + d) of ||G(z) - G(z + d)|| / ||d||.

    The base points have unit RMS; ``d`` has norm ``rel_step * ||z||``.
    Each pair occupies one batch slot, so all pairs go through G at once.
    """
    cfg = G.config
    h, w = size or probe_shape(cfg)
    z = FeaturePyramid.random(rng, n_pairs, cfg.channels, h, w, cfg.levels)
    d = FeaturePyramid.random(rng, n_pairs, cfg.channels, h, w, cfg.levels)

    def per_sample_norm(p):
        return np.sqrt(sum((a * a).sum(axis=(1, 2, 3)) for a in p))

    scale = rel_step * per_sample_norm(z) / per_sample_norm(d)
    d = FeaturePyramid([a * scale[:, None, None, None] for a in d])
    mask = None
    if cfg.dropout_rate > 0:
        mask = [np.ones((n_pairs, cfg.channels, 1, 1))] * cfg.levels
    diff = G(z, mask) - G(z + d, mask)
    return float(np.max(per_sample_norm(diff) / per_sample_norm(d)))


def jacobian_norm_at(
    G: PyramidTransform,
    z: FeaturePyramid,
    rng: np.random.Generator,
    iters: int = 30,
    fd_step: float = 1e-6,
    mask=None,
) -> float:
    """Power-iteration estimate of ||dG/dz||_2 at the point ``z``.

    Jacobian products use a central difference (forward) and the recorded
    trace (transpose). For a batch, G acts on each sample independently, so
    the batched operator is block diagonal and its top singular value is the
    max over samples.
    """
    tr = G.trace(z, mask)
    v = FeaturePyramid([rng.standard_normal(a.shape) for a in z])
    sigma = 0.0
    for _ in range(iters):
        v = v * (1.0 / v.norm())
        jv = (G(z + v * fd_step, mask) - G(z - v * fd_step, mask)) * (0.5 / fd_step)
        v = tr.vjp(jv, params=False)
        sigma = np.sqrt(v.norm())
        if sigma == 0.0:
            break
    return float(sigma)


def jacobian_norm_probe(
    G: PyramidTransform,
    rng: np.random.Generator,
    n_points: int = 4,
    iters: int = 30,
    size: tuple[int, int] | None = None,
    fd_step: float = 1e-6,
) -> float:
    """Max of ||dG/dz||_2 over ``n_points`` random unit-RMS inputs."""
    cfg = G.config
    h, w = size or probe_shape(cfg)
    z = FeaturePyramid.random(rng, n_points, cfg.channels, h, w, cfg.levels)
    mask = None
    if cfg.dropout_rate > 0:
        mask = [np.ones((n_points, cfg.channels, 1, 1))] * cfg.levels
    return jacobian_norm_at(G, z, rng, iters, fd_step, mask)


def init_params(config: TransformConfig, seed: int, contraction: float = 0.9) -> ParamSet:
    """Seeded init: fan-in uniform directions, zero biases, unit GN affine.

    Output-stage gains are then rescaled by ``contraction / L`` where ``L``
    is the power-iteration Jacobian-norm probe of the standard init.
    """
    rng = np.random.default_rng([seed, 0])
    G = PyramidTransform(config, _standard_init(config, rng))
    lip = jacobian_norm_probe(G, np.random.default_rng([seed, 1]))
    if lip > 0:
        G = scale_output_gains(G, contraction / lip)
    return G.params


def make_transform(config: TransformConfig, seed: int, contraction: float = 0.9) -> PyramidTransform:
    return PyramidTransform(config, init_params(config, seed, contraction))


def sample_dropout_mask(config: TransformConfig, batch: int, rng: np.random.Generator):
    """Channel-wise variational mask, drawn once and reused for a whole solve."""
    p = config.dropout_rate
    keep = 1.0 - p
    return [
        (rng.random((batch, config.channels, 1, 1)) < keep) / keep
        for _ in range(config.levels)
    ]
