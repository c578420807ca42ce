"""Tiny trainable encoder, per-level 1x1 head and the MSE loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Eager, ParamSet, Tape
from ..tensor_core import FeaturePyramid, ShapeError
from ..transform import PyramidTransform


def encoder_layout(levels: int, channels: int, in_channels: int = 1):
    out = [("enc.conv0.w", (3, 3, in_channels, channels)), ("enc.conv0.b", (channels,)),
           ("enc.gn0.gamma", (channels,)), ("enc.gn0.beta", (channels,))]
    for l in range(1, levels):
        out += [(f"enc.down{l}.w", (3, 3, channels, channels)), (f"enc.down{l}.b", (channels,)),
                (f"enc.gn{l}.gamma", (channels,)), (f"enc.gn{l}.beta", (channels,))]
    return out


def head_layout(levels: int, channels: int):
    out = []
    for l in range(1, levels + 1):
        out += [(f"head{l}.w", (1, 1, channels, 1)), (f"head{l}.b", (1,))]
    return out


def init_encoder(levels: int, channels: int, rng: np.random.Generator, in_channels: int = 1) -> ParamSet:
    seg = []
    for name, shape in encoder_layout(levels, channels, in_channels):
        if name.endswith(".w"):
            fan_in = shape[0] * shape[1] * shape[2]
            seg.append((name, rng.uniform(-1, 1, size=shape) * np.sqrt(6.0 / fan_in)))
        elif name.endswith(".gamma"):
            seg.append((name, np.ones(shape)))
        else:
            seg.append((name, np.zeros(shape)))
    return ParamSet(seg)


def init_head(levels: int, channels: int, rng: np.random.Generator) -> ParamSet:
    seg = []
    for name, shape in head_layout(levels, channels):
        if name.endswith(".w"):
            seg.append((name, rng.uniform(-1, 1, size=shape) / np.sqrt(channels)))
        else:
            seg.append((name, np.zeros(shape)))
    return ParamSet(seg)


def _encode(ctx, p, image, levels: int, groups: int):
    def block(x, conv, gn, stride):
        h = ctx.call("conv2d", x, p[conv + ".w"], p[conv + ".b"], stride=stride)
        h = ctx.call("group_norm", h, p[gn + ".gamma"], p[gn + ".beta"], groups=groups)
        return ctx.call("relu", h)

    h = block(image, "enc.conv0", "enc.gn0", 1)
    out = [h]
    for l in range(1, levels):
        h = block(h, f"enc.down{l}", f"enc.gn{l}", 2)
        out.append(h)
    return out


def encode(params: ParamSet, image: np.ndarray, levels: int, groups: int = 1) -> FeaturePyramid:
    """Backbone stand-in: conv-GN-ReLU, then a stride-2 conv-GN-ReLU per extra level."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 4:
        raise ShapeError(f"image batch must be (N, C, H, W), got {image.shape}")
    if image.shape[2] % 2 ** (levels - 1) or image.shape[3] % 2 ** (levels - 1):
        raise ShapeError(f"image {image.shape[2:]} not divisible by 2^{levels - 1}")
    return FeaturePyramid(_encode(Eager(), dict(params), image, levels, groups))


def encode_with_vjp(params: ParamSet, image: np.ndarray, levels: int, groups: int = 1):
    """Encode and return ``(B, backward)`` where ``backward(d_B) -> ParamSet``."""
    tape = Tape()
    pv = {k: tape.input(v) for k, v in params.items()}
    outs = _encode(tape, pv, tape.input(image), levels, groups)

    def backward(d_B: FeaturePyramid) -> ParamSet:
        grads = tape.backward(dict(zip(outs, d_B.levels)), list(pv.values()))
        return ParamSet((k, grads[v.index] if grads[v.index] is not None else np.zeros_like(v.value))
                        for k, v in pv.items())

    return FeaturePyramid([o.value for o in outs]), backward


def head_and_loss(head: ParamSet, P: FeaturePyramid, target: FeaturePyramid):
    """Per-level 1x1 conv head and MSE averaged over levels and elements.

    Returns ``(loss, dL/dP, dL/dhead)``.
    """
    if len(P) != len(target) or P.batch != target.batch:
        raise ShapeError(f"pyramid {P.shapes} does not match target {target.shapes}")
    tape = Tape()
    hv = {k: tape.input(v) for k, v in head.items()}
    pv = [tape.input(a) for a in P]
    preds = [tape.call("conv2d", x, hv[f"head{l}.w"], hv[f"head{l}.b"]) for l, x in enumerate(pv, start=1)]
    n = len(P)
    loss = 0.0
    seeds = {}
    for pred, t in zip(preds, target):
        if pred.value.shape != t.shape:
            raise ShapeError(f"prediction {pred.value.shape} vs target {t.shape}")
        r = pred.value - t
        loss += float(np.mean(r * r)) / n
        seeds[pred] = 2.0 * r / (n * r.size)
    grads = tape.backward(seeds)
    g = FeaturePyramid([grads[v.index] for v in pv])
    d_head = ParamSet((k, grads[v.index]) for k, v in hv.items())
    return loss, g, d_head


def per_sample_losses(head: ParamSet, P: FeaturePyramid, target: FeaturePyramid) -> np.ndarray:
    n = len(P)
    out = np.zeros(P.batch)
    for l, (x, t) in enumerate(zip(P, target), start=1):
        w, b = head[f"head{l}.w"], head[f"head{l}.b"]
        pred = np.einsum("nchw,co->nohw", x, w[0, 0]) + b[None, :, None, None]
        out += ((pred - t) ** 2).mean(axis=(1, 2, 3)) / n
    return out


@dataclass
class Model:
    encoder: ParamSet
    transform: PyramidTransform
    head: ParamSet

    @property
    def levels(self) -> int:
        return self.transform.config.levels

    @property
    def groups(self) -> int:
        return self.transform.config.groups

    def encode(self, images) -> FeaturePyramid:
        return encode(self.encoder, images, self.levels, self.groups)
