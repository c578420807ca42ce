"""Tape-based reverse mode for the fixed primitive set.

Model code is written once against a small context interface::

    ctx.input(array)            -> handle
    ctx.call(op, *handles, **attrs) -> handle

``Eager`` evaluates directly on arrays; ``Tape`` additionally records every
primitive with its saved intermediates so the recording can be replayed
backwards with any number of cotangents.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from . import tensor_core as tc
from .tensor_core import FeaturePyramid, FlatVector, ShapeError


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamSet(Mapping[str, np.ndarray]):
    """Ordered, named parameter arrays with a canonical flat view."""

    def __init__(self, segments=()):
        items = segments.items() if isinstance(segments, Mapping) else segments
        self._data: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, value in items:
            if name in self._data:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._data[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name):
        return self._data[name]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    @property
    def size(self) -> int:
        return sum(a.size for a in self._data.values())

    def layout(self) -> tc.Layout:
        return tuple((k, v.shape) for k, v in self._data.items())

    def flat(self) -> FlatVector:
        return tc.pack_arrays(list(self._data.items()))

    @classmethod
    def from_flat(cls, v: FlatVector | np.ndarray, layout: tc.Layout | None = None) -> "ParamSet":
        layout = v.layout if layout is None else layout
        return cls(tc.unpack_arrays(v, layout))

    def replace(self, **updates) -> "ParamSet":
        new = OrderedDict(self._data)
        for k, v in updates.items():
            if k not in new:
                raise KeyError(k)
            new[k] = v
        return ParamSet(new)

    def with_values(self, values: Mapping[str, np.ndarray]) -> "ParamSet":
        """Copy with some segments swapped (names must already exist)."""
        new = OrderedDict(self._data)
        for k, v in values.items():
            if k not in new:
                raise KeyError(k)
            if np.shape(v) != new[k].shape:
                raise ShapeError(f"{k}: shape {np.shape(v)} != {new[k].shape}")
            new[k] = v
        return ParamSet(new)

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self._data.items())

    def __add__(self, other: "ParamSet") -> "ParamSet":
        return ParamSet((k, v + other[k]) for k, v in self._data.items())

    def __mul__(self, a: float) -> "ParamSet":
        return ParamSet((k, v * a) for k, v in self._data.items())

    __rmul__ = __mul__

    def __repr__(self):
        return f"ParamSet({', '.join(f'{k}{v.shape}' for k, v in self._data.items())})"


@dataclass
class GradBundle:
    """Gradients of a scalar w.r.t. the parameters and the input pyramid."""

    d_theta: ParamSet
    d_input: FeaturePyramid

    def __mul__(self, a: float) -> "GradBundle":
        return GradBundle(self.d_theta * a, self.d_input * a)

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    name: str
    n_inputs: int  # leading arguments that are activations; the rest are parameters
    forward: Callable[..., tuple[np.ndarray, Any]]
    vjp: Callable[..., tuple]


def _conv_fwd(x, w, b, stride=1):
    return tc.conv2d(x, w, b, stride), None


def _conv_vjp(u, saved, args, need, stride=1):
    x, w, _ = args
    return tc.conv2d_vjp(u, x, w, stride, need)


def _up_fwd(x, mode="nearest"):
    return tc.upsample(x, mode), None


def _up_vjp(u, saved, args, need, mode="nearest"):
    return (tc.upsample_vjp(u, args[0].shape, mode),)


def _gn_fwd(x, gamma, beta, groups=1, eps=tc.GN_EPS):
    xhat, inv_std = tc.group_norm_stats(x, groups, eps)
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv_std)


def _gn_vjp(u, saved, args, need, groups=1, eps=tc.GN_EPS):
    xhat, inv_std = saved
    return tc.group_norm_vjp(u, xhat, inv_std, args[1], groups)


def _relu_fwd(x):
    return tc.relu(x), None


def _relu_vjp(u, saved, args, need):
    return (u * (args[0] > 0),)


def _add_fwd(x, y):
    return tc.add(x, y), None


def _add_vjp(u, saved, args, need):
    return (u, u)


def _scale_fwd(x, a=1.0):
    return tc.scale(x, a), None


def _scale_vjp(u, saved, args, need, a=1.0):
    return (u * a,)


def _wn_fwd(v, g):
    norms = np.sqrt((v * v).sum(axis=(0, 1, 2)))
    if np.any(norms == 0):
        raise ValueError("weight normalisation needs a non-zero direction for every output channel")
    vhat = v / norms
    return vhat * g, (vhat, norms)


def _wn_vjp(u, saved, args, need):
    vhat, norms = saved
    g = args[1]
    proj = (u * vhat).sum(axis=(0, 1, 2))
    dv = (g / norms) * (u - vhat * proj) if need[0] else None
    return dv, proj if need[1] else None


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in (
        Primitive("conv2d", 1, _conv_fwd, _conv_vjp),
        Primitive("upsample", 1, _up_fwd, _up_vjp),
        Primitive("group_norm", 1, _gn_fwd, _gn_vjp),
        Primitive("relu", 1, _relu_fwd, _relu_vjp),
        Primitive("add", 2, _add_fwd, _add_vjp),
        Primitive("scale", 1, _scale_fwd, _scale_vjp),
        Primitive("weight_norm", 0, _wn_fwd, _wn_vjp),
    )
}


def weight_normalize(v, g) -> np.ndarray:
    """Effective kernel g * v / ||v|| with norms taken per output channel."""
    return _wn_fwd(np.asarray(v, dtype=np.float64), np.asarray(g, dtype=np.float64))[0]


# ---------------------------------------------------------------------------
# evaluation contexts
# ---------------------------------------------------------------------------

class Eager:
    """Evaluates primitives immediately; handles are plain arrays."""

    def input(self, value, name: str | None = None):
        return np.asarray(value, dtype=np.float64)

    def call(self, op: str, *args, **attrs):
        try:
            prim = PRIMITIVES[op]
        except KeyError:
            raise ValueError(f"unknown primitive {op!r}") from None
        return prim.forward(*args, **attrs)[0]

    def value(self, h):
        return h


@dataclass(frozen=True)
class Var:
    index: int
    value: np.ndarray = field(repr=False, compare=False)


@dataclass
class TraceEntry:
    op: str
    args: tuple[int, ...]
    out: int
    saved: Any
    attrs: dict
    out_shape: tuple[int, ...] = ()


class Tape:
    """Records executed primitives (an evaluation trace) for reverse replay."""

    def __init__(self):
        self.entries: list[TraceEntry] = []
        self.values: list[np.ndarray] = []
        self.names: dict[str, Var] = {}

    def _new(self, value) -> Var:
        v = Var(len(self.values), value)
        self.values.append(value)
        return v

    def input(self, value, name: str | None = None) -> Var:
        v = self._new(np.asarray(value, dtype=np.float64))
        if name is not None:
            self.names[name] = v
        return v

    def call(self, op: str, *args: Var, **attrs) -> Var:
        try:
            prim = PRIMITIVES[op]
        except KeyError:
            raise ValueError(f"unknown primitive {op!r}") from None
        out, saved = prim.forward(*(a.value for a in args), **attrs)
        v = self._new(out)
        self.entries.append(
            TraceEntry(op, tuple(a.index for a in args), v.index, saved, attrs, out.shape)
        )
        return v

    def value(self, h: Var):
        return h.value

    def backward(self, seeds: Mapping[Var, np.ndarray], wanted: Iterable[Var] | None = None):
        """Replay the trace in reverse, returning a list of cotangents per var.

        Only gradients flowing to ``wanted`` leaves are computed when given;
        unreachable entries are skipped entirely.
        """
        n = len(self.values)
        live = np.ones(n, dtype=bool)
        if wanted is not None:
            live[:] = False
            for w in wanted:
                live[w.index] = True
            for e in self.entries:
                if live[list(e.args)].any():
                    live[e.out] = True
        grads: list[np.ndarray | None] = [None] * n
        for var, u in seeds.items():
            u = np.asarray(u, dtype=np.float64)
            if u.shape != var.value.shape:
                raise ShapeError(f"cotangent shape {u.shape} != value shape {var.value.shape}")
            grads[var.index] = u if grads[var.index] is None else grads[var.index] + u
        for e in reversed(self.entries):
            u = grads[e.out]
            if u is None or not live[e.out]:
                continue
            need = tuple(bool(live[i]) for i in e.args)
            cots = vjp_entry(e, u, [self.values[i] for i in e.args], need)
            for i, c, nd in zip(e.args, cots, need):
                if nd and c is not None:
                    grads[i] = c if grads[i] is None else grads[i] + c
        return grads


def vjp_entry(entry: TraceEntry, u, args, need=None):
    try:
        prim = PRIMITIVES[entry.op]
    except KeyError:
        raise ValueError(f"unknown primitive {entry.op!r}") from None
    if need is None:
        need = (True,) * len(args)
    return prim.vjp(u, entry.saved, args, need, **entry.attrs)


def vjp_primitive(op: str, entry: TraceEntry, cotangent, args):
    """(input cotangents, parameter cotangents) of one recorded primitive."""
    if op not in PRIMITIVES:
        raise ValueError(f"unknown primitive {op!r}")
    if entry.op != op:
        raise ValueError(f"trace entry records {entry.op!r}, not {op!r}")
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != entry.out_shape:
        raise ShapeError(f"cotangent shape {cot.shape} != output shape {entry.out_shape}")
    grads = tuple(vjp_entry(entry, cot, args))
    n_in = PRIMITIVES[op].n_inputs
    return grads[:n_in], grads[n_in:]


def record(op: str, *args, **attrs) -> tuple[Tape, TraceEntry, list[np.ndarray]]:
    """Run one primitive on a fresh tape; returns the tape, entry and arg values."""
    tape = Tape()
    handles = [tape.input(a) for a in args]
    tape.call(op, *handles, **attrs)
    return tape, tape.entries[-1], [h.value for h in handles]
