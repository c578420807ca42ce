"""Dense 4-D array primitives and the feature-pyramid container.

Arrays are plain ``numpy.ndarray`` objects in NCHW layout, float64.
Convolution kernels are laid out ``(K, K, C_in, C_out)`` and applied as
cross-correlation.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

GN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when array or pyramid layouts do not line up."""


def as_array4(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D (N, C, H, W) array, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_geometry(x: np.ndarray, w: np.ndarray, stride: int) -> tuple[int, int, int]:
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"kernel must be (K, K, C_in, C_out), got {w.shape}")
    k = w.shape[0]
    if k not in (1, 3):
        raise ShapeError(f"kernel size must be 1 or 3, got {k}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if x.shape[1] != w.shape[2]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {w.shape[2]} "
            f"(x {x.shape}, w {w.shape})"
        )
    h, wd = x.shape[2], x.shape[3]
    if stride == 2 and (h % 2 or wd % 2):
        raise ShapeError(f"stride-2 convolution needs even spatial dims, got {h}x{wd}")
    return k, (k - 1) // 2, stride


def _taps(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    # (N, K*K*C, Ho*Wo): every kernel tap's shifted window, stacked tap-major
    n, c = xp.shape[:2]
    t = np.stack(
        [xp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] for ki in range(k) for kj in range(k)],
        axis=1,
    )
    return t.reshape(n, k * k * c, ho * wo)


def conv2d(x, w, b=None, stride: int = 1) -> np.ndarray:
    """Zero-padded "same" cross-correlation; stride 2 halves H and W exactly."""
    x = as_array4(x)
    w = np.asarray(w, dtype=np.float64)
    k, pad, s = _conv_geometry(x, w, stride)
    n, c, h, wd = x.shape
    ho, wo = h // s, wd // s
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cout = w.shape[3]
    out = np.matmul(w.reshape(k * k * c, cout).T, _taps(xp, k, s, ho, wo))
    out = out.reshape(n, cout, ho, wo)
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (cout,):
            raise ShapeError(f"bias must have shape ({cout},), got {b.shape}")
        out += b[None, :, None, None]
    return out


def conv2d_vjp(u, x, w, stride: int = 1, need=(True, True, True)):
    """Cotangents of conv2d w.r.t. (x, w, b) for output cotangent ``u``.

    Entries of ``need`` that are False come back as None.
    """
    k, pad, s = _conv_geometry(x, w, stride)
    n, c, h, wd = x.shape
    ho, wo = h // s, wd // s
    cout = w.shape[3]
    u2 = u.reshape(n, cout, ho * wo)
    gx = gw = gb = None
    if need[0]:
        gt = np.matmul(w.reshape(k * k * c, cout), u2).reshape(n, k * k, c, ho, wo)
        gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        for t, (ki, kj) in enumerate((ki, kj) for ki in range(k) for kj in range(k)):
            gxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += gt[:, t]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    if need[1]:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        taps = _taps(xp, k, s, ho, wo)
        gw = np.matmul(taps, u2.transpose(0, 2, 1)).sum(axis=0).reshape(k, k, c, cout)
    if need[2]:
        gb = u.sum(axis=(0, 2, 3))
    return gx, gw, gb


# ---------------------------------------------------------------------------
# upsampling
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _bilinear_matrix(size: int) -> np.ndarray:
    # align_corners=False, half-pixel centres, source coordinate clamped at 0
    out = 2 * size
    m = np.zeros((out, size))
    for i in range(out):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, size - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.setflags(write=False)
    return m


def upsample(x, mode: str = "nearest", factor: int = 2) -> np.ndarray:
    x = as_array4(x)
    if factor != 2:
        raise ShapeError(f"only factor 2 is supported, got {factor}")
    if mode == "nearest":
        return x.repeat(2, axis=2).repeat(2, axis=3)
    if mode == "bilinear":
        mh = _bilinear_matrix(x.shape[2])
        mw = _bilinear_matrix(x.shape[3])
        return mh @ (x @ mw.T)
    raise ValueError(f"unknown upsampling mode {mode!r}")


def upsample_vjp(u, x_shape, mode: str = "nearest") -> np.ndarray:
    n, c, h, w = x_shape
    if mode == "nearest":
        return u.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
    if mode == "bilinear":
        mh = _bilinear_matrix(h)
        mw = _bilinear_matrix(w)
        return mh.T @ (u @ mw)
    raise ValueError(f"unknown upsampling mode {mode!r}")


# ---------------------------------------------------------------------------
# group normalisation
# ---------------------------------------------------------------------------

def _check_groups(x: np.ndarray, groups: int) -> None:
    if groups < 1 or x.shape[1] % groups:
        raise ShapeError(f"{x.shape[1]} channels cannot be split into {groups} groups")


def group_norm_stats(x, groups: int, eps: float = GN_EPS):
    """Return (x_hat, inv_std) with x_hat shaped like x and inv_std (N, G, 1)."""
    x = as_array4(x)
    _check_groups(x, groups)
    n = x.shape[0]
    xg = x.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return ((xg - mean) * inv_std).reshape(x.shape), inv_std


def group_norm(x, groups: int, gamma, beta, eps: float = GN_EPS) -> np.ndarray:
    xhat, _ = group_norm_stats(x, groups, eps)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    return xhat * gamma[None, :, None, None] + beta[None, :, None, None]


def group_norm_vjp(u, xhat, inv_std, gamma, groups: int):
    n = u.shape[0]
    gamma_g = (u * xhat).sum(axis=(0, 2, 3))
    beta_g = u.sum(axis=(0, 2, 3))
    dxhat = (u * gamma[None, :, None, None]).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    dx = inv_std * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
    return dx.reshape(u.shape), gamma_g, beta_g


# ---------------------------------------------------------------------------
# element-wise
# ---------------------------------------------------------------------------

def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def add(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"cannot add arrays of shapes {x.shape} and {y.shape}")
    return x + y


def scale(x, a) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * a


# ---------------------------------------------------------------------------
# flat vectors and pyramids
# ---------------------------------------------------------------------------

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True)
class FlatVector:
    data: np.ndarray
    layout: Layout

    def __post_init__(self):
        total = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.data.ndim != 1 or self.data.size != total:
            raise ShapeError(
                f"flat vector of length {self.data.size} does not match layout volume {total}"
            )


def pack_arrays(named: Sequence[tuple[str, np.ndarray]]) -> FlatVector:
    layout = tuple((name, tuple(a.shape)) for name, a in named)
    if not named:
        return FlatVector(np.zeros(0), layout)
    return FlatVector(np.concatenate([np.ravel(a) for _, a in named]).astype(np.float64), layout)


def unpack_arrays(v, layout: Layout) -> list[tuple[str, np.ndarray]]:
    data = np.asarray(v.data if isinstance(v, FlatVector) else v, dtype=np.float64)
    total = sum(int(np.prod(shape)) for _, shape in layout)
    if data.ndim != 1 or data.size != total:
        raise ShapeError(f"vector of length {data.size} does not match layout volume {total}")
    out, pos = [], 0
    for name, shape in layout:
        size = int(np.prod(shape))
        out.append((name, data[pos:pos + size].reshape(shape).copy()))
        pos += size
    return out


class FeaturePyramid:
    """Ordered levels of (N, C, H, W) arrays; each level halves H and W."""

    __slots__ = ("levels",)

    def __init__(self, levels: Sequence[np.ndarray]):
        levels = tuple(as_array4(a) for a in levels)
        if not levels:
            raise ShapeError("a pyramid needs at least one level")
        n, c = levels[0].shape[:2]
        for i, (lo, hi) in enumerate(zip(levels, levels[1:]), start=1):
            if hi.shape[:2] != (n, c):
                raise ShapeError(
                    f"level {i + 1} has batch/channels {hi.shape[:2]}, expected {(n, c)}"
                )
            if lo.shape[2] % 2 or lo.shape[3] % 2 or hi.shape[2:] != (lo.shape[2] // 2, lo.shape[3] // 2):
                raise ShapeError(
                    f"level {i + 1} spatial dims {hi.shape[2:]} are not half of level {i} {lo.shape[2:]}"
                )
        self.levels = levels

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int, n_levels: int):
        if height % 2 ** (n_levels - 1) or width % 2 ** (n_levels - 1):
            raise ShapeError(f"{height}x{width} is not divisible by 2^{n_levels - 1}")
        return cls([np.zeros((batch, channels, height >> l, width >> l)) for l in range(n_levels)])

    @classmethod
    def random(cls, rng: np.random.Generator, batch, channels, height, width, n_levels, rms=1.0):
        z = cls.zeros(batch, channels, height, width, n_levels)
        return cls([rms * rng.standard_normal(a.shape) for a in z])

    def zeros_like(self) -> "FeaturePyramid":
        return FeaturePyramid([np.zeros_like(a) for a in self.levels])

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(a.shape for a in self.levels)

    @property
    def batch(self) -> int:
        return self.levels[0].shape[0]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.levels)

    def __len__(self):
        return len(self.levels)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.levels)

    def __getitem__(self, i) -> np.ndarray:
        return self.levels[i]

    def _check(self, other: "FeaturePyramid"):
        if not isinstance(other, FeaturePyramid):
            return NotImplemented
        if self.shapes != other.shapes:
            raise ShapeError(f"pyramid layouts differ: {self.shapes} vs {other.shapes}")
        return None

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return FeaturePyramid([a + b for a, b in zip(self.levels, other.levels)])

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return FeaturePyramid([a - b for a, b in zip(self.levels, other.levels)])

    def __mul__(self, a: float):
        return FeaturePyramid([x * a for x in self.levels])

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def dot(self, other: "FeaturePyramid") -> float:
        self._check(other)
        return float(sum(np.vdot(a, b) for a, b in zip(self.levels, other.levels)))

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(a, a) for a in self.levels)))

    def layout(self) -> Layout:
        return tuple((f"level{i + 1}", a.shape) for i, a in enumerate(self.levels))

    def pack(self) -> FlatVector:
        return pack(self)

    def __repr__(self):
        return f"FeaturePyramid({[a.shape for a in self.levels]})"


def pack(p: FeaturePyramid) -> FlatVector:
    return pack_arrays([(f"level{i + 1}", a) for i, a in enumerate(p.levels)])


def unpack(v, layout: Layout) -> FeaturePyramid:
    return FeaturePyramid([a for _, a in unpack_arrays(v, layout)])


def add_pyramids(p: FeaturePyramid, q: FeaturePyramid) -> FeaturePyramid:
    return p + q
