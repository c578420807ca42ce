import numpy as np
import pytest

from ifpn.autodiff import GradBundle, ParamSet
from ifpn.tensor_core import FeaturePyramid, pack, unpack
from ifpn.transform import TransformConfig, make_transform


def rel_err(a, b, floor=1e-12):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numerical_grad(f, x, h=1e-6):
    """Central-difference gradient of the scalar function f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def one_level(vec):
    """A single-level pyramid holding a flat vector as (1, d, 1, 1)."""
    vec = np.asarray(vec, dtype=np.float64)
    return FeaturePyramid([vec.reshape(1, -1, 1, 1)])


def flat(p):
    return pack(p).data


class _LinearTrace:
    def __init__(self, G, z):
        self.G, self.z = G, z
        self.output = G(z)

    def vjp(self, u, params=True):
        d_in = unpack(self.G.A.T @ flat(u), u.layout())
        if not params:
            return d_in
        return GradBundle(self.G.param_grad(self.z, u), d_in)


class AffineMap:
    """G(z) = A z + c on a one-level pyramid; stand-in with the transform interface."""

    def __init__(self, A, c):
        self.A = np.asarray(A, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.float64)
        self.params = ParamSet([("c", self.c)])

    def __call__(self, z, mask=None):
        return unpack(self.A @ flat(z) + self.c, z.layout())

    def trace(self, z, mask=None):
        return _LinearTrace(self, z)

    def param_grad(self, z, u):
        return ParamSet([("c", flat(u))])


class ScalarLinear:
    """G(z; theta) = theta * z applied elementwise."""

    def __init__(self, theta, d=1):
        self.theta = float(theta)
        self.A = self.theta * np.eye(d)
        self.params = ParamSet([("theta", np.array([self.theta]))])

    def with_params(self, params):
        return ScalarLinear(params["theta"][0], self.A.shape[0])

    def __call__(self, z, mask=None):
        return z * self.theta

    def trace(self, z, mask=None):
        return _LinearTrace(self, z)

    def param_grad(self, z, u):
        return ParamSet([("theta", np.array([u.dot(z)]))])


def small_transform(variant="res_pyramid_conv", levels=2, channels=2, seed=0, groups=1, **kw):
    cfg = TransformConfig(levels=levels, channels=channels, variant=variant, groups=groups, **kw)
    return make_transform(cfg, seed)


def random_pyramid(rng, channels=2, size=4, levels=2, batch=1, rms=1.0):
    return FeaturePyramid.random(rng, batch, channels, size, size, levels, rms=rms)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
