import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` over every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def naive_conv2d(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(n):
        for o in range(cout):
            for r in range(oh):
                for c in range(ow):
                    patch = xp[i, :, r * stride : r * stride + kh, c * stride : c * stride + kw]
                    out[i, o, r, c] = np.sum(patch * w[o]) + (0.0 if b is None else b[o])
    return out


def naive_transpose_conv2d(x, w, b, stride, pad):
    """Direct scatter: every input pixel stamps its weighted kernel into the output."""
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    full_h, full_w = (h - 1) * stride + kh, (wd - 1) * stride + kw
    out = np.zeros((n, cout, full_h, full_w))
    for i in range(n):
        for ci in range(cin):
            for r in range(h):
                for c in range(wd):
                    out[i, :, r * stride : r * stride + kh, c * stride : c * stride + kw] += x[i, ci, r, c] * w[ci]
    out = out[:, :, pad : full_h - pad, pad : full_w - pad]
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
