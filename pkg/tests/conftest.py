import numpy as np
import pytest

from diffprint.diffusion import GMMDenoiser, build_schedule
from diffprint.watermark import make_key


def central_diff(f, x, h=1e-5):
    """Per-coordinate central differences of scalar f at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def toy_gmm(seed=0, D=16, components=4, sigma2=0.25, T=25, offset=2.0, spread=0.5):
    rng = np.random.default_rng(seed)
    center = offset * rng.standard_normal(D)
    means = center + spread * rng.standard_normal((components, D))
    return GMMDenoiser(np.full(components, 1.0 / components), means, sigma2, build_schedule(T))


@pytest.fixture
def gmm():
    return toy_gmm(0)


@pytest.fixture
def key():
    return make_key(7, 16, 16)


# ---- acceptance summary ----------------------------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
