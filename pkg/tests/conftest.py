import numpy as np
import pytest

from fedcausal.data import summarize
from fedcausal.model import PriorConfig, SourceData
from fedcausal.variational import GlobalParams, VariationalConfig


def random_source(rng, source_id, n, d_x, truth=True):
    X = rng.uniform(-1.0, 1.0, (n, d_x))
    w = np.zeros(n)
    w[: max(2, n // 2)] = 1.0
    w = rng.permutation(w)
    y0 = X.sum(axis=1) + rng.normal(size=n)
    y1 = y0 + 1.0 + rng.normal(size=n)
    y = np.where(w == 1.0, y1, y0)
    return SourceData(source_id, w, y, X, y0 if truth else None, y1 if truth else None)


def random_sources(seed, m, n, d_x):
    rng = np.random.default_rng(seed)
    return [random_source(rng, s, n, d_x) for s in range(m)]


def jittered_theta(d_x, seed, scale=0.1, vcfg=None):
    theta = GlobalParams.initial(d_x, vcfg or VariationalConfig())
    rng = np.random.default_rng(seed)
    theta.vector = theta.vector + scale * rng.standard_normal(theta.vector.size)
    return theta


@pytest.fixture
def tiny_problem():
    sources = random_sources(7, 3, 8, 2)
    summaries = [summarize(s) for s in sources]
    return sources, summaries, PriorConfig()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
