import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_splits():
    from eenas import data

    ds = data.generate_synthetic(7, 24)
    return data.split_and_batch(ds, batch_size=32, seed=7, support_per_class=4)


def make_entries(n, seed=0):
    """Valid archive entries with distinct random genomes and consistent exit figures."""
    from eenas import archive as arc
    from eenas import model as mdl

    r = np.random.default_rng(seed)
    out, keys = [], set()
    while len(out) < n:
        g = mdl.random_genome(r)
        if g.key() in keys:
            continue
        keys.add(g.key())
        B = int(r.integers(1, 5))
        gamma = np.cumsum(r.uniform(1e5, 8e5, size=B))
        util = r.dirichlet(np.ones(B))
        out.append(
            arc.ArchiveEntry(
                genome=g.chromosome(),
                accuracy=float(r.uniform(0.3, 0.99)),
                macs=float(np.clip(util @ gamma, gamma[0], gamma[-1])),
                thresholds=[round(float(t), 1) for t in r.integers(0, 10, size=B - 1) / 10],
                utilization=util.tolist(),
                gamma=gamma.tolist(),
                seed=int(r.integers(2**31)),
                backbone_accuracy=float(r.uniform(0.3, 0.99)),
                ece=r.uniform(0, 20, size=B).tolist(),
                epochs=8,
                iteration=int(r.integers(0, 4)),
            )
        )
    return out


@pytest.fixture
def entries():
    return make_entries(12, seed=3)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
