import numpy as np
import pytest

from soda_sched.ofs import build_tables
from soda_sched.toy_dit import ToyDitConfig, build_model

TINY = dict(total_steps=8, layers=2, token_count=6, hidden_dim=8, heads=2)


@pytest.fixture(scope="session")
def tiny_model():
    return build_model(ToyDitConfig(**TINY))


@pytest.fixture(scope="session")
def tiny_tables(tiny_model):
    return build_tables(tiny_model, samples=3, n_max=4)


@pytest.fixture(scope="session")
def toy_model():
    return build_model(ToyDitConfig())


@pytest.fixture(scope="session")
def toy_tables_small(toy_model):
    """Default toy model, 4 samples: enough for structural checks."""
    return build_tables(toy_model, samples=4)


@pytest.fixture(scope="session")
def toy_tables(toy_model):
    """Default toy model at the production sample count (S=32)."""
    return build_tables(toy_model, samples=32)


@pytest.fixture(scope="session")
def t21_tables():
    model = build_model(ToyDitConfig(total_steps=21))
    return build_tables(model, samples=4, n_max=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def forge_tables(T, L=1, n_max=None, caching=None, pruning=0.0, std=0.0,
                 alpha_grid=None, sample_count=1, fingerprint=b"\x00" * 32):
    """Hand-built tables. ``caching(t, l, m, n)`` and ``pruning(t, l, m, alpha)``
    may be callables or constants."""
    from soda_sched.ofs import DEFAULT_ALPHA_GRID, SensitivityTables

    n_max = n_max or T - 1
    grid = np.asarray(alpha_grid if alpha_grid is not None else DEFAULT_ALPHA_GRID, float)
    cm = np.full((T, L, 2, n_max), np.nan, dtype=np.float32)
    pm = np.full((T, L, 2, len(grid)), np.nan, dtype=np.float32)
    for t in range(1, T + 1):
        for l in range(1, L + 1):
            for m in (0, 1):
                for n in range(1, n_max + 1):
                    if t + n <= T:
                        cm[t - 1, l - 1, m, n - 1] = caching(t, l, m, n) if callable(caching) else (caching or 0.0)
                if t < T:
                    for k, a in enumerate(grid):
                        pm[t - 1, l - 1, m, k] = pruning(t, l, m, a) if callable(pruning) else pruning
    cs = np.where(np.isnan(cm), np.nan, std).astype(np.float32)
    ps = np.where(np.isnan(pm), np.nan, std).astype(np.float32)
    cfg = ToyDitConfig(total_steps=T, layers=L)
    return SensitivityTables(cm, cs, pm, ps, grid, n_max, sample_count, fingerprint, cfg).validate()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
