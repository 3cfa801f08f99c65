import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soda_sched.errors import AbsentCellError, ConfigError, RangeError, ShapeError, ValidationError
from soda_sched.ofs import (
    DEFAULT_ALPHA_GRID,
    build_tables,
    caching_error_single,
    cosine_distance,
    draw_pruned_set,
    prune_count,
    pruning_error_single,
    substream,
)
from soda_sched.toy_dit import (
    ModuleKind,
    ToyDitConfig,
    build_model,
    denoise_update,
    forward_module,
    run_full_trajectory,
)

ATT, MLP = ModuleKind.ATT, ModuleKind.MLP


def _hand_cos(a, b):
    a, b = a.ravel(), b.ravel()
    return 1 - np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b))


def test_cosine_distance_basics():
    v = np.array([[1.0, 2.0], [3.0, -1.0]])
    assert cosine_distance(v, v) == 0.0
    assert cosine_distance(v, -v) == pytest.approx(2.0)
    assert cosine_distance(np.eye(3)[0], np.eye(3)[1]) == pytest.approx(1.0)
    assert cosine_distance(np.zeros(3), np.zeros(3)) == 0.0
    assert cosine_distance(np.zeros(3), np.ones(3)) == 1.0
    assert isinstance(cosine_distance(v, v + 1), float)
    with pytest.raises(ShapeError):
        cosine_distance(np.zeros(3), np.zeros(4))


@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
       st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
def test_cosine_distance_range(a, b):
    assert 0.0 <= cosine_distance(np.array(a), np.array(b)) <= 2.0


def test_prune_count_rounds_half_up():
    assert prune_count(0.01, 16) == 0
    assert prune_count(0.5, 16) == 8
    assert prune_count(0.25, 6) == 2  # 1.5 rounds up
    assert prune_count(0.9, 16) == 14


def _manual_trajectory(model, x_T):
    """Step the model by hand; returns {(t, l, m): (input, output)}."""
    x = x_T
    rec = {}
    for t in range(model.T, 0, -1):
        cond = model.condition(t)
        h = x
        for l in range(1, model.L + 1):
            for m in (ATT, MLP):
                out = forward_module(model, l, m, h, cond)
                rec[t, l, m] = (h, out)
                h = h + out
        x = denoise_update(x, model.epsilon_head(h), t, model.schedule)
    return rec


@pytest.fixture(scope="module")
def t4():
    model = build_model(ToyDitConfig(total_steps=4, layers=1, token_count=6, hidden_dim=8, heads=2))
    x_T = np.random.default_rng(3).standard_normal((6, 8))
    return model, x_T, run_full_trajectory(model, x_T, capture=True), _manual_trajectory(model, x_T)


def test_caching_error_matches_hand_evaluation(t4):
    model, _, traj, rec = t4
    got = caching_error_single(traj, 1, 1, MLP, 1)
    assert got == pytest.approx(_hand_cos(rec[2, 1, MLP][1], rec[1, 1, MLP][1]), abs=1e-12)
    with pytest.raises(AbsentCellError):
        caching_error_single(traj, 1, 1, MLP, 4)


def test_pruning_error_matches_hand_assembly(t4):
    model, _, traj, rec = t4
    for m in (ATT, MLP):
        err, gamma = pruning_error_single(model, traj, 2, 1, m, 0.5,
                                          np.random.default_rng(9), return_set=True)
        assert len(gamma) == 3
        inp, truth = rec[2, 1, m]
        kept = np.setdiff1d(np.arange(6), gamma)
        out = forward_module(model, 1, m, inp, model.condition(2), kept=kept)
        out[gamma] = rec[3, 1, m][1][gamma]
        assert err == pytest.approx(_hand_cos(out, truth), abs=1e-12)


def test_pruning_error_edges(t4):
    model, _, traj, _ = t4
    assert pruning_error_single(model, traj, 2, 1, ATT, 0.01, np.random.default_rng(0)) == 0.0
    with pytest.raises(RangeError):
        pruning_error_single(model, traj, 2, 1, ATT, 1.0, np.random.default_rng(0))
    with pytest.raises(AbsentCellError):
        pruning_error_single(model, traj, 4, 1, ATT, 0.5, np.random.default_rng(0))


def test_kept_rows_mode_mlp_is_zero(t4):
    model, _, traj, _ = t4
    err = pruning_error_single(model, traj, 2, 1, MLP, 0.5, np.random.default_rng(1),
                               compare="kept_rows")
    assert err == pytest.approx(0.0, abs=1e-12)


def test_fast_path_agrees_with_reference(tiny_model):
    x_T = substream(0, "samples", 0).standard_normal((tiny_model.n_tok, tiny_model.d))
    tab = build_tables(tiny_model, samples=1, n_max=4)
    traj = run_full_trajectory(tiny_model, x_T, capture=True)
    worst = 0.0
    for t in range(1, tiny_model.T):
        for l in range(1, tiny_model.L + 1):
            for m in (ATT, MLP):
                for k, alpha in enumerate(DEFAULT_ALPHA_GRID):
                    rng = substream(0, "gamma", 0, t, l, int(m), k)
                    ref = pruning_error_single(tiny_model, traj, t, l, m, alpha, rng)
                    worst = max(worst, abs(ref - float(tab.pruning_mean[t - 1, l - 1, m, k])))
    assert worst <= 1e-7  # float32 storage


def test_single_sample_has_zero_std(tiny_model):
    tab = build_tables(tiny_model, samples=1, n_max=3)
    assert np.nanmax(tab.caching_std) == 0.0
    assert np.nanmax(tab.pruning_std) == 0.0


def test_duplicated_sample(tiny_model):
    x = np.random.default_rng(2).standard_normal((tiny_model.n_tok, tiny_model.d))
    one = build_tables(tiny_model, samples=1, n_max=3, initial_states=[x])
    two = build_tables(tiny_model, samples=2, n_max=3, initial_states=[x, x])
    assert np.nanmax(two.caching_std) == 0.0
    assert np.array_equal(one.caching_mean, two.caching_mean, equal_nan=True)
    # std of pruning cells is not zero: gamma draws differ per sample index


def test_table_structure(toy_tables_small):
    tab = toy_tables_small
    T = tab.T
    for arr in (tab.caching_mean, tab.pruning_mean):
        v = arr[~np.isnan(arr)]
        assert v.min() >= 0 and v.max() <= 2
    t = np.arange(1, T + 1)[:, None]
    n = np.arange(1, tab.n_max + 1)[None, :]
    absent = np.isnan(tab.caching_mean[:, 0, 0, :])
    assert np.array_equal(absent, t + n > T)
    assert np.isnan(tab.pruning_mean[-1]).all()
    assert not np.isnan(tab.pruning_mean[:-1]).any()
    assert tab.caching_mean.dtype == np.float32


def test_worker_count_does_not_change_tables(tiny_model):
    a = build_tables(tiny_model, samples=3, n_max=4, jobs=1)
    b = build_tables(tiny_model, samples=3, n_max=4, jobs=3)
    assert a.identical(b)


def test_build_tables_errors(tiny_model):
    with pytest.raises(ConfigError):
        build_tables(tiny_model, samples=0)
    with pytest.raises(ConfigError):
        build_tables(tiny_model, samples=1, n_max=tiny_model.T)


def test_fingerprint_binding(tiny_tables):
    other = build_model(ToyDitConfig(total_steps=8, layers=2, token_count=6, hidden_dim=8,
                                     heads=2, seed=99))
    with pytest.raises(ValidationError):
        tiny_tables.check_model(other)


def test_cell_lookup(tiny_tables):
    assert tiny_tables.caching(1, 1, ATT, 1) == pytest.approx(float(tiny_tables.caching_mean[0, 0, 0, 0]))
    with pytest.raises(AbsentCellError):
        tiny_tables.caching(tiny_tables.T, 1, ATT, 1)
    with pytest.raises(AbsentCellError):
        tiny_tables.pruning_row(tiny_tables.T, 1, ATT)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 32), st.floats(0.01, 0.99))
def test_pruned_set_size(n_tok, alpha):
    g = draw_pruned_set(np.random.default_rng(0), n_tok, alpha)
    assert len(g) == prune_count(alpha, n_tok) == len(set(g.tolist()))
    assert np.all(np.diff(g) > 0)
