import math

import numpy as np
import pytest

from soda_sched.errors import ConfigError, NumericError, RangeError, ScheduleError, ShapeError
from soda_sched.toy_dit import (
    ModuleKind,
    NoiseSchedule,
    ToyDitConfig,
    build_model,
    denoise_update,
    forward_module,
    run_full_trajectory,
    timestep_embedding,
)

ATT, MLP = ModuleKind.ATT, ModuleKind.MLP


def test_config_rejects_bad_fields():
    with pytest.raises(ConfigError, match="hidden_dim"):
        ToyDitConfig(hidden_dim=0)
    with pytest.raises(ConfigError, match="heads"):
        ToyDitConfig(hidden_dim=30, heads=4)
    with pytest.raises(ConfigError, match="total_steps"):
        ToyDitConfig(total_steps=1)
    with pytest.raises(ConfigError, match="beta"):
        ToyDitConfig(beta_min=0.1, beta_max=0.05)


def test_config_json_round_trip(tmp_path):
    cfg = ToyDitConfig(total_steps=12, seed=7)
    cfg.save(tmp_path / "c.json")
    assert ToyDitConfig.load(tmp_path / "c.json") == cfg
    doc = cfg.to_dict()
    doc["bogus"] = 1
    with pytest.raises(ConfigError, match="unknown"):
        ToyDitConfig.from_dict(doc)


def test_build_model_deterministic():
    a = build_model(ToyDitConfig())
    b = build_model(ToyDitConfig())
    assert a.fingerprint == b.fingerprint
    for k in a.weights:
        assert np.array_equal(a.weights[k], b.weights[k])


def test_seed_changes_weights():
    a = build_model(ToyDitConfig(seed=1))
    b = build_model(ToyDitConfig(seed=2))
    assert a.fingerprint != b.fingerprint
    assert not np.array_equal(a.weights["wq"], b.weights["wq"])


def test_weights_within_init_bound(toy_model):
    bound = 1 / math.sqrt(toy_model.d)
    for w in toy_model.weights.values():
        assert np.abs(w).max() <= bound
        assert not w.flags.writeable


def test_schedule_linear():
    cfg = ToyDitConfig(total_steps=5, beta_min=0.01, beta_max=0.05)
    s = NoiseSchedule.linear(cfg)
    # t = T gets beta_min, t = 1 gets beta_max
    assert s.a[-1] == pytest.approx(0.99)
    assert s.a[0] == pytest.approx(0.95)
    assert s.abar[-1] == pytest.approx(0.99)
    assert s.abar[0] == pytest.approx(np.prod(s.a))
    assert np.all(np.diff(s.abar) > 0)


def test_timestep_embedding():
    e = timestep_embedding(1, 4)
    half = np.exp(-math.log(10000.0) * np.arange(2) / 2)
    assert np.allclose(e, np.concatenate([np.cos(half), np.sin(half)]))
    assert np.abs(e).max() <= 1
    assert np.array_equal(timestep_embedding(3, 32), timestep_embedding(3, 32))
    assert not np.array_equal(timestep_embedding(1, 32), timestep_embedding(2, 32))
    assert timestep_embedding(2, 5)[-1] == 0.0
    with pytest.raises(RangeError):
        timestep_embedding(0, 4, total_steps=10)
    with pytest.raises(RangeError):
        timestep_embedding(11, 4, total_steps=10)


def test_kept_all_matches_unrestricted(tiny_model, rng):
    x = rng.standard_normal((tiny_model.n_tok, tiny_model.d))
    cond = tiny_model.condition(3)
    for m in (ATT, MLP):
        full = forward_module(tiny_model, 1, m, x, cond)
        kept = forward_module(tiny_model, 1, m, x, cond, kept=np.arange(tiny_model.n_tok))
        assert np.allclose(full, kept, rtol=0, atol=1e-14)


def test_mlp_token_local(tiny_model, rng):
    x = rng.standard_normal((tiny_model.n_tok, tiny_model.d))
    cond = tiny_model.condition(2)
    full = forward_module(tiny_model, 2, MLP, x, cond)
    part = forward_module(tiny_model, 2, MLP, x, cond, kept=[0])
    assert np.allclose(part[0], full[0], rtol=0, atol=1e-14)  # BLAS blocking differs by shape
    assert not part[1:].any()
    y = x.copy()
    y[3] += np.linspace(-1.0, 1.0, tiny_model.d)  # a constant shift would vanish under LN
    moved = forward_module(tiny_model, 2, MLP, y, cond)
    changed = np.abs(moved - full).max(axis=1) > 1e-12
    assert changed.tolist() == [i == 3 for i in range(tiny_model.n_tok)]


def test_attention_context_restricted():
    model = build_model(ToyDitConfig(total_steps=4, layers=1, token_count=4, hidden_dim=8, heads=2))
    x = np.random.default_rng(0).standard_normal((4, 8))
    cond = model.condition(2)
    full = forward_module(model, 1, ATT, x, cond)
    part = forward_module(model, 1, ATT, x, cond, kept=[0, 1])
    assert not np.array_equal(part[0], full[0])
    wide = forward_module(model, 1, ATT, x, cond, kept=[0, 1], full_context=True)
    assert np.allclose(wide[:2], full[:2], atol=1e-14)


def test_forward_module_errors(tiny_model, rng):
    x = rng.standard_normal((tiny_model.n_tok, tiny_model.d))
    cond = tiny_model.condition(1)
    with pytest.raises(ConfigError):
        forward_module(tiny_model, 1, ATT, x, cond, kept=[])
    with pytest.raises(ShapeError):
        forward_module(tiny_model, 1, ATT, x[:, :3], cond)
    with pytest.raises(RangeError):
        forward_module(tiny_model, 1, MLP, x, cond, kept=[0, 0])
    with pytest.raises(RangeError):
        forward_module(tiny_model, 9, MLP, x, cond)


def test_denoise_update_identities(tiny_model, rng):
    s = tiny_model.schedule
    x = rng.standard_normal((3, 4))
    t = 4
    a, abar = s.a[t - 1], s.abar[t - 1]
    assert np.array_equal(denoise_update(x, np.zeros_like(x), t, s), x / np.sqrt(a))
    eps = rng.standard_normal((3, 4))
    x_t = eps * ((1 - a) / np.sqrt(1 - abar))
    assert np.allclose(denoise_update(x_t, eps, t, s), 0, atol=1e-15)


def test_denoise_update_guards_singular_schedule():
    forged = NoiseSchedule(a=np.array([1.0, 1.0]), abar=np.array([1.0, 1.0]))
    with pytest.raises(ScheduleError):
        denoise_update(np.ones((2, 2)), np.ones((2, 2)), 1, forged)


def test_trajectory_capture_counts_and_determinism():
    model = build_model(ToyDitConfig(total_steps=4, layers=2, token_count=4, hidden_dim=8, heads=2))
    x_T = np.random.default_rng(5).standard_normal((4, 8))
    a = run_full_trajectory(model, x_T, capture=True)
    b = run_full_trajectory(model, x_T)
    assert a.output_count == 16
    assert np.array_equal(a.final, b.final)
    assert np.array_equal(a.states[model.T], x_T)


def test_residual_structure(tiny_model, rng):
    x_T = rng.standard_normal((tiny_model.n_tok, tiny_model.d))
    tr = run_full_trajectory(tiny_model, x_T, capture=True)
    t = 5
    h = tr.states[t]
    for l in range(1, tiny_model.L + 1):
        for m in (ATT, MLP):
            assert np.array_equal(tr.input(t, l, m), h)
            h = h + tr.output(t, l, m)
    eps = tiny_model.epsilon_head(h)
    assert np.array_equal(denoise_update(tr.states[t], eps, t, tiny_model.schedule), tr.states[t - 1])


def test_non_finite_names_step(tiny_model):
    x = np.full((tiny_model.n_tok, tiny_model.d), np.inf)
    with pytest.raises(NumericError, match="t=8"):
        run_full_trajectory(tiny_model, x)
