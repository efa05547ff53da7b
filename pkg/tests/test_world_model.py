from __future__ import annotations

import math

import numpy as np
import pytest

from reflectplan.agent import TemplateLibrary
from reflectplan.dynamics import EnvConfig, Intervention, SemiSimEnv, env_step, hold_policy, load_shock_schedule
from reflectplan.errors import DimensionMismatch, InsufficientData, UnfittedModel
from reflectplan.fixtures import export_ban_trace
from reflectplan.harness import collect_transitions
from reflectplan.world_model import (
    LearnedWorldModel,
    LinearToyEnv,
    OracleWorldModel,
    WorldModelParams,
    embed_action,
    encode,
    fit_world_model,
    identity_params,
    load_params,
    repeat_last_action,
    rollout_latent,
    rollout_oracle,
    rollout_rng,
    save_params,
    semisim_featurizer,
    toy_transitions,
    zero_params,
)


@pytest.fixture
def live(net):
    env, obs = SemiSimEnv.reset(net, EnvConfig(), load_shock_schedule(), seed=5)
    rng = np.random.default_rng(5)
    for _ in range(3):
        obs, _, _ = env_step(env, hold_policy(env), rng)
    return env, obs


# -- oracle -----------------------------------------------------------------------


def test_horizon_one_is_the_true_step_reward(net, live):
    env, obs = live
    for k, template in enumerate(TemplateLibrary().templates):
        action = template.instantiate(obs, net)
        predicted = rollout_oracle(env, action, 1, rng=rollout_rng(5, env.t, k))
        twin = env.clone()
        _, fb, _ = env_step(twin, action, rollout_rng(5, env.t, k))
        assert predicted == fb.reward


def test_zero_discount_equals_horizon_one(net, live):
    env, obs = live
    action = TemplateLibrary().instantiate(2, obs, net)
    one = rollout_oracle(env, action, 1, rng=rollout_rng(0, 0, 0))
    five = rollout_oracle(env, action, 5, discount=0.0, rng=rollout_rng(0, 0, 0))
    assert one == five


def test_oracle_leaves_live_env_untouched(net, live):
    env, obs = live
    digest = env.digest()
    for k in range(len(TemplateLibrary())):
        rollout_oracle(env, TemplateLibrary().instantiate(k, obs, net), 3, rng=rollout_rng(1, env.t, k))
    assert env.digest() == digest


def test_oracle_is_deterministic_per_stream(net, live):
    env, obs = live
    model = OracleWorldModel(3, 0.9, seed=11)
    action = hold_policy(env)
    assert model.predict(env, obs, action, env.t, 0) == model.predict(env, obs, action, env.t, 0)


def test_oracle_does_not_foresee_unannounced_shocks(net):
    from reflectplan.dynamics import Shock, ShockKind

    late = Shock(ShockKind.SANCTION, ("fab_a",), 1.0, onset=3, duration=5)
    env, obs = SemiSimEnv.reset(net, EnvConfig(), [late], seed=0)
    quiet, _ = SemiSimEnv.reset(net, EnvConfig(), [], seed=0)
    action = hold_policy(env)
    blind = rollout_oracle(env, action, 4, rng=rollout_rng(0, 1, 0))
    assert blind == rollout_oracle(quiet, action, 4, rng=rollout_rng(0, 1, 0))
    seer = rollout_oracle(env, action, 4, rng=rollout_rng(0, 1, 0), foresee_shocks=True)
    assert seer != blind


@pytest.mark.parametrize("seed", range(3))
def test_export_parameter_action_is_the_only_non_halting_loser(seed):
    r_hat = export_ban_trace(seed)
    others = {k: v for k, v in r_hat.items() if k != "set_export_params" and not k.startswith("halt")}
    assert r_hat["set_export_params"] < 0
    assert min(others.values()) >= 0


def test_rollout_streams_differ_by_candidate():
    a = rollout_rng(1, 2, 0).random()
    b = rollout_rng(1, 2, 1).random()
    assert a != b
    assert a == rollout_rng(1, 2, 0).random()


# -- encoder and latent rollout -------------------------------------------------


def test_encode_examples():
    params = WorldModelParams(np.ones((3, 5)), np.zeros(3))
    assert np.array_equal(encode(np.zeros(5), params), np.zeros(3))
    x = np.arange(4.0)
    assert np.array_equal(encode(x, identity_params(4)), x)
    assert np.array_equal(encode(x + 1, identity_params(4)), encode(x + 1, identity_params(4)))
    with pytest.raises(DimensionMismatch):
        encode(np.zeros(6), params)


def test_zero_model_predicts_zero():
    params = zero_params(4, 3, 2)
    assert rollout_latent(np.ones(3), np.ones(2), 4, params) == 0.0


def test_horizon_one_by_hand():
    rng = np.random.default_rng(0)
    params = WorldModelParams(
        np.eye(3), np.zeros(3), A=rng.normal(size=(3, 3)), B=rng.normal(size=(3, 2)),
        c=rng.normal(size=3), reward_w=rng.normal(size=3), reward_b=0.7,
    )
    z0, u = rng.normal(size=3), rng.normal(size=2)
    z1 = params.A @ z0 + params.B @ u + params.c
    assert rollout_latent(z0, u, 1, params) == pytest.approx(float(params.reward_w @ z1 + 0.7), abs=1e-14)


def test_unfitted_model_raises():
    with pytest.raises(UnfittedModel):
        rollout_latent(np.zeros(4), np.zeros(2), 1, identity_params(4))


# -- fitting -----------------------------------------------------------------------


def test_exactly_linear_data_has_tiny_residual():
    env = LinearToyEnv.random(0)
    data = toy_transitions(env, 500, 1)
    exact = fit_world_model(data, identity_params(4, ridge=0.0))
    assert exact.residual_norm < 1e-8
    regularized = fit_world_model(data, identity_params(4))
    assert regularized.ridge == 1e-3
    assert regularized.residual_norm < 1e-4


def test_identity_encoder_recovers_true_matrices():
    env = LinearToyEnv.random(3)
    params = fit_world_model(toy_transitions(env, 500, 3), identity_params(4, ridge=0.0))
    np.testing.assert_allclose(params.A, env.A, atol=1e-9)
    np.testing.assert_allclose(params.B, env.B, atol=1e-9)
    np.testing.assert_allclose(params.reward_w, env.w, atol=1e-9)


def test_refit_is_idempotent_and_pure():
    data = toy_transitions(LinearToyEnv.random(1), 200, 2)
    start = identity_params(4)
    one = fit_world_model(data, start)
    two = fit_world_model(data, start)
    assert not start.fitted
    for key in ("A", "B", "c", "reward_w"):
        assert np.array_equal(getattr(one, key), getattr(two, key))
    assert one.reward_b == two.reward_b


def test_pca_fit_is_deterministic():
    data = toy_transitions(LinearToyEnv.random(2), 100, 2)
    one, two = fit_world_model(data, latent_dim=3), fit_world_model(data, latent_dim=3)
    assert np.array_equal(one.encoder, two.encoder) and np.array_equal(one.A, two.A)


def test_insufficient_data():
    data = toy_transitions(LinearToyEnv.random(0), 5, 0)
    with pytest.raises(InsufficientData):
        fit_world_model(data, latent_dim=16)


def test_sample_count_grows_with_refits():
    env = LinearToyEnv.random(0)
    first = fit_world_model(toy_transitions(env, 50, 0), identity_params(4))
    second = fit_world_model(toy_transitions(env, 50, 1), first)
    assert (first.n_samples, second.n_samples) == (50, 100)


@pytest.mark.parametrize("horizon", [1, 2, 3, 4, 5])
def test_linear_recovery_up_to_five_steps(horizon):
    env = LinearToyEnv.random(4)
    params = fit_world_model(toy_transitions(env, 500, 9), latent_dim=4)
    rng = np.random.default_rng(horizon)
    for _ in range(20):
        probe = env.clone()
        probe.x = rng.normal(size=4)
        u = rng.normal(size=2)
        truth = rollout_oracle(probe, u, horizon, repeat_last_action, 0.9)
        pred = rollout_latent(encode(probe.x, params), u, horizon, params, 0.9)
        assert abs(pred - truth) <= 0.05 * abs(truth)


def test_params_round_trip(tmp_path):
    params = fit_world_model(toy_transitions(LinearToyEnv.random(0), 100, 0), latent_dim=4)
    save_params(params, tmp_path / "wm.json")
    back = load_params(tmp_path / "wm.json")
    for key in ("encoder", "encoder_bias", "A", "B", "c", "reward_w"):
        assert np.array_equal(getattr(back, key), getattr(params, key))
    assert back.n_samples == params.n_samples
    assert math.isclose(back.residual_norm, params.residual_norm)


# -- supply-network featurization -------------------------------------------------


def test_action_embedding_layout(net):
    action = Intervention(
        q_buy={"equip->fab_a": 15.0}, produce={"materials": 30.0},
        halts=frozenset({"fab_b"}), export_params={"quota": 0.3},
    )
    u = embed_action(action, net)
    assert u.shape == (len(net.edges) + len(net.sources) + len(net.nodes) + 1,)
    assert u[0] == 0.5
    assert u[len(net.edges) + 1] == 1.0
    assert u[len(net.edges) + len(net.sources) + net.node_ids.index("fab_b")] == 1.0
    assert u[-1] == 0.3


def test_learned_mode_on_supply_network(net):
    schedule = load_shock_schedule()
    data = collect_transitions(net, EnvConfig(), schedule, [1, 2, 3])
    featurizer = semisim_featurizer(net)
    params = fit_world_model(data, featurizer=featurizer, latent_dim=16)
    model = LearnedWorldModel(params, featurizer)
    env, obs = SemiSimEnv.reset(net, EnvConfig(), schedule, seed=8)
    values = [model.predict(env, obs, t.instantiate(obs, net), env.t, k) for k, t in enumerate(TemplateLibrary().templates)]
    assert all(math.isfinite(v) for v in values)
    assert len(set(values)) > 1
