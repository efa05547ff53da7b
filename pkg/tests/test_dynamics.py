from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflectplan.dynamics import (
    EnvConfig,
    ExecFeedback,
    Intervention,
    SemiSimEnv,
    Shock,
    ShockKind,
    compute_exec_reward,
    env_step,
    hold_policy,
    load_shock_schedule,
    propagate_risk,
    step_inventory_cash,
)
from reflectplan.errors import EpisodeTerminated, NegativeQuantity, ParamOutOfRange, UnknownNode, UnknownTarget
from reflectplan.network import NodeSpec, NodeState, Role, build_network

PAIR = {
    "name": "pair",
    "nodes": [
        {"id": "sup", "role": "Upstream", "p_sale": 5, "p_cost": 1, "capacity": 50},
        {"id": "buyer", "role": "Downstream", "p_sale": 9, "p_cost": 5, "capacity": 50},
    ],
    "edges": [{"source": "sup", "target": "buyer", "weight": 0.5}],
}


def _pair_env(sup_inventory=3.0, schedule=(), **cfg):
    net = build_network(PAIR)
    states = {
        "sup": NodeState(sup_inventory, 100.0, 100.0, 0.0),
        "buyer": NodeState(0.0, 100.0, 100.0, 0.0),
    }
    return net, SemiSimEnv(net, EnvConfig(obs_noise=0.0, **cfg), states, {"buyer": 0.0}, schedule)


def _feedback(nodes, **kw):
    zero = {n: 0.0 for n in nodes}
    base = dict(
        flows={}, production={}, sales={}, unmet={}, clipped={}, buy=dict(zero), ship=dict(zero),
        violations={n: False for n in nodes}, rent=dict(zero), enforcement={},
    )
    base.update(kw)
    return ExecFeedback(**base)


# -- inventory and cash -------------------------------------------------------

SPEC = NodeSpec("n", Role.MIDSTREAM, p_sale=2.0, p_cost=1.0, capacity=100)


def test_identity_transition():
    s = NodeState(10.0, 50.0, 90.0, 5.0)
    out = step_inventory_cash(s, 0.0, 0.0, SPEC, False, 0.0)
    assert out.inventory == 10.0 and out.cash == 50.0


def test_buy_and_ship_example():
    out = step_inventory_cash(NodeState(10.0, 0.0, 100.0, 0.0), 5.0, 3.0, SPEC, False, 0.0)
    assert out.inventory == 12.0
    assert out.cash == 1.0


def test_violation_collects_rent_and_costs_compliance():
    out = step_inventory_cash(NodeState(0.0, 20.0, 90.0, 0.0), 0.0, 0.0, SPEC, True, 100.0)
    assert out.cash == 120.0
    assert out.compliance == 65.0
    clean = step_inventory_cash(NodeState(0.0, 20.0, 90.0, 0.0), 0.0, 0.0, SPEC, False, 100.0)
    assert clean.cash == 20.0 and clean.compliance == 92.0


def test_negative_quantity_rejected():
    with pytest.raises(NegativeQuantity):
        step_inventory_cash(NodeState(0, 0, 100, 0), -1.0, 0.0, SPEC, False, 0.0)


def test_compliance_stays_in_range():
    low = step_inventory_cash(NodeState(0, 0, 10.0, 0), 0, 0, SPEC, True, 0)
    high = step_inventory_cash(NodeState(0, 0, 99.5, 0), 0, 0, SPEC, False, 0)
    assert low.compliance == 0.0 and high.compliance == 100.0


# -- risk propagation ---------------------------------------------------------


def _chain(w=0.5):
    return build_network(
        {
            "nodes": [{"id": "j", "role": "Upstream"}, {"id": "i", "role": "Downstream"}],
            "edges": [{"source": "j", "target": "i", "weight": w}],
        }
    )


def test_single_edge_example():
    out = propagate_risk(_chain(0.5), {"j": 10.0, "i": 4.0}, 0.1, 2.0)
    assert out["i"] == pytest.approx(7.6, abs=1e-12)
    assert out["j"] == pytest.approx(9.0, abs=1e-12)


def test_sub_threshold_is_pure_decay(net):
    risks = {n: 10.0 + i for i, n in enumerate(net.node_ids)}
    out = propagate_risk(net, risks, 0.1, 20.0)
    assert all(out[n] == pytest.approx(0.9 * risks[n]) for n in net.node_ids)


def test_full_recovery(net):
    risks = {n: 15.0 for n in net.node_ids}
    assert set(propagate_risk(net, risks, 1.0, 20.0).values()) == {0.0}


def test_parameter_checks(net):
    risks = {n: 0.0 for n in net.node_ids}
    with pytest.raises(ParamOutOfRange):
        propagate_risk(net, risks, 1.5, 20.0)
    with pytest.raises(ParamOutOfRange):
        propagate_risk(net, risks, 0.1, -1.0)


risk_vals = st.floats(0, 100, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(risk_vals, min_size=6, max_size=6), st.floats(0, 1), st.floats(0, 100))
def test_risk_bounded(net, risks, gamma, tau):
    out = propagate_risk(net, dict(zip(net.node_ids, risks)), gamma, tau)
    assert all(0.0 <= v <= 100.0 for v in out.values())


@settings(max_examples=200, deadline=None)
@given(st.lists(risk_vals, min_size=6, max_size=6), st.integers(0, 5), st.floats(0, 50), st.floats(0, 1), st.floats(0, 50))
def test_risk_monotone_in_predecessor(net, risks, which, bump, gamma, tau):
    base = dict(zip(net.node_ids, risks))
    raised = dict(base)
    node = net.node_ids[which]
    raised[node] = min(100.0, raised[node] + bump)
    a, b = propagate_risk(net, base, gamma, tau), propagate_risk(net, raised, gamma, tau)
    for succ, _ in net.successors(node):
        assert b[succ] >= a[succ]


@settings(max_examples=200, deadline=None)
@given(st.lists(risk_vals, min_size=6, max_size=6), st.integers(0, 5), st.floats(0, 1), st.floats(1, 60), st.floats(0, 1))
def test_threshold_inertness(net, risks, which, gamma, tau, frac):
    node = net.node_ids[which]
    one = dict(zip(net.node_ids, risks))
    one[node] = frac * tau * 0.999
    two = dict(one)
    two[node] = frac * tau * 0.5
    a, b = propagate_risk(net, one, gamma, tau), propagate_risk(net, two, gamma, tau)
    assert all(a[n] == b[n] for n in net.node_ids if n != node)


# -- shocks ---------------------------------------------------------------------


def test_export_ban_zero_clips_edge():
    ban = Shock(ShockKind.EXPORT_BAN, ("sup->buyer",), 0.0, onset=1, duration=2)
    net, env = _pair_env(40.0, [ban])
    _, fb, _ = env_step(env, Intervention(q_buy={"sup->buyer": 10.0}), np.random.default_rng(0))
    assert fb.flows["sup->buyer"] == 0.0
    assert fb.clipped["sup->buyer"] == 10.0


def test_tariff_of_one_is_a_no_op():
    tariff = Shock(ShockKind.TARIFF, ("sup->buyer",), 1.0, onset=1, duration=5)
    action = Intervention(q_buy={"sup->buyer": 10.0})
    _, plain = _pair_env(40.0)
    _, taxed = _pair_env(40.0, [tariff])
    env_step(plain, action, np.random.default_rng(0))
    env_step(taxed, action, np.random.default_rng(0))
    assert plain.states["buyer"].cash == taxed.states["buyer"].cash


def test_tariff_raises_cost():
    tariff = Shock(ShockKind.TARIFF, ("sup->buyer",), 2.0, onset=1, duration=5)
    _, env = _pair_env(40.0, [tariff])
    env_step(env, Intervention(q_buy={"sup->buyer": 10.0}), np.random.default_rng(0))
    assert env.states["buyer"].cash == pytest.approx(100.0 - 2.0 * 5.0 * 10.0)


def test_material_shortage_scales_capacity():
    short = Shock(ShockKind.MATERIAL_SHORTAGE, ("sup",), 0.5, onset=1, duration=5)
    _, env = _pair_env(0.0, [short], risk_capacity_drag=0.0)
    _, fb, _ = env_step(env, Intervention(produce={"sup": 40.0}), np.random.default_rng(0))
    assert fb.production["sup"] == 25.0


def test_shock_expiry_restores_baseline(net):
    schedule = load_shock_schedule()
    env, _ = SemiSimEnv.reset(net, EnvConfig(t_max=40), schedule, seed=0)
    baseline, _ = SemiSimEnv.reset(net, EnvConfig(t_max=40), [], seed=0)
    rng = np.random.default_rng(0)
    last_end = max(s.end for s in schedule)
    while env.t < last_end:
        env_step(env, hold_policy(env), rng)
    cons = env.constraints()
    base = baseline.constraints()
    assert (cons.edge_cap, cons.capacity_mult, cons.sanctioned, cons.tariff) == (
        base.edge_cap, base.capacity_mult, base.sanctioned, base.tariff,
    )


def test_unknown_shock_target():
    with pytest.raises(UnknownTarget):
        _pair_env(0.0, [Shock(ShockKind.SANCTION, ("nobody",), 1.0, onset=1, duration=1)])


@pytest.mark.parametrize("kw", [{"onset": 0}, {"duration": 0}, {"magnitude": -1.0}])
def test_shock_invariants(kw):
    args = {"kind": ShockKind.TARIFF, "targets": ("a",), "magnitude": 1.0, "onset": 1, "duration": 1, **kw}
    with pytest.raises(ValueError):
        Shock(**args)


def test_default_schedule_round_trips():
    for s in load_shock_schedule():
        assert Shock.from_dict(s.to_dict()) == s


# -- env_step ---------------------------------------------------------------------


def test_clipping_to_available_inventory():
    _, env = _pair_env(3.0)
    _, fb, _ = env_step(env, Intervention(q_buy={"sup->buyer": 5.0}), np.random.default_rng(0))
    assert fb.flows["sup->buyer"] == 3.0
    assert fb.clipped["sup->buyer"] == 2.0
    assert env.states["sup"].inventory == 0.0
    assert env.states["buyer"].inventory == 3.0


def test_sanctioned_trade_is_flagged():
    sanction = Shock(ShockKind.SANCTION, ("sup",), 1.0, onset=1, duration=5)
    _, env = _pair_env(40.0, [sanction])
    _, fb, _ = env_step(env, Intervention(q_buy={"sup->buyer": 10.0}), np.random.default_rng(0))
    assert fb.violations == {"sup": False, "buyer": True}
    assert fb.rent["buyer"] == pytest.approx(0.15 * 9 * 10)
    assert env.states["buyer"].cash == pytest.approx(100.0 - 5 * 10 + 0.15 * 9 * 10)
    assert env.states["buyer"].compliance == 75.0


def test_enforcement_lands_after_lag():
    sanction = Shock(ShockKind.SANCTION, ("sup",), 1.0, onset=1, duration=10)
    _, env = _pair_env(40.0, [sanction], enforcement_lag=2)
    rng = np.random.default_rng(0)
    env_step(env, Intervention(q_buy={"sup->buyer": 10.0}), rng)
    _, fb2, _ = env_step(env, Intervention(), rng)
    _, fb3, _ = env_step(env, Intervention(), rng)
    assert fb2.enforcement == {}
    assert fb3.enforcement == {"buyer": 35.0}
    assert "buyer" in env.constraints().frozen


def test_zero_action_reward_matches_rule(net):
    env, _ = SemiSimEnv.reset(net, EnvConfig(gamma=0.0), [], seed=3)
    before = dict(env.states)
    _, fb, _ = env_step(env, Intervention(), np.random.default_rng(0))
    for n in net.node_ids:
        if n not in net.sinks:
            assert env.states[n].inventory == before[n].inventory
            assert env.states[n].cash == before[n].cash
    assert fb.reward == compute_exec_reward(before, env.states, fb)


def test_reward_zero_case():
    states = {"a": NodeState(1, 10, 100, 5), "b": NodeState(2, 20, 100, 5)}
    assert compute_exec_reward(states, states, _feedback(states)) == 0.0


def test_violation_outweighs_cash():
    before = {"a": NodeState(0, 0, 100, 0)}
    after = {"a": NodeState(0, 300, 75, 0)}
    fb = _feedback(after, violations={"a": True}, buy={"a": 1.0})
    r = compute_exec_reward(before, after, fb)
    assert r == pytest.approx(0.5 * 300 / 700 - 0.4 + 0.2)
    halted = compute_exec_reward(before, after, _feedback(after, violations={"a": True}))
    assert halted < 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e5, 1e5), st.floats(-100, 100), st.booleans())
def test_reward_in_range(d_cash, d_risk, viol):
    before = {"a": NodeState(0, 0, 100, 50)}
    after = {"a": NodeState(0, d_cash, 100, 50 + d_risk / 2)}
    r = compute_exec_reward(before, after, _feedback(after, violations={"a": viol}))
    assert -1.0 <= r <= 1.0


def test_flow_and_inventory_conservation(net):
    env, obs = SemiSimEnv.reset(net, EnvConfig(), load_shock_schedule(), seed=1)
    rng = np.random.default_rng(1)
    while not env.terminal:
        before = dict(env.states)
        _, fb, _ = env_step(env, hold_policy(env), rng)
        for e in net.edges:
            assert fb.flows[e.id] >= 0
        for n in net.node_ids:
            inflow = sum(fb.flows[e.id] for e in net.in_edges(n)) + fb.production.get(n, 0.0)
            outflow = sum(fb.flows[e.id] for e in net.out_edges(n)) + fb.sales.get(n, 0.0)
            assert fb.buy[n] == pytest.approx(inflow, abs=1e-12)
            assert fb.ship[n] == pytest.approx(outflow, abs=1e-12)
            assert env.states[n].inventory - before[n].inventory == pytest.approx(fb.buy[n] - fb.ship[n], abs=1e-9)
            assert env.states[n].inventory >= -1e-9


def test_step_determinism(net):
    def trace():
        env, _ = SemiSimEnv.reset(net, EnvConfig(), load_shock_schedule(), seed=9)
        rng = np.random.default_rng(9)
        out = []
        while not env.terminal:
            obs, fb, _ = env_step(env, hold_policy(env), rng)
            out.append((env.digest(), fb.reward, obs.to_dict()["nodes"]))
        return out

    assert trace() == trace()


def test_terminated_episode_raises(net):
    env, _ = SemiSimEnv.reset(net, EnvConfig(t_max=2), [], seed=0)
    rng = np.random.default_rng(0)
    env_step(env, hold_policy(env), rng)
    env_step(env, hold_policy(env), rng)
    assert env.terminal
    with pytest.raises(EpisodeTerminated):
        env_step(env, hold_policy(env), rng)


def test_unknown_halt_target(net):
    env, _ = SemiSimEnv.reset(net, EnvConfig(), [], seed=0)
    with pytest.raises(UnknownNode):
        env_step(env, Intervention(halts=frozenset({"nowhere"})), np.random.default_rng(0))


def test_partial_observability(net):
    env, obs = SemiSimEnv.reset(net, EnvConfig(obs_noise=0.1), [], seed=4)
    for spec in net.nodes:
        seen = obs.nodes[spec.id]["inventory"]
        true = env.states[spec.id].inventory
        if spec.role == Role.MIDSTREAM:
            assert seen == true
        elif true > 0:
            assert seen != true


def test_clone_is_independent(net):
    env, _ = SemiSimEnv.reset(net, EnvConfig(), load_shock_schedule(), seed=2)
    digest = env.digest()
    twin = env.clone()
    env_step(twin, hold_policy(twin), np.random.default_rng(0))
    assert env.digest() == digest
