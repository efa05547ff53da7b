"""Small constructed scenarios used by tests and demos.

:func:`hindsight_reversal` plays a two-phase episode on a two-node network
where a reseller keeps buying from a sanctioned vendor. The first step looks
excellent when judged on its own (high margin plus rent), while the
enforcement that lands one step later (risk, a fine and a trade freeze)
drags the rest of the window down. The retrospective critic, which sees the
whole window, therefore scores the same action far below the immediate
assessment.

:func:`export_ban_trace` scores every template with the oracle world model
on a two-node exporter/importer pair under an export ban. Throttling the
exporter starves the importer, and with stockouts made costly the
export-parameter template is the only non-halting action predicted to lose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agent import CriticVerdict, ScriptedExternalCritic, TemplateLibrary
from .buffer import HindsightBuffer, StepRecord
from .dynamics import EnvConfig, Intervention, Observation, SemiSimEnv, Shock, ShockKind, env_step, hold_policy
from .network import SupplyNetwork, build_network
from .world_model import rollout_oracle, rollout_rng

REVERSAL_NETWORK = {
    "name": "reversal-fixture",
    "nodes": [
        {"id": "vendor", "role": "Upstream", "label": "sanctioned vendor", "p_sale": 10, "p_cost": 2, "capacity": 50},
        {"id": "reseller", "role": "Downstream", "label": "reseller", "p_sale": 60, "p_cost": 10, "capacity": 50},
    ],
    "edges": [{"source": "vendor", "target": "reseller", "weight": 0.8}],
}


@dataclass
class ReversalCase:
    net: SupplyNetwork
    critic: ScriptedExternalCritic
    buffer: HindsightBuffer
    final_obs: Observation
    external: CriticVerdict
    index: int = 0

    def retrospective(self) -> CriticVerdict:
        return self.critic.retrospective(self.buffer, self.index, self.final_obs)


def hindsight_reversal(seed: int = 0, window: int = 3) -> ReversalCase:
    net = build_network(REVERSAL_NETWORK)
    sanction = Shock(
        ShockKind.SANCTION,
        ("vendor",),
        1.0,
        onset=1,
        duration=window + 1,
        narrative="The vendor is placed under sanctions.",
    )
    cfg = EnvConfig(t_max=window, enforcement_lag=1, obs_noise=0.0)
    rng = np.random.default_rng(seed)
    env, obs = SemiSimEnv.reset(net, cfg, [sanction], seed=seed, rng=rng)
    critic = ScriptedExternalCritic(net)
    buffer = HindsightBuffer(window)
    tempting = Intervention(q_buy={"vendor->reseller": 20.0}, produce={"vendor": 20.0}, template="replenish")
    compliant = Intervention(template="reroute")
    first = None
    for k in range(window):
        action = tempting if k == 0 else compliant
        next_obs, fb, _ = env_step(env, action, rng)
        verdict = critic.assess(obs, action, fb)
        first = first or verdict
        buffer.add(StepRecord(obs.t, obs, action, 0, np.zeros(1), 0.0, verdict.score, verdict.feedback, fb, next_obs))
        obs = next_obs
    return ReversalCase(net, critic, buffer, obs, first)


EXPORT_BAN_NETWORK = {
    "name": "export-ban-fixture",
    "nodes": [
        {"id": "exporter", "role": "Upstream", "label": "controlled exporter", "p_sale": 10, "p_cost": 8, "capacity": 40},
        {"id": "importer", "role": "Downstream", "label": "importer", "p_sale": 14, "p_cost": 10, "capacity": 40},
    ],
    "edges": [{"source": "exporter", "target": "importer", "weight": 0.6}],
}


def export_ban_trace(seed: int = 0, horizon: int = 3) -> dict[str, float]:
    """Oracle r-hat of every default template one step into an export ban."""
    net = build_network(EXPORT_BAN_NETWORK)
    ban = Shock(
        ShockKind.EXPORT_BAN,
        ("exporter->importer",),
        0.9,
        onset=1,
        duration=10,
        narrative="Exports from the exporter are capped.",
    )
    cfg = EnvConfig(t_max=10, demand_mean=30.0, stockout_risk=60.0)
    env, obs = SemiSimEnv.reset(net, cfg, [ban], seed=seed)
    obs, _, _ = env_step(env, hold_policy(env), np.random.default_rng(seed))
    lib = TemplateLibrary()
    return {
        t.name: rollout_oracle(env, t.instantiate(obs, net), horizon, rng=rollout_rng(seed, obs.t, k))
        for k, t in enumerate(lib.templates)
    }
