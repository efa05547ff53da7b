"""The reflective planning loop.

Per decision step: sample N candidate interventions, score each with the
internal critic (semantic score) and the world model (predicted physical
reward), execute the best joint score, assess the outcome and buffer it.
Whenever the buffer reaches K records or the episode ends, every buffered
record is re-scored in hindsight, the scores are turned into rewards in
[-1, 1] and one accumulated REINFORCE step updates the policy.

:func:`run_episode` returns an :class:`EpisodeLog`, a list of plain-dict
records (``header``, ``step``, ``update``, ``end``, ``error``) that is
written one JSON object per line.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .agent import (
    TASK_DESCRIPTION,
    ParametricPolicy,
    PromptContext,
    context_features,
    external_assess,
    internal_critique,
    retrospective_score,
    sample_candidates,
)
from .buffer import HindsightBuffer, StepRecord
from .dynamics import EnvConfig, Intervention, SemiSimEnv, Shock, env_step
from .errors import (
    CorruptLog,
    DegenerateWeights,
    EmptyBatch,
    LengthMismatch,
    NonTrainableBackend,
    ScoreOutOfRange,
)
from .network import SupplyNetwork

log = logging.getLogger(__name__)

ABLATIONS = ("no_world_model", "no_retro_rl", "no_internal_reflection")


# ---------------------------------------------------------------------------
# selection and learning signals


def select_action(
    candidates: Sequence,
    s_llm: Sequence[float],
    r_wm: Sequence[float],
    alpha: float,
    beta: float,
) -> tuple[int, list[float]]:
    """Index maximizing ``alpha * (s/50 - 1) + beta * r_wm``; ties go to the lowest index."""
    n = len(candidates)
    if n < 1 or len(s_llm) != n or len(r_wm) != n:
        raise LengthMismatch(f"got {n} candidates, {len(s_llm)} semantic and {len(r_wm)} physical scores")
    if alpha < 0 or beta < 0 or (alpha == 0 and beta == 0):
        raise DegenerateWeights(f"alpha={alpha}, beta={beta}: need non-negative, not both zero")
    joint = [alpha * (2.0 * s / 100.0 - 1.0) + beta * r for s, r in zip(s_llm, r_wm)]
    best = max(range(n), key=lambda k: (joint[k], -k))
    return best, joint


def normalize_reward(s_retro: float) -> float:
    """Map a hindsight score in [0, 100] to a reward in [-1, 1]."""
    if not (0.0 <= s_retro <= 100.0):
        raise ScoreOutOfRange(f"retrospective score {s_retro} outside [0, 100]")
    return 2.0 * (s_retro / 100.0) - 1.0


def denormalize_reward(r: float) -> float:
    return 100.0 * (r + 1.0) / 2.0


def reinforce_loss(r: float, logprob: float) -> float:
    return -r * logprob


@dataclass
class UpdateBatch:
    rewards: list[float]
    logprobs: list[float]
    contexts: list[np.ndarray]
    actions: list[int]
    lr: float = 0.05

    def __post_init__(self):
        n = len(self.rewards)
        if not (len(self.logprobs) == len(self.contexts) == len(self.actions) == n):
            raise LengthMismatch("update batch fields must have equal length")
        for r in self.rewards:
            if abs(r) > 1.0:
                raise ScoreOutOfRange(f"normalized reward {r} outside [-1, 1]")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def losses(self) -> list[float]:
        return [reinforce_loss(r, lp) for r, lp in zip(self.rewards, self.logprobs)]


def batch_loss(policy: ParametricPolicy, batch: UpdateBatch) -> float:
    """Sum of REINFORCE losses with log-probs re-evaluated under ``policy``."""
    return float(
        sum(
            -r * policy.log_probs(phi)[k]
            for r, phi, k in zip(batch.rewards, batch.contexts, batch.actions)
        )
    )


def policy_gradient(policy: ParametricPolicy, batch: UpdateBatch) -> np.ndarray:
    """Gradient of :func:`batch_loss` with respect to theta."""
    grad = np.zeros_like(policy.theta)
    for r, phi, k in zip(batch.rewards, batch.contexts, batch.actions):
        grad -= r * policy.grad_log_prob(phi, k)
    return grad


def update_policy(policy, batch: UpdateBatch):
    """One accumulated gradient step. Returns ``(new_policy, gradient)``."""
    if len(batch) == 0:
        raise EmptyBatch("cannot update on an empty batch")
    if not getattr(policy, "trainable", False):
        raise NonTrainableBackend(f"{getattr(policy, 'backend', type(policy).__name__)} backend is not trainable")
    grad = policy_gradient(policy, batch)
    return policy.with_theta(policy.theta - batch.lr * grad), grad


# ---------------------------------------------------------------------------
# episode log


@dataclass
class EpisodeLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def of_type(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["type"] == kind]

    @property
    def header(self) -> dict:
        return self.records[0]

    @property
    def steps(self) -> list[dict]:
        return self.of_type("step")

    @property
    def updates(self) -> list[dict]:
        return self.of_type("update")

    @property
    def end(self) -> dict | None:
        ends = self.of_type("end")
        return ends[-1] if ends else None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, allow_nan=False) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: str | Path) -> "EpisodeLog":
        records = []
        lines = Path(path).read_text().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        for i, line in enumerate(lines, 1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptLog(path, i, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "type" not in rec:
                raise CorruptLog(path, i, "record has no type")
            records.append(rec)
        if not records or records[0]["type"] != "header":
            raise CorruptLog(path, 1, "log does not start with a header record")
        return cls(records)


# ---------------------------------------------------------------------------
# the loop


@dataclass(frozen=True)
class LoopConfig:
    alpha: float = 0.3
    beta: float = 0.7
    n_candidates: int = 3
    buffer_size: int = 3
    temperature: float = 1.0
    lr: float = 0.05
    history_len: int = 3
    no_world_model: bool = False
    no_retro_rl: bool = False
    no_internal_reflection: bool = False

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.no_internal_reflection else self.alpha

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.no_world_model else self.beta

    def to_dict(self) -> dict:
        return asdict(self)


def _r(x: float) -> float:
    """Round for logging; keeps the JSONL compact and stable."""
    return float(round(x, 10))


def _state_snapshot(env: SemiSimEnv) -> dict:
    return {
        n: {
            "inventory": _r(s.inventory),
            "cash": _r(s.cash),
            "compliance": _r(s.compliance),
            "risk": _r(s.risk),
            "operable": s.operable,
        }
        for n, s in env.states.items()
    }


def run_episode(
    net: SupplyNetwork,
    schedule: Iterable[Shock],
    env_config: EnvConfig,
    loop_config: LoopConfig,
    policy,
    internal_critic,
    external_critic,
    world_model,
    seed: int,
    header_extra: dict | None = None,
):
    """Run one episode of the reflective loop.

    Returns ``(log, policy)``; the returned policy carries any test-time
    updates made during the episode.
    """
    cfg = loop_config
    env_rng = np.random.default_rng([seed, 1])
    policy_rng = np.random.default_rng([seed, 2])
    env, obs = SemiSimEnv.reset(net, env_config, schedule, seed=seed, rng=env_rng)
    alpha, beta = cfg.effective_alpha, cfg.effective_beta
    use_internal = not cfg.no_internal_reflection and internal_critic is not None
    use_wm = not cfg.no_world_model and world_model is not None
    learn = not cfg.no_retro_rl and getattr(policy, "trainable", False)

    elog = EpisodeLog()
    header = {
        "type": "header",
        "seed": seed,
        "network": net.name,
        "roles": {n.id: n.role.value for n in net.nodes},
        "env_config": env_config.to_dict(),
        "loop_config": cfg.to_dict(),
        "policy": _policy_summary(policy),
        "world_model": getattr(world_model, "mode", None) if use_wm else None,
        "schedule": [s.to_dict() for s in env.schedule],
        "initial_states": _state_snapshot(env),
        "initial_demand": {k: _r(v) for k, v in env.demand.items()},
    }
    header.update(header_extra or {})
    elog.append(header)

    buffer = HindsightBuffer(cfg.buffer_size)
    prev_action: Intervention | None = None
    history: list[str] = []
    t = env.t
    try:
        while not env.terminal:
            t = env.t
            ctx = PromptContext(TASK_DESCRIPTION, obs, prev_action, tuple(history[-cfg.history_len :]))
            cands = sample_candidates(policy, ctx, cfg.n_candidates, cfg.temperature, policy_rng)

            s_llm, f_int, r_wm = [], [], []
            for k, (action, _) in enumerate(cands):
                if use_internal:
                    verdict = internal_critique(internal_critic, obs, action, ctx)
                    s_llm.append(verdict.score)
                    f_int.append(verdict.feedback)
                else:
                    s_llm.append(50.0)
                    f_int.append(None)
                r_wm.append(world_model.predict(env, obs, action, t, k) if use_wm else 0.0)

            if alpha == 0 and beta == 0:
                best, joint = 0, [0.0] * len(cands)
            else:
                best, joint = select_action(cands, s_llm, r_wm, alpha, beta)
            action, logprob = cands[best]
            phi = context_features(ctx, net) if learn else None

            next_obs, fb, _ = env_step(env, action, env_rng)
            ext = external_assess(external_critic, obs, action, fb)

            elog.append(
                {
                    "type": "step",
                    "t": t,
                    "candidates": [
                        {
                            "template": a.template,
                            "logprob": _r(lp),
                            "s_llm": _r(s) if use_internal else None,
                            "internal_feedback": fi,
                            "r_wm": _r(r) if use_wm else None,
                            "joint": _r(j),
                        }
                        for (a, lp), s, fi, r, j in zip(cands, s_llm, f_int, r_wm, joint)
                    ],
                    "selected": best,
                    "action": _action_record(action),
                    "reward": _r(fb.reward),
                    "external_score": _r(ext.score),
                    "external_feedback": ext.feedback,
                    "feedback": _feedback_record(fb),
                    "states": _state_snapshot(env),
                    "demand": {k: _r(v) for k, v in fb.sales.items()},
                    "market_demand": {
                        k: _r(fb.sales[k] + fb.unmet[k]) for k in fb.sales
                    },
                    "mean_risk": _r(sum(s.risk for s in env.states.values()) / len(env.states)),
                    "collapse": fb.collapse,
                    "shocks": [s.kind.value for s in obs.shocks],
                }
            )

            if learn:
                buffer.add(
                    StepRecord(
                        t=t,
                        obs=obs,
                        action=action,
                        template_index=policy.library.index(action.template),
                        context=phi,
                        logprob=logprob,
                        external_score=ext.score,
                        external_feedback=ext.feedback,
                        feedback=fb,
                        next_obs=next_obs,
                    )
                )
                if buffer.full or env.terminal:
                    policy = _flush(buffer, policy, external_critic, next_obs, cfg, elog, t)

            history.append(f"t={t} {action.template} reward={fb.reward:+.3f} violations={fb.violation_count}")
            prev_action = action
            obs = next_obs
    except Exception as exc:
        elog.append({"type": "error", "t": t, "error": type(exc).__name__, "message": str(exc)})
        raise

    mean_reward = float(np.mean([r["reward"] for r in elog.steps])) if elog.steps else 0.0
    elog.append(
        {
            "type": "end",
            "t": env.t - 1,
            "steps": len(elog.steps),
            "collapsed": env.collapsed,
            "mean_reward": _r(mean_reward),
            "return": _r(sum(r["reward"] for r in elog.steps)),
            "final_states": _state_snapshot(env),
            "policy": _policy_summary(policy),
        }
    )
    return elog, policy


def _flush(buffer, policy, critic, final_obs, cfg: LoopConfig, elog: EpisodeLog, t: int):
    verdicts = [retrospective_score(critic, buffer, j, final_obs) for j in range(len(buffer))]
    rewards = [normalize_reward(v.score) for v in verdicts]
    records = buffer.records
    batch = UpdateBatch(
        rewards=rewards,
        logprobs=[rec.logprob for rec in records],
        contexts=[rec.context for rec in records],
        actions=[rec.template_index for rec in records],
        lr=cfg.lr,
    )
    new_policy, grad = update_policy(policy, batch)
    before = len(buffer)
    buffer.flush()
    elog.append(
        {
            "type": "update",
            "t": t,
            "buffer_before": before,
            "records": [
                {
                    "t": rec.t,
                    "template": rec.action.template,
                    "external_score": _r(rec.external_score),
                    "s_retro": _r(v.score),
                    "retro_feedback": v.feedback,
                    "r": _r(r),
                    "logprob": _r(rec.logprob),
                    "loss": _r(loss),
                }
                for rec, v, r, loss in zip(records, verdicts, rewards, batch.losses)
            ],
            "loss": _r(sum(batch.losses)),
            "grad_norm": _r(float(np.linalg.norm(grad))),
            "theta_norm": _r(float(np.linalg.norm(new_policy.theta))),
            "buffer_after": len(buffer),
        }
    )
    return new_policy


def _policy_summary(policy) -> dict:
    out = {"backend": getattr(policy, "backend", type(policy).__name__)}
    if isinstance(policy, ParametricPolicy):
        out["temperature"] = policy.temperature
        out["theta_norm"] = _r(float(np.linalg.norm(policy.theta)))
    elif hasattr(policy, "name"):
        out["name"] = policy.name
    return out


def _action_record(action: Intervention) -> dict:
    d = action.to_dict()
    for key in ("q_buy", "q_ship", "produce"):
        d[key] = {k: _r(v) for k, v in d[key].items()}
    return d


def _feedback_record(fb) -> dict:
    d = fb.to_dict()
    for key, val in d.items():
        if isinstance(val, dict):
            d[key] = {k: _r(v) if isinstance(v, float) else v for k, v in sorted(val.items())}
        elif isinstance(val, float):
            d[key] = _r(val)
    return d

