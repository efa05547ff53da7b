"""Experiment orchestration: runs, baselines, ablations, sweeps and replay.

Run directory layout::

    <run>/config.json              resolved config snapshot
    <run>/episodes/episode-NNN.jsonl
    <run>/metrics.csv              one row per episode
    <run>/signals.csv              per-step signals of the executed candidate
    <run>/correlation.csv          signal correlation matrix (pooled)
    <run>/loss-trajectory.csv      one row per policy update
    <run>/checkpoints/             final policy per episode, fitted world model

Episode ``i`` of a run with master seed ``s`` always uses the same derived
seed, so different variants run on paired seeds.
"""

from __future__ import annotations

import functools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .agent import (
    ParametricPolicy,
    PromptContext,
    ScriptedExternalCritic,
    ScriptedInternalCritic,
    ScriptedPolicy,
    TemplateLibrary,
)
from .config import ExperimentConfig
from .dynamics import EnvConfig, SemiSimEnv, env_step, load_shock_schedule
from .errors import CorruptLog
from .loop import EpisodeLog, LoopConfig, run_episode as run_loop_episode
from .network import SupplyNetwork, load_network
from .world_model import (
    LearnedWorldModel,
    OracleWorldModel,
    WorldModelParams,
    fit_world_model,
    save_params,
    semisim_featurizer,
)

log = logging.getLogger(__name__)


def episode_seed(master_seed: int, index: int) -> int:
    """Seed of episode ``index``; shared by every variant of a run."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# component construction


def _halt_when_shocked(ctx: PromptContext) -> str:
    return "halt_all" if ctx.obs.shocks else "reroute"


def make_policy(cfg: ExperimentConfig, net: SupplyNetwork):
    library = TemplateLibrary()
    if cfg.baseline == "static_hold":
        return ScriptedPolicy(net, library, lambda ctx: "hold", name="static_hold")
    if cfg.baseline == "halt_llm_standin":
        return ScriptedPolicy(net, library, _halt_when_shocked, name="halt_llm_standin")
    if cfg.baseline == "random" or cfg.actor == "parametric":
        return ParametricPolicy.zeros(net, library, cfg.temperature)
    from .llm import LLMPolicy

    return LLMPolicy(net, library, _client(cfg))


def _client(cfg: ExperimentConfig):
    from .llm import ChatClient

    s = cfg.llm
    return ChatClient(s.endpoint, s.model, s.key_env, s.timeout, s.retries, s.max_in_flight)


def make_critics(cfg: ExperimentConfig, net: SupplyNetwork):
    if cfg.critic == "llm":
        from .llm import LLMCritic

        critic = LLMCritic(_client(cfg))
        return critic, critic
    return ScriptedInternalCritic(net), ScriptedExternalCritic(net, discount=cfg.discount)


def collect_transitions(net: SupplyNetwork, env_cfg: EnvConfig, schedule, seeds: Sequence[int]) -> list[tuple]:
    """Exploration data for the learned world model: uniformly random templates."""
    library = TemplateLibrary()
    out = []
    for seed in seeds:
        rng = np.random.default_rng([seed, 7])
        env, obs = SemiSimEnv.reset(net, env_cfg, schedule, seed=seed, rng=rng)
        while not env.terminal:
            action = library.instantiate(int(rng.integers(len(library))), obs, net)
            next_obs, fb, _ = env_step(env, action, rng)
            out.append((obs, action, fb.reward, next_obs))
            obs = next_obs
    return out


def fit_learned_model(cfg: ExperimentConfig, net: SupplyNetwork, schedule) -> WorldModelParams:
    seeds = [episode_seed(cfg.seed, 10_000 + i) for i in range(cfg.wm_train_episodes)]
    data = collect_transitions(net, cfg.env_config(), schedule, seeds)
    return fit_world_model(data, featurizer=semisim_featurizer(net), latent_dim=cfg.latent_dim)


def make_world_model(cfg: ExperimentConfig, net: SupplyNetwork, seed: int, params: WorldModelParams | None):
    if cfg.wm_mode == "learned":
        return LearnedWorldModel(params, semisim_featurizer(net), cfg.horizon, cfg.discount)
    return OracleWorldModel(cfg.horizon, cfg.discount, seed)


# ---------------------------------------------------------------------------
# reference profit


@functools.lru_cache(maxsize=64)
def _reference_profit(topology: str, env_json: str, seed: int) -> float:
    net = load_network(topology)
    env_cfg = EnvConfig.from_dict(json.loads(env_json))
    policy = ScriptedPolicy(net, TemplateLibrary(), lambda ctx: "hold", name="static_hold")
    loop_cfg = LoopConfig(n_candidates=1, no_world_model=True, no_internal_reflection=True, no_retro_rl=True)
    elog, _ = run_loop_episode(net, [], env_cfg, loop_cfg, policy, None, ScriptedExternalCritic(net), None, seed)
    return metrics.profitability(elog)


def reference_profit(cfg: ExperimentConfig, seed: int) -> float:
    """Profit of a static-hold run without shocks on the same topology and seed."""
    env = cfg.env_config().to_dict()
    return _reference_profit(cfg.topology, json.dumps(env, sort_keys=True), seed)


# ---------------------------------------------------------------------------
# episodes and runs


def run_episode(cfg: ExperimentConfig, seed: int, index: int = 0, wm_params: WorldModelParams | None = None):
    """One episode under ``cfg``; returns ``(EpisodeLog, final_policy)``."""
    net = load_network(cfg.topology)
    schedule = load_shock_schedule(cfg.shocks)
    if cfg.wm_mode == "learned" and wm_params is None and "no_world_model" not in cfg.ablations:
        wm_params = fit_learned_model(cfg, net, schedule)
    internal, external = make_critics(cfg, net)
    extra = {
        "episode": index,
        "variant": cfg.variant,
        "baseline": cfg.baseline,
        "p_base": reference_profit(cfg, seed),
    }
    return run_loop_episode(
        net,
        schedule,
        cfg.env_config(),
        cfg.loop_config(),
        make_policy(cfg, net),
        internal,
        external,
        make_world_model(cfg, net, seed, wm_params),
        seed,
        header_extra=extra,
    )


def _episode_job(cfg_json: str, index: int, wm_json: str | None) -> tuple[str, dict]:
    from .config import from_dict

    cfg = from_dict(json.loads(cfg_json))
    params = WorldModelParams.from_dict(json.loads(wm_json)) if wm_json else None
    elog, policy = run_episode(cfg, episode_seed(cfg.seed, index), index, params)
    return elog.to_jsonl(), policy.to_dict()


@dataclass
class RunResult:
    run_dir: Path
    logs: list[EpisodeLog]
    metrics: list[dict]


def new_run_dir(base: str | Path, label: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    path = Path(base) / f"{stamp}-{label}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def run(cfg: ExperimentConfig, out: str | Path = "runs", run_dir: str | Path | None = None) -> RunResult:
    """Run ``cfg.episodes`` episodes and write every artifact."""
    path = Path(run_dir) if run_dir is not None else new_run_dir(out, cfg.variant)
    (path / "episodes").mkdir(parents=True, exist_ok=True)
    (path / "checkpoints").mkdir(exist_ok=True)
    (path / "config.json").write_text(cfg.to_json())

    wm_json = None
    if cfg.wm_mode == "learned" and "no_world_model" not in cfg.ablations and cfg.baseline == "planner":
        net = load_network(cfg.topology)
        params = fit_learned_model(cfg, net, load_shock_schedule(cfg.shocks))
        save_params(params, path / "checkpoints" / "world_model.json")
        wm_json = json.dumps(params.to_dict())

    jobs = [(cfg.to_json(), i, wm_json) for i in range(cfg.episodes)]
    if cfg.workers > 1 and cfg.episodes > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_episode_job, *zip(*jobs)))
    else:
        results = [_episode_job(*job) for job in jobs]

    for i, (text, policy) in enumerate(results):
        (path / "episodes" / f"episode-{i:03d}.jsonl").write_text(text)
        (path / "checkpoints" / f"policy-{i:03d}.json").write_text(json.dumps(policy, sort_keys=True) + "\n")
    logs, rows = analyze(path)
    return RunResult(path, logs, rows)


def analyze(run_dir: str | Path) -> tuple[list[EpisodeLog], list[dict]]:
    """Regenerate the CSV artifacts of ``run_dir`` from its episode logs."""
    run_dir = Path(run_dir)
    files = sorted((run_dir / "episodes").glob("*.jsonl"))
    if not files:
        raise CorruptLog(run_dir / "episodes", 0, "no episode logs found")
    logs = [EpisodeLog.read(f) for f in files]
    for f, elog in zip(files, logs):
        if elog.end is None:
            raise CorruptLog(f, len(elog.records), "log ends without an end record (truncated)")

    rows, signals, losses = [], [], []
    for elog in logs:
        h = elog.header
        rep = metrics.metric_report(elog)
        rows.append(rep.row(episode=h.get("episode", 0), seed=h["seed"], variant=h.get("variant", "")))
        for s in metrics.signal_rows(elog):
            signals.append({"episode": h.get("episode", 0), **s})
        for r in metrics.loss_rows(elog):
            losses.append({"episode": h.get("episode", 0), **r})

    metrics.write_csv(run_dir / "metrics.csv", metrics.to_csv(rows, metrics.METRIC_COLUMNS))
    metrics.write_csv(run_dir / "signals.csv", metrics.to_csv(signals, metrics.SIGNAL_COLUMNS))
    metrics.write_csv(run_dir / "loss-trajectory.csv", metrics.to_csv(losses, metrics.LOSS_COLUMNS))
    try:
        corr = metrics.correlation_matrix(signals)
        text = metrics.correlation_csv(corr)
    except metrics.InsufficientSamples:
        text = metrics.to_csv([], ("signal",) + metrics.SIGNALS)
    metrics.write_csv(run_dir / "correlation.csv", text)
    return logs, rows


# ---------------------------------------------------------------------------
# ablations and sweeps


def ablate(base: ExperimentConfig, flags: Sequence[str], out: str | Path = "runs") -> tuple[Path, list[dict]]:
    """Run the full planner and one arm per ablation flag on paired seeds.

    Writes ``ablation.csv`` with each arm's mean step reward and its paired
    win rate against the full planner.
    """
    root = new_run_dir(out, "ablation")
    arms = {"full": replace(base, ablations=(), baseline="planner")}
    for flag in flags:
        arms[flag] = replace(base, ablations=(flag,), baseline="planner")
    results = {name: run(cfg, run_dir=root / name) for name, cfg in arms.items()}
    full = np.array([r["mean_reward"] for r in results["full"].metrics])
    summary = []
    for name, res in results.items():
        arm = np.array([r["mean_reward"] for r in res.metrics])
        summary.append(
            {
                "arm": name,
                "episodes": len(arm),
                "mean_reward": float(arm.mean()),
                "full_minus_arm": float((full - arm).mean()),
                "full_win_rate": float(np.mean(full > arm)) if name != "full" else None,
            }
        )
    cols = ("arm", "episodes", "mean_reward", "full_minus_arm", "full_win_rate")
    metrics.write_csv(root / "ablation.csv", metrics.to_csv(summary, cols))
    return root, summary


SWEEP_PARAMS = {"N": "n_candidates", "K": "buffer_size"}


def sweep(base: ExperimentConfig, param: str, values: Sequence[int], out: str | Path = "runs") -> tuple[Path, list[dict]]:
    """Run ``base`` once per value of N or K on paired seeds; writes ``sweep-<param>.csv``."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}")
    if not values:
        raise ValueError("sweep needs at least one value")
    root = new_run_dir(out, f"sweep-{param}")
    rows = []
    for v in values:
        cfg = replace(base, **{SWEEP_PARAMS[param]: int(v)})
        t0 = time.perf_counter()
        try:
            res = run(cfg, run_dir=root / f"{param}={v}")
        except Exception as exc:  # keep sweeping; the cell records the failure
            log.error("sweep cell %s=%s failed: %s", param, v, exc)
            rows.append({"param": param, "value": v, "error": f"{type(exc).__name__}: {exc}"})
            continue
        wall = time.perf_counter() - t0
        steps = sum(r["steps"] for r in res.metrics)
        n_eff = cfg.loop_config().n_candidates
        rows.append(
            {
                "param": param,
                "value": v,
                "episodes": len(res.metrics),
                "mean_return": float(np.mean([r["return"] for r in res.metrics])),
                "mean_reward": float(np.mean([r["mean_reward"] for r in res.metrics])),
                "mean_updates": float(np.mean([r["updates"] for r in res.metrics])),
                "candidate_evals": steps * n_eff,
                "wall_clock_s": wall,
                "error": None,
            }
        )
    cols = ("param", "value", "episodes", "mean_return", "mean_reward", "mean_updates", "candidate_evals", "wall_clock_s", "error")
    metrics.write_csv(root / f"sweep-{param}.csv", metrics.to_csv(rows, cols))
    return root, rows
