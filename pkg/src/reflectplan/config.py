"""Experiment configuration: loading, overrides and validation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .dynamics import EnvConfig
from .errors import ConfigError
from .loop import ABLATIONS, LoopConfig

log = logging.getLogger(__name__)

BASELINES = ("planner", "halt_llm_standin", "random", "static_hold")
ACTORS = ("parametric", "llm")
CRITICS = ("scripted", "llm")
WM_MODES = ("oracle", "learned")


@dataclass(frozen=True)
class LLMSettings:
    endpoint: str | None = None
    model: str = "default"
    key_env: str = "REFLECTPLAN_LLM_KEY"
    timeout: float = 30.0
    retries: int = 2
    max_in_flight: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    topology: str = "semisim-v1"
    shocks: str = "shocks-default"
    actor: str = "parametric"
    critic: str = "scripted"
    wm_mode: str = "oracle"
    baseline: str = "planner"
    ablations: tuple[str, ...] = ()
    alpha: float = 0.3
    beta: float = 0.7
    n_candidates: int = 3
    buffer_size: int = 3
    temperature: float = 1.0
    t_max: int = 30
    horizon: int = 3
    discount: float = 0.9
    lr: float = 0.05
    history_len: int = 3
    episodes: int = 1
    seed: int = 0
    workers: int = 1
    latent_dim: int = 16
    wm_train_episodes: int = 8
    env: Mapping[str, Any] = field(default_factory=dict)
    llm: LLMSettings = LLMSettings()

    def __post_init__(self):
        object.__setattr__(self, "ablations", tuple(sorted(set(self.ablations))))
        object.__setattr__(self, "env", dict(self.env))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        d["env"] = dict(sorted(self.env.items()))
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def env_config(self) -> EnvConfig:
        return EnvConfig.from_dict({**self.env, "t_max": self.t_max})

    def loop_config(self) -> LoopConfig:
        flags = {a: a in self.ablations for a in ABLATIONS}
        n = self.n_candidates
        if self.baseline != "planner":
            flags = {a: True for a in ABLATIONS}
            n = 1
        return LoopConfig(
            alpha=self.alpha,
            beta=self.beta,
            n_candidates=n,
            buffer_size=self.buffer_size,
            temperature=self.temperature,
            lr=self.lr,
            history_len=self.history_len,
            **flags,
        )

    @property
    def variant(self) -> str:
        if self.baseline != "planner":
            return self.baseline
        return "+".join(self.ablations) if self.ablations else "full"


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check ranges and consistency; returns the config with baseline overrides applied."""
    checks = [
        (cfg.n_candidates >= 1, "n_candidates (N) must be >= 1"),
        (cfg.buffer_size >= 1, "buffer_size (K) must be >= 1"),
        (cfg.t_max >= 1, "t_max must be >= 1"),
        (cfg.horizon >= 1, "horizon must be >= 1"),
        (cfg.episodes >= 1, "episodes must be >= 1"),
        (cfg.workers >= 1, "workers must be >= 1"),
        (cfg.temperature > 0, "temperature must be > 0"),
        (0 <= cfg.discount <= 1, "discount must lie in [0, 1]"),
        (cfg.alpha >= 0 and cfg.beta >= 0, "alpha and beta must be non-negative"),
        (cfg.alpha > 0 or cfg.beta > 0, "alpha and beta cannot both be zero"),
        (cfg.lr >= 0, "lr must be >= 0"),
        (cfg.latent_dim >= 1, "latent_dim must be >= 1"),
        (cfg.actor in ACTORS, f"actor must be one of {ACTORS}"),
        (cfg.critic in CRITICS, f"critic must be one of {CRITICS}"),
        (cfg.wm_mode in WM_MODES, f"wm_mode must be one of {WM_MODES}"),
        (cfg.baseline in BASELINES, f"baseline must be one of {BASELINES}"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    unknown = set(cfg.ablations) - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation flag(s) {sorted(unknown)}; choose from {ABLATIONS}")
    if (cfg.actor == "llm" or cfg.critic == "llm") and not cfg.llm.endpoint:
        raise ConfigError("an llm backend needs llm.endpoint")
    try:
        cfg.env_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid env overrides: {exc}") from None
    if cfg.baseline != "planner" and cfg.ablations:
        log.warning("baseline %s overrides ablation flags %s", cfg.baseline, list(cfg.ablations))
        cfg = replace(cfg, ablations=())
    return cfg


def from_dict(d: Mapping) -> ExperimentConfig:
    d = dict(d)
    names = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    if "llm" in d and not isinstance(d["llm"], LLMSettings):
        llm = dict(d["llm"] or {})
        bad = set(llm) - {f.name for f in fields(LLMSettings)}
        if bad:
            raise ConfigError(f"unknown llm key(s): {sorted(bad)}")
        d["llm"] = LLMSettings(**llm)
    if "ablations" in d:
        abl = d["ablations"]
        d["ablations"] = tuple([abl] if isinstance(abl, str) else abl)
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(ref: str | Path | None = None, overrides: Mapping | None = None) -> ExperimentConfig:
    """Load a config by path or bundled name, apply overrides and validate."""
    data: dict = {}
    if ref is not None:
        path = Path(ref)
        try:
            if path.exists():
                data = json.loads(path.read_text())
            else:
                res = resources.files("reflectplan").joinpath("data").joinpath("configs").joinpath(f"{ref}.json")
                if not res.is_file():
                    raise ConfigError(f"no config file or bundled config named {ref!r}")
                data = json.loads(res.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {ref} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    merged = {**data}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k == "llm":
            merged["llm"] = {**merged.get("llm", {}), **v}
        elif k == "env":
            merged["env"] = {**merged.get("env", {}), **v}
        else:
            merged[k] = v
    return validate(from_dict(merged))
