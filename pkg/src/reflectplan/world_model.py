"""Predicting an intervention's physical reward before it is executed.

Two interchangeable modes:

``oracle``
    Clone the simulator, play the candidate, continue with a default policy
    for the rest of the horizon and return the discounted reward. Future
    shocks that have not fired yet are removed from the clone by default, so
    the model knows the present constraints but not the future ones.

``learned``
    A linear latent model. Observations are encoded with a fixed linear map
    (PCA of the training observations unless one is supplied), dynamics
    ``z' = A z + B u + c`` and a reward head ``r = w . z' + b`` are fitted by
    ridge regression, and candidates are scored by unrolling the latent
    dynamics with the candidate's embedding held fixed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dynamics import Intervention, Observation, hold_policy, observation_features
from .errors import DimensionMismatch, InsufficientData, UnfittedModel
from .network import SupplyNetwork

log = logging.getLogger(__name__)

DEFAULT_HORIZON = 3
DEFAULT_DISCOUNT = 0.9
DEFAULT_LATENT_DIM = 16
RIDGE_LAMBDA = 1e-3


def rollout_rng(seed: int, step: int, k: int) -> np.random.Generator:
    """Rollout-local stream for candidate ``k`` at decision step ``step``."""
    return np.random.default_rng([seed, step, k, 0x57])


# ---------------------------------------------------------------------------
# oracle mode


def rollout_oracle(
    env_snapshot,
    action,
    horizon: int = DEFAULT_HORIZON,
    default_policy: Callable = hold_policy,
    discount: float = DEFAULT_DISCOUNT,
    rng: np.random.Generator | None = None,
    foresee_shocks: bool = False,
) -> float:
    """Discounted return of ``action`` followed by ``default_policy``.

    Works with any environment exposing ``clone(keep_schedule=...)``,
    ``step(action, rng) -> (obs, feedback)`` and ``terminal``. The live
    environment is never touched.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    env = env_snapshot.clone(keep_schedule=foresee_shocks)
    total = 0.0
    a = action
    for h in range(horizon):
        if env.terminal:
            break
        _, fb = env.step(a, rng)
        total += discount**h * fb.reward
        a = default_policy(env)
    return float(total)


# ---------------------------------------------------------------------------
# learned mode


@dataclass(frozen=True)
class Featurizer:
    """Maps domain objects onto the vectors the latent model consumes."""

    obs_fn: Callable[[object], np.ndarray]
    action_fn: Callable[[object], np.ndarray]
    obs_dim: int
    action_dim: int


def embed_action(action: Intervention, net: SupplyNetwork) -> np.ndarray:
    """Fixed-length action vector.

    Layout: per edge ordered quantity / supplier capacity; per source
    production / capacity; per node halt flag; export quota (0 if unset).
    """
    out = [action.q_buy.get(e.id, 0.0) / net.node(e.source).capacity for e in net.edges]
    out += [action.produce.get(s, 0.0) / net.node(s).capacity for s in net.sources]
    out += [1.0 if n in action.halts else 0.0 for n in net.node_ids]
    quota = (action.export_params or {}).get("quota")
    out.append(float(quota) if quota is not None else 0.0)
    return np.asarray(out, dtype=float)


def semisim_featurizer(net: SupplyNetwork) -> Featurizer:
    from .dynamics import feature_dim

    return Featurizer(
        obs_fn=lambda o: observation_features(o, net),
        action_fn=lambda a: embed_action(a, net),
        obs_dim=feature_dim(net),
        action_dim=len(net.edges) + len(net.sources) + len(net.nodes) + 1,
    )


def _as_vector(x, fn, dim: int, what: str) -> np.ndarray:
    v = np.asarray(x, dtype=float) if isinstance(x, (np.ndarray, list, tuple)) else fn(x)
    if v.shape != (dim,):
        raise DimensionMismatch(f"{what} has shape {v.shape}, expected ({dim},)")
    return v


@dataclass(frozen=True)
class WorldModelParams:
    encoder: np.ndarray  # (d_z, d_obs)
    encoder_bias: np.ndarray  # (d_z,)
    A: np.ndarray | None = None  # (d_z, d_z)
    B: np.ndarray | None = None  # (d_z, d_u)
    c: np.ndarray | None = None  # (d_z,)
    reward_w: np.ndarray | None = None  # (d_z,)
    reward_b: float = 0.0
    n_samples: int = 0
    residual_norm: float = math.inf
    ridge: float = RIDGE_LAMBDA

    @property
    def latent_dim(self) -> int:
        return self.encoder.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.encoder.shape[1]

    @property
    def fitted(self) -> bool:
        return self.A is not None

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else np.asarray(x).tolist()

        return {
            "encoder": arr(self.encoder),
            "encoder_bias": arr(self.encoder_bias),
            "A": arr(self.A),
            "B": arr(self.B),
            "c": arr(self.c),
            "reward_w": arr(self.reward_w),
            "reward_b": self.reward_b,
            "n_samples": self.n_samples,
            "residual_norm": None if math.isinf(self.residual_norm) else self.residual_norm,
            "ridge": self.ridge,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldModelParams":
        def arr(x):
            return None if x is None else np.asarray(x, dtype=float)

        return cls(
            encoder=arr(d["encoder"]),
            encoder_bias=arr(d["encoder_bias"]),
            A=arr(d.get("A")),
            B=arr(d.get("B")),
            c=arr(d.get("c")),
            reward_w=arr(d.get("reward_w")),
            reward_b=float(d.get("reward_b", 0.0)),
            n_samples=int(d.get("n_samples", 0)),
            residual_norm=math.inf if d.get("residual_norm") is None else float(d["residual_norm"]),
            ridge=float(d.get("ridge", RIDGE_LAMBDA)),
        )


def identity_params(dim: int, ridge: float = RIDGE_LAMBDA) -> WorldModelParams:
    return WorldModelParams(np.eye(dim), np.zeros(dim), ridge=ridge)


def zero_params(d_obs: int, d_z: int, d_u: int) -> WorldModelParams:
    """Explicitly initialized params whose dynamics and reward head are zero."""
    return WorldModelParams(
        encoder=np.zeros((d_z, d_obs)),
        encoder_bias=np.zeros(d_z),
        A=np.zeros((d_z, d_z)),
        B=np.zeros((d_z, d_u)),
        c=np.zeros(d_z),
        reward_w=np.zeros(d_z),
    )


def save_params(params: WorldModelParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), sort_keys=True))


def load_params(path: str | Path) -> WorldModelParams:
    return WorldModelParams.from_dict(json.loads(Path(path).read_text()))


def encode(obs, params: WorldModelParams, featurizer: Featurizer | None = None) -> np.ndarray:
    """Latent state z = encoder @ features + bias."""
    if isinstance(obs, np.ndarray) or featurizer is None:
        x = np.asarray(obs, dtype=float)
    else:
        x = featurizer.obs_fn(obs)
    if x.shape != (params.obs_dim,):
        raise DimensionMismatch(f"observation has {x.shape} features, encoder expects {params.obs_dim}")
    return params.encoder @ x + params.encoder_bias


def rollout_latent(
    z0: np.ndarray,
    action,
    horizon: int,
    params: WorldModelParams,
    discount: float = DEFAULT_DISCOUNT,
    featurizer: Featurizer | None = None,
) -> float:
    """Discounted sum of reward-head outputs along the latent trajectory.

    The action embedding is held for the whole horizon, mirroring the
    repeat-last-quantities continuation of the oracle.
    """
    if not params.fitted:
        raise UnfittedModel("world model has not been fitted or initialized")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    u = _action_vector(action, params, featurizer)
    z = np.asarray(z0, dtype=float)
    total = 0.0
    for h in range(horizon):
        z = params.A @ z + params.B @ u + params.c
        total += discount**h * float(params.reward_w @ z + params.reward_b)
    return total


def _action_vector(action, params: WorldModelParams, featurizer: Featurizer | None) -> np.ndarray:
    d_u = params.B.shape[1]
    if isinstance(action, (np.ndarray, list, tuple)) or featurizer is None:
        u = np.asarray(action, dtype=float)
    else:
        u = featurizer.action_fn(action)
    if u.shape != (d_u,):
        raise DimensionMismatch(f"action embedding has shape {u.shape}, expected ({d_u},)")
    return u


def _ridge(X: np.ndarray, Y: np.ndarray, lam: float) -> np.ndarray:
    gram = X.T @ X + lam * np.eye(X.shape[1])
    return np.linalg.solve(gram, X.T @ Y)


def pca_encoder(X: np.ndarray, d_z: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``d_z`` principal directions of ``X`` (rows are samples).

    Signs are fixed so the largest-magnitude loading of each direction is
    positive, which makes the encoder a deterministic function of the data.
    """
    mu = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mu, full_matrices=False)
    W = vt[:d_z]
    if W.shape[0] < d_z:
        W = np.vstack([W, np.zeros((d_z - W.shape[0], X.shape[1]))])
    for i, row in enumerate(W):
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            W[i] = -row
    return W, -W @ mu


def fit_world_model(
    transitions: Sequence[tuple],
    params: WorldModelParams | None = None,
    featurizer: Featurizer | None = None,
    latent_dim: int = DEFAULT_LATENT_DIM,
    ridge: float | None = None,
) -> WorldModelParams:
    """Ridge fit of latent dynamics and reward head.

    ``transitions`` holds ``(obs, action, reward, next_obs)`` tuples, either
    as domain objects (with a ``featurizer``) or as raw vectors. When
    ``params`` is None a PCA encoder is fitted first. The input params are
    not modified.
    """
    if params is not None:
        d_z = params.latent_dim
    else:
        d_z = latent_dim
    if len(transitions) < d_z:
        raise InsufficientData(f"need at least {d_z} transitions, got {len(transitions)}")
    lam = ridge if ridge is not None else (params.ridge if params is not None else RIDGE_LAMBDA)

    def obs_vec(o):
        return np.asarray(o, dtype=float) if featurizer is None or isinstance(o, np.ndarray) else featurizer.obs_fn(o)

    def act_vec(a):
        return np.asarray(a, dtype=float) if featurizer is None or isinstance(a, np.ndarray) else featurizer.action_fn(a)

    X0 = np.array([obs_vec(o) for o, _, _, _ in transitions])
    X1 = np.array([obs_vec(o2) for _, _, _, o2 in transitions])
    U = np.array([act_vec(a) for _, a, _, _ in transitions])
    r = np.array([float(rw) for _, _, rw, _ in transitions])

    if params is None:
        enc, bias = pca_encoder(np.vstack([X0, X1]), d_z)
        params = WorldModelParams(enc, bias, ridge=lam)
    elif X0.shape[1] != params.obs_dim:
        raise DimensionMismatch(f"transitions have {X0.shape[1]} features, encoder expects {params.obs_dim}")

    Z0 = X0 @ params.encoder.T + params.encoder_bias
    Z1 = X1 @ params.encoder.T + params.encoder_bias
    n = len(transitions)
    ones = np.ones((n, 1))
    design = np.hstack([Z0, U, ones])
    W = _ridge(design, Z1, lam)
    A, B, c = W[:d_z].T, W[d_z : d_z + U.shape[1]].T, W[-1]
    head = _ridge(np.hstack([Z1, ones]), r, lam)
    resid_dyn = design @ W - Z1
    resid_rew = np.hstack([Z1, ones]) @ head - r
    residual = float(math.sqrt((resid_dyn**2).sum() + (resid_rew**2).sum()) / math.sqrt(n))
    log.debug("world model fit: n=%d d_z=%d residual=%.3g", n, d_z, residual)
    return replace(
        params,
        A=A,
        B=B,
        c=c,
        reward_w=head[:-1],
        reward_b=float(head[-1]),
        n_samples=params.n_samples + n if params.fitted else n,
        residual_norm=residual,
        ridge=lam,
    )


# ---------------------------------------------------------------------------
# unified front end used by the planning loop


@dataclass
class OracleWorldModel:
    horizon: int = DEFAULT_HORIZON
    discount: float = DEFAULT_DISCOUNT
    seed: int = 0
    foresee_shocks: bool = False
    default_policy: Callable = hold_policy
    mode: str = field(default="oracle", init=False)

    def predict(self, env, obs, action, step: int, k: int) -> float:
        return rollout_oracle(
            env,
            action,
            self.horizon,
            self.default_policy,
            self.discount,
            rollout_rng(self.seed, step, k),
            self.foresee_shocks,
        )


@dataclass
class LearnedWorldModel:
    params: WorldModelParams
    featurizer: Featurizer
    horizon: int = DEFAULT_HORIZON
    discount: float = DEFAULT_DISCOUNT
    mode: str = field(default="learned", init=False)

    def predict(self, env, obs, action, step: int, k: int) -> float:
        z0 = encode(obs, self.params, self.featurizer)
        return rollout_latent(z0, action, self.horizon, self.params, self.discount, self.featurizer)


# ---------------------------------------------------------------------------
# synthetic linear environment


@dataclass
class LinearToyEnv:
    """x' = A x + B u + c with reward w . x' + b; no noise.

    Exposes the same ``clone``/``step``/``terminal`` surface as the supply
    simulator so :func:`rollout_oracle` runs on it unchanged. Its default
    continuation (:func:`repeat_last_action`) replays the previous input.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    w: np.ndarray
    b: float
    x: np.ndarray
    t_max: int = 1000
    t: int = 0
    last_action: np.ndarray | None = None

    @classmethod
    def random(cls, seed: int, dim: int = 4, action_dim: int = 2) -> "LinearToyEnv":
        rng = np.random.default_rng(seed)
        M = rng.normal(size=(dim, dim))
        A = 0.8 * M / max(1e-9, np.max(np.abs(np.linalg.eigvals(M))))
        return cls(
            A=A,
            B=rng.normal(size=(dim, action_dim)),
            c=0.1 * rng.normal(size=dim),
            w=rng.normal(size=dim),
            b=float(rng.normal()),
            x=rng.normal(size=dim),
            last_action=np.zeros(action_dim),
        )

    @property
    def terminal(self) -> bool:
        return self.t >= self.t_max

    def clone(self, keep_schedule: bool = True) -> "LinearToyEnv":
        return replace(self, x=self.x.copy(), last_action=None if self.last_action is None else self.last_action.copy())

    def step(self, action, rng=None):
        u = np.asarray(action, dtype=float)
        self.x = self.A @ self.x + self.B @ u + self.c
        self.t += 1
        self.last_action = u
        return self.x.copy(), _ToyFeedback(float(self.w @ self.x + self.b))


@dataclass(frozen=True)
class _ToyFeedback:
    reward: float


def repeat_last_action(env: LinearToyEnv) -> np.ndarray:
    return env.last_action


def toy_transitions(env: LinearToyEnv, n: int, seed: int) -> list[tuple]:
    """``n`` transitions from random inputs, restarting from random states."""
    rng = np.random.default_rng(seed)
    live = env.clone()
    out = []
    for i in range(n):
        if i % 20 == 0:
            live.x = rng.normal(size=live.x.shape)
        x0 = live.x.copy()
        u = rng.normal(size=live.B.shape[1])
        x1, fb = live.step(u)
        out.append((x0, u, fb.reward, x1))
    return out
