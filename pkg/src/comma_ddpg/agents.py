"""Local and global actor-critic agents for corridor signal control.

Observations are the simulator's joint observation (``M + sum(N_lane)``
entries). A critic sees the observation followed by the joint action, each
green duration rescaled from ``[d_min, d_max]`` to ``[-1, 1]``, which gives the
``2M + sum(N_lane)`` input width. Actors end in tanh and are mapped affinely
onto ``[d_min, d_max]``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .errors import CheckpointError, NonFiniteError
from .nn import GradientSet, MlpParams

HIDDEN = (64, 64)


class RewardCase(enum.Enum):
    GREEN_END_TRAFFIC_LEFT = 1
    GREEN_ON_NO_TRAFFIC = 2


def local_reward(N_mt, g_mt, case: RewardCase | None, R_max=1.0, N_max=100.0, G_max=90.0) -> float:
    """Reward of one intersection at the end of its main-street green.

    Case 1 scores vehicles left standing when green ends, Case 2 scores green
    time spent with no traffic to serve. ``case=None`` is the no-reward case.
    """
    if N_mt < 0:
        raise ValueError("negative vehicle count")
    if not 0 <= g_mt <= G_max:
        raise ValueError(f"idle green {g_mt} outside [0, {G_max}]")
    if N_max <= 0 or G_max <= 0:
        raise ValueError("N_max and G_max must be positive")
    if case is None:
        return 0.0
    case = RewardCase(case)
    if case is RewardCase.GREEN_END_TRAFFIC_LEFT:
        return float(R_max) if N_mt / N_max <= 1.0 / N_max else -R_max * N_mt / N_max
    return float(R_max) if g_mt <= 1.0 else -R_max * g_mt / G_max


def global_reward(wait_times: Sequence, M: int | None = None) -> float:
    """Negative mean over intersections of summed vehicle waiting seconds.

    ``wait_times[m]`` is any array-like of per-vehicle waits at intersection m
    (a single pre-summed number works too).
    """
    if len(wait_times) == 0:
        raise ValueError("no intersections")
    M = len(wait_times) if M is None else M
    if M < 1 or M != len(wait_times):
        raise ValueError(f"expected {M} intersections, got {len(wait_times)}")
    total = 0.0
    for w in wait_times:
        w = np.asarray(w, dtype=float)
        if np.any(w < 0):
            raise ValueError("negative waiting time")
        total += float(w.sum())
    return -total / M


@dataclass
class Transition:
    """One decision interval. All action/reward/wait vectors have length M."""

    S: np.ndarray
    A: np.ndarray
    R: np.ndarray
    S_next: np.ndarray
    A_next: np.ndarray
    waits: np.ndarray
    t: float = 0.0
    epoch: int = 0


@dataclass
class Batch:
    S: np.ndarray
    A: np.ndarray
    R: np.ndarray
    S_next: np.ndarray
    A_next: np.ndarray
    waits: np.ndarray
    r_global: np.ndarray | None = None

    @classmethod
    def from_transitions(cls, items: Sequence[Transition], global_reward_scale: float = 1.0) -> "Batch":
        if not items:
            raise ValueError("empty batch")
        st = lambda k: np.stack([np.asarray(getattr(x, k), dtype=float) for x in items])
        b = cls(st("S"), st("A"), st("R"), st("S_next"), st("A_next"), st("waits"))
        M = b.waits.shape[1]
        b.r_global = np.array([global_reward(w, M) for w in b.waits]) * global_reward_scale
        return b

    def __len__(self):
        return self.S.shape[0]


@dataclass
class _Bounds:
    d_min: float
    d_max: float
    cycle_lengths: np.ndarray

    @property
    def mid(self):
        return 0.5 * (self.d_min + self.d_max)

    @property
    def half(self):
        return 0.5 * (self.d_max - self.d_min)

    def to_seconds(self, u):
        return self.mid + self.half * np.asarray(u)

    def to_unit(self, a):
        return (np.asarray(a) - self.mid) / self.half


@dataclass
class LocalAgent:
    m: int
    actor: MlpParams
    critic: MlpParams
    target_actor: MlpParams
    target_critic: MlpParams
    gamma: float
    R_max: float
    N_max: float
    G_max: float
    bounds: _Bounds

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        M = self.M
        if self.critic.n_in != self.actor.n_in + M:
            raise ValueError("critic width must be actor width + M")
        if self.actor.n_out != 1 or self.critic.n_out != 1:
            raise ValueError("local actor and critic have one output")

    @property
    def M(self) -> int:
        return self.bounds.cycle_lengths.shape[0]


@dataclass
class GlobalAgent:
    actor: MlpParams
    critic: MlpParams
    target_actor: MlpParams
    target_critic: MlpParams
    gamma: float
    bounds: _Bounds
    actor_calls: int = field(default=0, compare=False)

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        M = self.M
        if self.actor.n_out != 2 * M or self.critic.n_out != 1:
            raise ValueError("global actor has 2M outputs, critic one")
        if self.critic.n_in != self.actor.n_in + M:
            raise ValueError("critic width must be actor width + M")

    @property
    def M(self) -> int:
        return self.bounds.cycle_lengths.shape[0]


def make_bounds(d_min, d_max, cycle_lengths) -> _Bounds:
    if not d_min < d_max:
        raise ValueError("d_min must be below d_max")
    return _Bounds(float(d_min), float(d_max), np.asarray(cycle_lengths, dtype=float).copy())


def new_global_agent(obs_dim: int, bounds: _Bounds, rng: np.random.Generator,
                     gamma=0.9, hidden=HIDDEN) -> GlobalAgent:
    M = bounds.cycle_lengths.shape[0]
    actor = MlpParams.init((obs_dim, *hidden, 2 * M), rng, "tanh")
    critic = MlpParams.init((obs_dim + M, *hidden, 1), rng, "linear")
    return GlobalAgent(actor, critic, actor.copy(), critic.copy(), gamma, bounds)


def local_from_global(g: GlobalAgent, m: int, R_max=1.0, N_max=100.0, G_max=None,
                      gamma=None) -> LocalAgent:
    """Local agent whose actor reuses the global trunk and duration head ``m``.

    The critic has the same shape as the global critic and is copied whole.
    """
    ga = g.actor
    sizes = ga.layer_sizes[:-1] + (1,)
    actor = MlpParams.zeros(sizes, "tanh")
    for Wl, bl, Wg, bg in zip(actor.weights[:-1], actor.biases[:-1], ga.weights[:-1], ga.biases[:-1]):
        Wl[:] = Wg
        bl[:] = bg
    actor.weights[-1][0] = ga.weights[-1][m]
    actor.biases[-1][0] = ga.biases[-1][m]
    critic = g.critic.copy()
    G_max = g.bounds.d_max if G_max is None else G_max
    return LocalAgent(m, actor, critic, actor.copy(), critic.copy(),
                      g.gamma if gamma is None else gamma, R_max, N_max, G_max, g.bounds)


# -- encodings -----------------------------------------------------------------


def critic_input(S, A, bounds: _Bounds) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return np.concatenate([S, bounds.to_unit(A)], axis=1)


def _check_obs(params: MlpParams, obs):
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != params.n_in:
        raise ValueError(f"observation width {obs.shape[-1]} != {params.n_in}")
    return obs


def act_local(agent: LocalAgent, observation) -> float | np.ndarray:
    """Green seconds in ``[d_min, d_max]``; a batch of rows gives a vector."""
    obs = _check_obs(agent.actor, observation)
    u = nn.forward(agent.actor, obs)[..., 0]
    a = np.clip(agent.bounds.to_seconds(u), agent.bounds.d_min, agent.bounds.d_max)
    return float(a) if np.ndim(a) == 0 else a


def act_global(agent: GlobalAgent, joint_observation) -> tuple[np.ndarray, np.ndarray]:
    """``(durations, weights)``: M green seconds and M global weights in [0, 1]."""
    obs = _check_obs(agent.actor, joint_observation)
    agent.actor_calls += 1
    out = nn.forward(agent.actor, obs)
    M = agent.M
    d = np.clip(agent.bounds.to_seconds(out[..., :M]), agent.bounds.d_min, agent.bounds.d_max)
    w = np.clip(0.5 * (out[..., M:] + 1.0), 0.0, 1.0)
    return d, w


# -- losses ----------------------------------------------------------------------


def _finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite {what}")
    return x


def _check_batch(batch: Batch, n_obs: int, M: int):
    if len(batch) < 1:
        raise ValueError("empty batch")
    for name, arr, w in (("S", batch.S, n_obs), ("S_next", batch.S_next, n_obs),
                         ("A", batch.A, M), ("A_next", batch.A_next, M), ("R", batch.R, M)):
        if arr.ndim != 2 or arr.shape[1] != w or arr.shape[0] != len(batch):
            raise ValueError(f"batch.{name} has shape {arr.shape}, expected (B, {w})")


def local_critic_target(agent: LocalAgent, batch: Batch) -> np.ndarray:
    """``R[:, m] + gamma * Q'(S', A')`` with slot m of A' from the target actor."""
    _check_batch(batch, agent.actor.n_in, agent.M)
    m = agent.m
    A2 = batch.A_next.copy()
    u = nn.forward(agent.target_actor, batch.S_next)[:, 0]
    A2[:, m] = np.clip(agent.bounds.to_seconds(u), agent.bounds.d_min, agent.bounds.d_max)
    q = nn.forward(agent.target_critic, critic_input(batch.S_next, A2, agent.bounds))[:, 0]
    return batch.R[:, m] + agent.gamma * q


def _critic_mse(critic: MlpParams, X, y) -> tuple[float, GradientSet]:
    tr = nn.trace(critic, X)
    q = tr.output[:, 0]
    err = q - y
    loss = _finite(float(np.mean(err ** 2)), "critic loss")
    g, _ = nn.vjp(critic, tr, (2.0 / len(y)) * err[:, None])
    return loss, g


def local_critic_loss(agent: LocalAgent, batch: Batch, y=None) -> tuple[float, GradientSet]:
    """Mean squared TD error of the online critic and its gradient."""
    if y is None:
        y = local_critic_target(agent, batch)
    _check_batch(batch, agent.actor.n_in, agent.M)
    return _critic_mse(agent.critic, critic_input(batch.S, batch.A, agent.bounds), np.asarray(y, dtype=float))


def _actor_through_critic(actor: MlpParams, critic: MlpParams, bounds: _Bounds, S, A_base, slots):
    """``-mean Q(S, A)`` where A[:, slots] come from the actor; gradient w.r.t. the actor.

    ``slots[j]`` is the action column driven by actor output j.
    """
    B = S.shape[0]
    tra = nn.trace(actor, S)
    u = tra.output
    k = len(slots)
    A = A_base.copy()
    raw = bounds.to_seconds(u[:, :k])
    A[:, slots] = raw
    trc = nn.trace(critic, critic_input(S, A, bounds))
    loss = _finite(-float(np.mean(trc.output[:, 0])), "actor loss")
    _, dX = nn.vjp(critic, trc, np.full((B, 1), -1.0 / B))
    n_obs = S.shape[1]
    dU = np.zeros_like(u)
    dU[:, :k] = dX[:, n_obs:][:, slots]  # unit-scaled action equals the tanh output
    g, _ = nn.vjp(actor, tra, dU)
    return loss, g


def local_actor_loss(agent: LocalAgent, batch: Batch) -> tuple[float, GradientSet]:
    """``-mean Q(S, A with slot m = mu_m(S))``; gradient for the actor only."""
    _check_batch(batch, agent.actor.n_in, agent.M)
    return _actor_through_critic(agent.actor, agent.critic, agent.bounds, batch.S, batch.A, [agent.m])


def _r_global(batch: Batch, M: int):
    if batch.r_global is None:
        return np.array([global_reward(w, M) for w in batch.waits])
    return batch.r_global


def global_critic_target(agent: GlobalAgent, batch: Batch) -> np.ndarray:
    _check_batch(batch, agent.actor.n_in, agent.M)
    M = agent.M
    u = nn.forward(agent.target_actor, batch.S_next)[:, :M]
    A2 = np.clip(agent.bounds.to_seconds(u), agent.bounds.d_min, agent.bounds.d_max)
    q = nn.forward(agent.target_critic, critic_input(batch.S_next, A2, agent.bounds))[:, 0]
    return _r_global(batch, M) + agent.gamma * q


def global_critic_loss(agent: GlobalAgent, batch: Batch, y=None) -> tuple[float, GradientSet]:
    if y is None:
        y = global_critic_target(agent, batch)
    _check_batch(batch, agent.actor.n_in, agent.M)
    return _critic_mse(agent.critic, critic_input(batch.S, batch.A, agent.bounds), np.asarray(y, dtype=float))


def global_actor_loss(agent: GlobalAgent, batch: Batch) -> tuple[float, GradientSet]:
    """Gradient reaches the actor through its M duration outputs only."""
    _check_batch(batch, agent.actor.n_in, agent.M)
    return _actor_through_critic(agent.actor, agent.critic, agent.bounds, batch.S, batch.A,
                                 list(range(agent.M)))


# -- bundles -----------------------------------------------------------------------

_NETS = ("actor", "critic", "target_actor", "target_critic")


def _save_nets(agent, d: Path, meta: dict):
    d.mkdir(parents=True, exist_ok=True)
    for name in _NETS:
        nn.save_params(getattr(agent, name), d / f"{name}.bin")
    b = agent.bounds
    meta.update(gamma=agent.gamma, d_min=b.d_min, d_max=b.d_max, cycle_lengths=b.cycle_lengths.tolist())
    (d / "meta.json").write_text(json.dumps(meta, indent=2))


def _load_nets(d: Path):
    try:
        meta = json.loads((d / "meta.json").read_text())
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{d}: unreadable metadata ({e})") from None
    nets = {name: nn.load_params(d / f"{name}.bin") for name in _NETS}
    bounds = make_bounds(meta["d_min"], meta["d_max"], meta["cycle_lengths"])
    return meta, nets, bounds


def save_local_agent(agent: LocalAgent, d) -> None:
    _save_nets(agent, Path(d), dict(kind="local", m=agent.m, R_max=agent.R_max,
                                    N_max=agent.N_max, G_max=agent.G_max))


def load_local_agent(d) -> LocalAgent:
    meta, nets, bounds = _load_nets(Path(d))
    if meta.get("kind") != "local":
        raise CheckpointError(f"{d} does not hold a local agent")
    return LocalAgent(meta["m"], **nets, gamma=meta["gamma"], R_max=meta["R_max"],
                      N_max=meta["N_max"], G_max=meta["G_max"], bounds=bounds)


def save_global_agent(agent: GlobalAgent, d) -> None:
    _save_nets(agent, Path(d), dict(kind="global"))


def load_global_agent(d) -> GlobalAgent:
    meta, nets, bounds = _load_nets(Path(d))
    if meta.get("kind") != "global":
        raise CheckpointError(f"{d} does not hold a global agent")
    return GlobalAgent(**nets, gamma=meta["gamma"], bounds=bounds)


def save_bundle(local_agents: Sequence[LocalAgent], global_agent: GlobalAgent | None, d) -> None:
    d = Path(d)
    for a in local_agents:
        save_local_agent(a, d / f"local_{a.m}")
    if global_agent is not None:
        save_global_agent(global_agent, d / "global")
    (d / "bundle.json").write_text(json.dumps({"M": len(local_agents), "has_global": global_agent is not None}))


def load_bundle(d, with_global: bool = True) -> tuple[list[LocalAgent], GlobalAgent | None]:
    d = Path(d)
    try:
        info = json.loads((d / "bundle.json").read_text())
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{d}: not an agent bundle ({e})") from None
    locals_ = [load_local_agent(d / f"local_{m}") for m in range(info["M"])]
    g = load_global_agent(d / "global") if with_global and info["has_global"] else None
    return locals_, g
