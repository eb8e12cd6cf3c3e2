"""Training loop: on-policy data generation with local/global competition,
per-intersection local updates and global updates.

Every epoch clears the replay buffer (unless ``on_policy`` is off), runs
``rollouts_per_epoch`` simulated hours to refill it, then performs
``episodes_per_epoch`` rounds of updates for every local agent and the global
agent. Decisions are made once per signal cycle at each intersection.
"""
from __future__ import annotations

import csv
import json
import logging
import pickle
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import agents as ag
from . import nn
from .agents import Batch, GlobalAgent, LocalAgent, RewardCase, Transition
from .errors import ConfigError, InsufficientDataError, NonFiniteError
from .sim import CorridorConfig, Simulator

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "total_wait_s", "avg_speed_mps", "throughput_total",
                 "critic_loss_mean", "actor_loss_mean", "global_critic_loss")


@dataclass
class TrainConfig:
    epochs: int = 20
    episodes_per_epoch: int = 50
    rollouts_per_epoch: int = 4
    sim_seconds_per_rollout: float = 3600.0
    batch_size: int = 32
    gamma: float = 0.9
    tau: float = 0.995
    # when set, each update draws tau uniformly from [lo, hi) instead
    tau_range: tuple | None = None
    actor_lr: float = 1e-3
    critic_lr: float = 1e-2
    global_actor_lr: float | None = None
    global_critic_lr: float | None = None
    momentum: float = 0.0
    hidden: tuple = (64, 64)
    seed: int = 0
    eps_start: float = 0.9
    eps_end: float = 0.1
    eps_decay_epochs: int | None = None
    noise_s: float = 5.0
    literal_epsilon: bool = False
    decay_base: float = 0.95
    decay_mode: str = "consecutive"
    force_global_weight: float | None = None
    use_global: bool = True
    global_reward_scale: float = 1e-3
    R_max: float = 1.0
    N_max: float | None = None
    on_policy: bool = True
    buffer_capacity: int | None = None
    pretrain_rollouts: int = 32
    pretrain_updates: int = 600
    # pretraining rollouts after the first run fixed-time plans drawn uniformly
    # from [d_min, d_max] per intersection, so critics see the action's effect
    pretrain_spread_plans: bool = True
    fixed_green_s: float | None = None
    checkpoint_dir: str | None = None
    metrics_csv: str | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def draw_tau(self, rng: np.random.Generator) -> float:
        if self.tau_range is None:
            return self.tau
        return float(rng.uniform(*self.tau_range))

    def validate(self):
        for name in ("epochs", "episodes_per_epoch", "rollouts_per_epoch", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.sim_seconds_per_rollout > 0:
            raise ConfigError("sim_seconds_per_rollout must be positive")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must be in [0, 1)")
        if not 0 <= self.tau <= 1:
            raise ConfigError("tau must be in [0, 1]")
        if self.tau_range is not None:
            self.tau_range = tuple(float(x) for x in self.tau_range)
            if len(self.tau_range) != 2 or not 0 <= self.tau_range[0] <= self.tau_range[1] <= 1:
                raise ConfigError("tau_range must be (lo, hi) with 0 <= lo <= hi <= 1")
        for name in ("actor_lr", "critic_lr", "global_actor_lr", "global_critic_lr"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if not (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1):
            raise ConfigError("exploration probabilities must be in [0, 1]")
        if self.decay_mode not in ("consecutive", "epoch"):
            raise ConfigError("decay_mode must be 'consecutive' or 'epoch'")
        if not 0 < self.decay_base <= 1:
            raise ConfigError("decay_base must be in (0, 1]")
        if self.force_global_weight is not None and not 0 <= self.force_global_weight <= 1:
            raise ConfigError("force_global_weight must be in [0, 1]")
        if self.noise_s < 0 or self.global_reward_scale <= 0:
            raise ConfigError("noise_s >= 0 and global_reward_scale > 0 required")
        if min(self.hidden, default=1) < 1:
            raise ConfigError("hidden widths must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# -- buffers and schedules -------------------------------------------------------


class ReplayBuffer:
    """Per-intersection stores ``B^1..B^M``; the global agent samples their union."""

    def __init__(self, M: int, capacity: int | None = None):
        self.M = M
        self.capacity = capacity
        self.stores: list[list[Transition]] = [[] for _ in range(M)]

    def clear(self):
        for s in self.stores:
            s.clear()

    def add(self, m: int, tr: Transition):
        s = self.stores[m]
        s.append(tr)
        if self.capacity is not None and len(s) > self.capacity:
            del s[0]

    def __len__(self):
        return sum(len(s) for s in self.stores)

    def union(self) -> list[Transition]:
        return [tr for s in self.stores for tr in s]

    def _draw(self, items, n, rng) -> list[Transition]:
        if len(items) < n:
            raise InsufficientDataError(f"need {n} transitions, buffer holds {len(items)}")
        idx = rng.choice(len(items), size=n, replace=False)
        return [items[i] for i in idx]

    def sample_local(self, m: int, n: int, rng: np.random.Generator) -> list[Transition]:
        return self._draw(self.stores[m], n, rng)

    def sample_union(self, n: int, rng: np.random.Generator) -> list[Transition]:
        return self._draw(self.union(), n, rng)


@dataclass
class ExplorationSchedule:
    """Exploration probability decays linearly from ``eps_start`` to ``eps_end``.

    Noise ``uniform(-noise_s, noise_s)`` fires with probability epsilon, or with
    probability ``1 - epsilon`` when ``literal`` is set.
    """

    eps_start: float = 0.9
    eps_end: float = 0.1
    horizon_epochs: int = 20
    noise_s: float = 5.0
    literal: bool = False

    def epsilon(self, epoch: int) -> float:
        if self.horizon_epochs <= 1:
            return self.eps_end
        f = min(max(epoch / (self.horizon_epochs - 1), 0.0), 1.0)
        return self.eps_start + (self.eps_end - self.eps_start) * f

    def noise(self, epoch: int, rng: np.random.Generator) -> float:
        eps = self.epsilon(epoch)
        p = rng.random()
        fires = (p > eps) if self.literal else (p < eps)
        return float(rng.uniform(-self.noise_s, self.noise_s)) if fires else 0.0


@dataclass
class CompetitionState:
    """Global/local arbitration with age decay of the global weight."""

    M: int
    decay_base: float = 0.95
    mode: str = "consecutive"
    force_global_weight: float | None = None
    consecutive: np.ndarray = None
    W_G: np.ndarray = None

    def __post_init__(self):
        if self.consecutive is None:
            self.consecutive = np.zeros(self.M, dtype=np.int64)
        if self.W_G is None:
            self.W_G = np.zeros(self.M)

    @property
    def W_L(self) -> np.ndarray:
        return 1.0 - self.W_G

    def reset(self):
        self.consecutive[:] = 0

    def effective(self, raw_w, epoch: int) -> np.ndarray:
        raw_w = np.clip(np.asarray(raw_w, dtype=float), 0.0, 1.0)
        t = self.consecutive if self.mode == "consecutive" else epoch
        w = raw_w * self.decay_base ** np.asarray(t, dtype=float)
        if self.force_global_weight is not None:
            w = np.full(self.M, float(self.force_global_weight))
        return w

    def choose(self, m: int, w_eff: float) -> bool:
        """True when the global output wins at intersection ``m``; ties go local."""
        self.W_G[m] = w_eff
        use_global = w_eff > 1.0 - w_eff
        self.consecutive[m] = self.consecutive[m] + 1 if use_global else 0
        return bool(use_global)


def decayed_weight(w: float, t: int, base: float = 0.95) -> float:
    return float(w) * base ** t


# -- agents ------------------------------------------------------------------------


@dataclass
class AgentSet:
    locals: list[LocalAgent]
    global_agent: GlobalAgent | None

    @property
    def M(self) -> int:
        return len(self.locals)


def default_n_max(corridor: CorridorConfig) -> list[float]:
    return [float(corridor.lane_capacity * n) for n in corridor.lanes_per_intersection]


def build_agents(corridor: CorridorConfig, cfg: TrainConfig, rng: np.random.Generator | None = None) -> AgentSet:
    """Global agent from ``rng``; local agents initialized from it."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7])) if rng is None else rng
    bounds = ag.make_bounds(corridor.green_min_s, corridor.green_max_s, corridor.cycle_length_s)
    g = ag.new_global_agent(corridor.actor_obs_dim, bounds, rng, cfg.gamma, cfg.hidden)
    n_max = default_n_max(corridor) if cfg.N_max is None else [float(cfg.N_max)] * corridor.M
    locals_ = [ag.local_from_global(g, m, cfg.R_max, n_max[m], corridor.green_max_s)
               for m in range(corridor.M)]
    return AgentSet(locals_, g)


# -- data generation -----------------------------------------------------------------


@dataclass
class Provenance:
    local: int = 0
    global_: int = 0

    def total(self) -> int:
        return self.local + self.global_


@dataclass
class RolloutStats:
    total_wait_s: float
    avg_speed_mps: float
    throughput: np.ndarray
    provenance: Provenance
    transitions: int


def _reward_vector(sim: Simulator, agents: Sequence[LocalAgent], t_open: float) -> np.ndarray:
    R = np.zeros(sim.M)
    for j in range(sim.M):
        ev = sim.last_green_end(j)
        if ev is None or not t_open < ev.time_s <= sim.t + 1e-9:
            continue
        a = agents[j]
        g = min(ev.g, a.G_max)
        case = RewardCase.GREEN_ON_NO_TRAFFIC if ev.N == 0 else RewardCase.GREEN_END_TRAFFIC_LEFT
        R[j] = ag.local_reward(ev.N, g, case, a.R_max, a.N_max, a.G_max)
    return R


def generate_on_policy_data(sim: Simulator, agents: AgentSet, competition: CompetitionState,
                            schedule: ExplorationSchedule, epoch: int, rng: np.random.Generator,
                            buffer: ReplayBuffer, horizon_s: float = 3600.0,
                            use_global: bool = True, fixed_green_s=None) -> RolloutStats:
    """One rollout on a fresh simulator; closed transitions go into ``buffer``.

    With ``fixed_green_s`` set (a scalar or one value per intersection) every
    decision is that duration with no agents or noise involved, which is how
    fixed-time data is generated.
    """
    M = sim.M
    locals_, glob = agents.locals, agents.global_agent
    use_global = use_global and glob is not None and fixed_green_s is None
    lo, hi = locals_[0].bounds.d_min, locals_[0].bounds.d_max
    competition.reset()
    prov = Provenance()
    cum_wait = np.zeros(M)
    open_: dict[int, tuple] = {}
    A = sim.green.copy()
    n_tr = 0
    while True:
        due = sim.pending_decisions()
        if due:
            S = sim.observation()
            A = sim.green.copy()
            if fixed_green_s is not None:
                A[due] = np.broadcast_to(np.asarray(fixed_green_s, dtype=float), (M,))[due]
            else:
                if use_global:
                    d_g, w_g = ag.act_global(glob, S)
                    w_eff = competition.effective(w_g, epoch + 1)
                for m in due:
                    if use_global and competition.choose(m, w_eff[m]):
                        a = d_g[m]
                        prov.global_ += 1
                    else:
                        a = ag.act_local(locals_[m], S)
                        prov.local += 1
                    A[m] = np.clip(a + schedule.noise(epoch, rng), lo, hi)
            for m in due:
                if m in open_:
                    S0, A0, w0, t0 = open_.pop(m)
                    R = _reward_vector(sim, locals_, t0)
                    buffer.add(m, Transition(S0, A0, R, S, A.copy(), cum_wait - w0, sim.t, epoch))
                    n_tr += 1
            if sim.t >= horizon_s - 1e-9:
                break
            for m in due:
                sim.set_green(m, A[m])
                open_[m] = (S, A.copy(), cum_wait.copy(), sim.t)
        if sim.t >= horizon_s - 1e-9:
            break
        sim.run_until_decision(horizon_s)
        cum_wait += sim.take_intersection_waits()
    rep = sim.metrics_report()
    return RolloutStats(rep.total_wait_s, rep.avg_speed_mps, rep.throughput, prov, n_tr)


# -- updates -------------------------------------------------------------------------


@dataclass
class Optimizers:
    actor: nn.Sgd
    critic: nn.Sgd


def _guard(fn, what):
    try:
        return fn()
    except NonFiniteError as e:
        raise NonFiniteError(f"{what}: {e}") from None


def update_local(buffer: ReplayBuffer, agent: LocalAgent, cfg: TrainConfig,
                 rng: np.random.Generator, opt: Optimizers) -> tuple[float, float]:
    """One minibatch update of a local agent; returns (critic loss, actor loss)."""
    batch = Batch.from_transitions(buffer.sample_local(agent.m, cfg.batch_size, rng))
    lc, gc = _guard(lambda: ag.local_critic_loss(agent, batch), f"local critic {agent.m}")
    opt.critic.step(agent.critic, gc)
    la, ga = _guard(lambda: ag.local_actor_loss(agent, batch), f"local actor {agent.m}")
    opt.actor.step(agent.actor, ga)
    tau = cfg.draw_tau(rng)
    nn.soft_update(agent.target_critic, agent.critic, tau)
    nn.soft_update(agent.target_actor, agent.actor, tau)
    return lc, la


def update_global(buffer: ReplayBuffer, agent: GlobalAgent, cfg: TrainConfig,
                  rng: np.random.Generator, opt: Optimizers) -> tuple[float, float]:
    batch = Batch.from_transitions(buffer.sample_union(cfg.batch_size, rng), cfg.global_reward_scale)
    lc, gc = _guard(lambda: ag.global_critic_loss(agent, batch), "global critic")
    opt.critic.step(agent.critic, gc)
    la, ga = _guard(lambda: ag.global_actor_loss(agent, batch), "global actor")
    opt.actor.step(agent.actor, ga)
    tau = cfg.draw_tau(rng)
    nn.soft_update(agent.target_critic, agent.critic, tau)
    nn.soft_update(agent.target_actor, agent.actor, tau)
    return lc, la


def _regress_actor(actor: nn.MlpParams, S, target_s, bounds, slots, opt: nn.Sgd) -> float:
    """One step on the mean squared error between actor durations and ``target_s``,
    measured in half-ranges so the scale does not depend on the bounds."""
    tr = nn.trace(actor, S)
    u = tr.output
    k = len(slots)
    err = (bounds.to_seconds(u[:, :k]) - target_s) / bounds.half
    B = S.shape[0]
    dU = np.zeros_like(u)
    dU[:, :k] = (2.0 / (B * k)) * err
    g, _ = nn.vjp(actor, tr, dU)
    opt.step(actor, g)
    return float(np.mean(err ** 2))


# -- the loop --------------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    total_wait_s: float
    avg_speed_mps: float
    throughput_total: float
    critic_loss_mean: float
    actor_loss_mean: float
    global_critic_loss: float

    def row(self) -> list:
        return [getattr(self, k) for k in METRIC_FIELDS]


@dataclass
class TrainResult:
    agents: AgentSet
    metrics: list[EpochMetrics]
    provenance: Provenance
    epoch_provenance: list[Provenance] = field(default_factory=list)


SimFactory = Callable[[int], Simulator]


def corridor_factory(corridor: CorridorConfig) -> SimFactory:
    """Simulators of ``corridor`` reseeded per rollout."""
    def make(seed: int) -> Simulator:
        d = corridor.to_dict()
        d["seed"] = int(seed)
        return Simulator(CorridorConfig.from_dict(d))
    return make


def _rollout_seed(seed: int, epoch: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, k, 11]).generate_state(1)[0])


class Trainer:
    """Stateful driver; ``run_epoch`` is one pass of the outer loop."""

    def __init__(self, sim_factory: SimFactory, agents: AgentSet, cfg: TrainConfig):
        self.sim_factory = sim_factory
        self.agents = agents
        self.cfg = cfg
        M = agents.M
        self.buffer = ReplayBuffer(M, cfg.buffer_capacity)
        horizon = cfg.eps_decay_epochs if cfg.eps_decay_epochs is not None else cfg.epochs
        self.schedule = ExplorationSchedule(cfg.eps_start, cfg.eps_end, horizon, cfg.noise_s, cfg.literal_epsilon)
        self.competition = CompetitionState(M, cfg.decay_base, cfg.decay_mode, cfg.force_global_weight)
        self.local_opt = [Optimizers(nn.Sgd(cfg.actor_lr, cfg.momentum), nn.Sgd(cfg.critic_lr, cfg.momentum))
                          for _ in range(M)]
        ga = cfg.actor_lr if cfg.global_actor_lr is None else cfg.global_actor_lr
        gc = cfg.critic_lr if cfg.global_critic_lr is None else cfg.global_critic_lr
        self.global_opt = Optimizers(nn.Sgd(ga, cfg.momentum), nn.Sgd(gc, cfg.momentum))
        self.epoch = 0
        self.metrics: list[EpochMetrics] = []
        self.provenance = Provenance()
        self.epoch_provenance: list[Provenance] = []

    @property
    def use_global(self) -> bool:
        return self.cfg.use_global and self.agents.global_agent is not None

    def run_epoch(self) -> EpochMetrics:
        cfg = self.cfg
        e = self.epoch
        if cfg.on_policy:
            self.buffer.clear()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, e, 1]))
        stats = []
        prov = Provenance()
        for k in range(cfg.rollouts_per_epoch):
            sim = self.sim_factory(_rollout_seed(cfg.seed, e, k))
            st = generate_on_policy_data(sim, self.agents, self.competition, self.schedule, e, rng,
                                         self.buffer, cfg.sim_seconds_per_rollout, self.use_global)
            stats.append(st)
            prov.local += st.provenance.local
            prov.global_ += st.provenance.global_
        self.provenance.local += prov.local
        self.provenance.global_ += prov.global_
        self.epoch_provenance.append(prov)

        urng = np.random.default_rng(np.random.SeedSequence([cfg.seed, e, 2]))
        cl, al, gl = [], [], []
        for _ in range(cfg.episodes_per_epoch):
            for m, agent in enumerate(self.agents.locals):
                c, a = update_local(self.buffer, agent, cfg, urng, self.local_opt[m])
                cl.append(c)
                al.append(a)
            if self.use_global:
                c, _ = update_global(self.buffer, self.agents.global_agent, cfg, urng, self.global_opt)
                gl.append(c)
        em = EpochMetrics(
            epoch=e + 1,
            total_wait_s=float(np.mean([s.total_wait_s for s in stats])),
            avg_speed_mps=float(np.mean([s.avg_speed_mps for s in stats])),
            throughput_total=float(np.mean([s.throughput.sum() for s in stats])),
            critic_loss_mean=float(np.mean(cl)),
            actor_loss_mean=float(np.mean(al)),
            global_critic_loss=float(np.mean(gl)) if gl else float("nan"),
        )
        self.metrics.append(em)
        self.epoch += 1
        log.info("epoch %d wait %.0f critic %.4g actor %.4g", em.epoch, em.total_wait_s,
                 em.critic_loss_mean, em.actor_loss_mean)
        if cfg.metrics_csv:
            append_metrics_csv(cfg.metrics_csv, em)
        if cfg.checkpoint_dir:
            self.save_checkpoint(Path(cfg.checkpoint_dir) / f"epoch_{self.epoch:03d}")
        return em

    def train(self) -> TrainResult:
        while self.epoch < self.cfg.epochs:
            self.run_epoch()
        return TrainResult(self.agents, self.metrics, self.provenance, self.epoch_provenance)

    # -- checkpoint / resume -----------------------------------------------------

    def save_checkpoint(self, d) -> None:
        d = Path(d)
        ag.save_bundle(self.agents.locals, self.agents.global_agent, d / "agents")
        vel = {}
        for m, o in enumerate(self.local_opt):
            for k in ("actor", "critic"):
                v = getattr(o, k).velocity
                if v is not None:
                    vel[f"local{m}_{k}"] = v
        for k in ("actor", "critic"):
            v = getattr(self.global_opt, k).velocity
            if v is not None:
                vel[f"global_{k}"] = v
        np.savez(d / "optimizer.npz", **vel)
        state = {"epoch": self.epoch, "config": self.cfg.to_dict(),
                 "metrics": [asdict(m) for m in self.metrics],
                 "provenance": [self.provenance.local, self.provenance.global_]}
        (d / "trainer.json").write_text(json.dumps(state, indent=2))
        if not self.cfg.on_policy:
            with open(d / "buffer.pkl", "wb") as fh:
                pickle.dump(self.buffer.stores, fh)

    @classmethod
    def resume(cls, d, sim_factory: SimFactory, cfg: TrainConfig | None = None) -> "Trainer":
        d = Path(d)
        state = json.loads((d / "trainer.json").read_text())
        cfg = TrainConfig.from_dict(state["config"]) if cfg is None else cfg
        locals_, g = ag.load_bundle(d / "agents")
        tr = cls(sim_factory, AgentSet(locals_, g), cfg)
        tr.epoch = state["epoch"]
        tr.metrics = [EpochMetrics(**m) for m in state["metrics"]]
        tr.provenance = Provenance(*state["provenance"])
        with np.load(d / "optimizer.npz") as z:
            for key in z.files:
                who, k = key.split("_", 1)
                o = tr.global_opt if who == "global" else tr.local_opt[int(who[5:])]
                getattr(o, k).velocity = z[key].copy()
        if (d / "buffer.pkl").exists():
            with open(d / "buffer.pkl", "rb") as fh:
                tr.buffer.stores = pickle.load(fh)
        return tr


def append_metrics_csv(path, em: EpochMetrics) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRIC_FIELDS)
        w.writerow(em.row())


def pretrain_from_fixed_time(agents: AgentSet, sim_factory: SimFactory, cfg: TrainConfig,
                             rollouts: int | None = None, updates: int | None = None,
                             fixed_green_s: float | None = None) -> AgentSet:
    """Warm start from fixed-time control.

    Critics take TD updates on fixed-time transitions; actors regress toward
    the fixed duration whatever plans generated the data. Zero rollouts leaves the agents untouched.
    """
    rollouts = cfg.pretrain_rollouts if rollouts is None else rollouts
    updates = cfg.pretrain_updates if updates is None else updates
    if rollouts <= 0 or updates <= 0:
        return agents
    b = agents.locals[0].bounds
    if fixed_green_s is None:
        fixed_green_s = b.mid if cfg.fixed_green_s is None else cfg.fixed_green_s
    fixed = float(fixed_green_s)
    buf = ReplayBuffer(agents.M)
    comp = CompetitionState(agents.M)
    sched = ExplorationSchedule(0.0, 0.0, 1, 0.0)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 991]))
    for k in range(rollouts):
        sim = sim_factory(_rollout_seed(cfg.seed, 10**6, k))
        plan = fixed
        if cfg.pretrain_spread_plans and k > 0:
            plan = rng.uniform(b.d_min, b.d_max, size=agents.M)
        generate_on_policy_data(sim, agents, comp, sched, 0, rng, buf, cfg.sim_seconds_per_rollout,
                                use_global=False, fixed_green_s=plan)
    n = min(cfg.batch_size, min(len(s) for s in buf.stores))
    if n < 1:
        raise InsufficientDataError("fixed-time rollouts produced no transitions")
    lr = cfg.actor_lr if cfg.actor_lr > 0 else 1e-3
    for _ in range(updates):
        for a in agents.locals:
            batch = Batch.from_transitions(buf.sample_local(a.m, n, rng))
            _, gc = ag.local_critic_loss(a, batch)
            nn.Sgd(cfg.critic_lr).step(a.critic, gc)
            _regress_actor(a.actor, batch.S, fixed, b, [0], nn.Sgd(lr))
            tau = cfg.draw_tau(rng)
            nn.soft_update(a.target_critic, a.critic, tau)
            nn.soft_update(a.target_actor, a.actor, tau)
        g = agents.global_agent
        if g is not None:
            batch = Batch.from_transitions(buf.sample_union(n, rng), cfg.global_reward_scale)
            _, gc = ag.global_critic_loss(g, batch)
            nn.Sgd(cfg.critic_lr).step(g.critic, gc)
            _regress_actor(g.actor, batch.S, fixed, b, list(range(agents.M)), nn.Sgd(lr))
            tau = cfg.draw_tau(rng)
            nn.soft_update(g.target_critic, g.critic, tau)
            nn.soft_update(g.target_actor, g.actor, tau)
    return agents


def train(sim_factory: SimFactory, agents: AgentSet, cfg: TrainConfig) -> TrainResult:
    """Pretrain (if configured) then run ``cfg.epochs`` epochs."""
    pretrain_from_fixed_time(agents, sim_factory, cfg)
    return Trainer(sim_factory, agents, cfg).train()
