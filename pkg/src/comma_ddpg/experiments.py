"""Controllers, evaluation and the comparison harness.

Learning controllers are evaluated with their local actors only and no
exploration noise; a global agent may be loaded alongside but is never called.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import agents as ag
from . import training as T
from .errors import CheckpointError, ConfigError
from .scenarios import EvalSettings, RunConfig
from .sim import CorridorConfig, Simulator


class Controller(enum.Enum):
    FIXED_TIME = "fixed_time"
    COMMA_DDPG = "comma_ddpg"
    LOCAL_ONLY_DDPG = "local_only_ddpg"


@dataclass
class ResultRow:
    controller: str
    seed: int
    waiting_time_s: float
    avg_speed_mps: float
    throughput: list

    def __post_init__(self):
        if self.waiting_time_s < 0 or self.avg_speed_mps < 0 or min(self.throughput, default=0) < 0:
            raise ValueError("metrics must be non-negative")

    def csv_row(self) -> list:
        return [self.controller, self.seed, f"{self.waiting_time_s:.6f}", f"{self.avg_speed_mps:.6f}",
                *[int(x) for x in self.throughput]]


def result_header(M: int) -> list[str]:
    return ["controller", "seed", "waiting_time_s", "avg_speed_mps"] + [f"thr_I{m + 1}" for m in range(M)]


def write_results_csv(path, rows: Sequence[ResultRow]) -> None:
    if not rows:
        raise ValueError("no result rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(result_header(len(rows[0].throughput)))
        for r in rows:
            w.writerow(r.csv_row())


def summarize(rows: Sequence[ResultRow]) -> dict:
    """Mean and standard deviation of each metric per controller."""
    out = {}
    for name in dict.fromkeys(r.controller for r in rows):
        sel = [r for r in rows if r.controller == name]
        wt = np.array([r.waiting_time_s for r in sel])
        sp = np.array([r.avg_speed_mps for r in sel])
        out[name] = {
            "n": len(sel),
            "seeds": [r.seed for r in sel],
            "waiting_time_s_mean": float(wt.mean()),
            "waiting_time_s_std": float(wt.std()),
            "waiting_time_s_median": float(np.median(wt)),
            "avg_speed_mps_mean": float(sp.mean()),
            "avg_speed_mps_std": float(sp.std()),
        }
    return out


def _row(name, seed, sim: Simulator) -> ResultRow:
    rep = sim.metrics_report()
    return ResultRow(name, int(seed), float(rep.total_wait_s), float(rep.avg_speed_mps), [int(x) for x in rep.throughput])


# -- single evaluations ---------------------------------------------------------

def run_fixed_time(scenario: CorridorConfig, green_s: float | None = None, horizon_s: float = 3600.0,
                   seed: int | None = None, record_trajectories: bool = False,
                   return_sim: bool = False):
    """Every cycle of every intersection gets ``green_s`` (default: midpoint of the bounds)."""
    green = scenario.green_mid_s if green_s is None else float(green_s)
    if not scenario.green_min_s <= green <= scenario.green_max_s:
        raise ConfigError(f"fixed green {green} s outside [{scenario.green_min_s}, {scenario.green_max_s}]")
    cfg = scenario if seed is None else replace(scenario, seed=int(seed))
    sim = Simulator(cfg, record_trajectories=record_trajectories)
    while sim.t < horizon_s:
        for m in sim.pending_decisions():
            sim.set_green(m, green)
        sim.run_until_decision(horizon_s)
    row = _row(Controller.FIXED_TIME.value, cfg.seed, sim)
    return (row, sim) if return_sim else row


def check_compatible(scenario: CorridorConfig, local_agents: Sequence[ag.LocalAgent]) -> None:
    if len(local_agents) != scenario.M:
        raise ConfigError(f"checkpoint has {len(local_agents)} local agents, scenario has {scenario.M} intersections")
    for a in local_agents:
        if a.actor.n_in != scenario.actor_obs_dim:
            raise ConfigError(
                f"local agent {a.m} expects {a.actor.n_in} observation entries, scenario gives {scenario.actor_obs_dim}")
        b = a.bounds
        if (b.d_min, b.d_max) != (scenario.green_min_s, scenario.green_max_s):
            raise ConfigError(f"local agent {a.m} was trained with green bounds [{b.d_min}, {b.d_max}]")


def run_local_policy(scenario: CorridorConfig, local_agents: Sequence[ag.LocalAgent],
                     horizon_s: float = 3600.0, seed: int | None = None, name: str = "local",
                     record_trajectories: bool = False, return_sim: bool = False):
    """Inference: each intersection follows its own local actor, noise-free."""
    check_compatible(scenario, local_agents)
    cfg = scenario if seed is None else replace(scenario, seed=int(seed))
    sim = Simulator(cfg, record_trajectories=record_trajectories)
    while sim.t < horizon_s:
        due = sim.pending_decisions()
        if due:
            S = sim.observation()
            for m in due:
                sim.set_green(m, float(ag.act_local(local_agents[m], S)))
        sim.run_until_decision(horizon_s)
    row = _row(name, cfg.seed, sim)
    return (row, sim) if return_sim else row


def load_policy(checkpoint) -> T.AgentSet:
    """Agents from a bundle directory or a trainer checkpoint containing one."""
    d = Path(checkpoint)
    if not d.exists():
        raise CheckpointError(f"checkpoint {d} does not exist")
    if (d / "agents").is_dir():
        d = d / "agents"
    locals_, glob = ag.load_bundle(d, with_global=True)
    return T.AgentSet(locals_, glob)


# -- training + comparison --------------------------------------------------------

def train_controller(run: RunConfig, controller: Controller, seed: int, checkpoint_dir=None) -> T.TrainResult:
    if controller is Controller.FIXED_TIME:
        raise ValueError("fixed-time control has nothing to train")
    cfg = replace(run.train, seed=int(seed), use_global=controller is Controller.COMMA_DDPG,
                  checkpoint_dir=None if checkpoint_dir is None else str(checkpoint_dir))
    agents = T.build_agents(run.corridor, cfg)
    return T.train(T.corridor_factory(run.corridor), agents, cfg)


def eval_seed(ev: EvalSettings, seed: int) -> int:
    return ev.eval_seed_offset + int(seed)


@dataclass
class ExperimentSpec:
    run: RunConfig
    controllers: tuple = (Controller.FIXED_TIME, Controller.COMMA_DDPG, Controller.LOCAL_ONLY_DDPG)
    output_dir: str | None = None
    checkpoints: dict = field(default_factory=dict)  # controller -> bundle dir, skips training

    def __post_init__(self):
        self.controllers = tuple(Controller(c) for c in self.controllers)
        if not self.run.eval.seeds:
            raise ConfigError("eval seeds must be non-empty")


@dataclass
class ExperimentResult:
    rows: list
    summary: dict
    train_results: dict = field(default_factory=dict, repr=False)  # (controller, seed) -> TrainResult

    def waits(self, controller: Controller) -> np.ndarray:
        return np.array([r.waiting_time_s for r in self.rows if r.controller == controller.value])

    def reduction_vs(self, controller: Controller, baseline: Controller = Controller.FIXED_TIME) -> np.ndarray:
        """Per-seed fractional waiting-time reduction relative to ``baseline``."""
        return 1.0 - self.waits(controller) / self.waits(baseline)


def run_experiment(spec: ExperimentSpec, progress=None) -> ExperimentResult:
    """Paired-seed comparison: every controller is evaluated on the same seeds.

    For seed ``s`` learning controllers train with seed ``s`` and every
    controller is evaluated on the simulator seeded ``eval_seed_offset + s``.
    """
    run, ev = spec.run, spec.run.eval
    rows, trained = [], {}
    out = None if spec.output_dir is None else Path(spec.output_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for s in ev.seeds:
        es = eval_seed(ev, s)
        for c in spec.controllers:
            if c is Controller.FIXED_TIME:
                row = run_fixed_time(run.corridor, ev.fixed_green_s, ev.horizon_s, es)
            else:
                if c in spec.checkpoints:
                    agents = load_policy(spec.checkpoints[c])
                else:
                    ck = None if out is None else out / f"{c.value}_seed{s}"
                    res = train_controller(run, c, s, ck)
                    trained[(c, s)] = res
                    agents = res.agents
                    if out is not None:
                        ag.save_bundle(agents.locals, agents.global_agent, out / f"{c.value}_seed{s}" / "agents")
                row = run_local_policy(run.corridor, agents.locals, ev.horizon_s, es, c.value)
            row.seed = int(s)
            rows.append(row)
            if progress:
                progress(row)
    result = ExperimentResult(rows, summarize(rows), trained)
    if out is not None:
        write_results_csv(out / "results.csv", rows)
        write_summary(out / "summary.json", result.summary)
    return result


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# -- sweeps -------------------------------------------------------------------------

TAU_SETTINGS = {
    "random(0,1)": dict(tau_range=(0.0, 1.0)),
    "random(0.8,1)": dict(tau_range=(0.8, 1.0)),
    "random(0.9,1)": dict(tau_range=(0.9, 1.0)),
    "tau=0.995": dict(tau=0.995, tau_range=None),
}


def sweep_tau(run: RunConfig, settings: dict | None = None, progress=None) -> list[ResultRow]:
    """COMMA-DDPG trained under each soft-update setting, evaluated on paired seeds."""
    settings = TAU_SETTINGS if settings is None else settings
    rows = []
    for label, kw in settings.items():
        r = replace(run, train=replace(run.train, **kw))
        res = run_experiment(ExperimentSpec(r, (Controller.COMMA_DDPG,)))
        for row in res.rows:
            row.controller = label
            rows.append(row)
            if progress:
                progress(row)
    return rows


def compare_on_off_policy(run: RunConfig, progress=None) -> list[ResultRow]:
    """COMMA-DDPG with per-epoch buffer clearing vs an accumulating buffer."""
    rows = []
    for label, on in (("on_policy", True), ("off_policy", False)):
        r = replace(run, train=replace(run.train, on_policy=on))
        res = run_experiment(ExperimentSpec(r, (Controller.COMMA_DDPG,)))
        for row in res.rows:
            row.controller = label
            rows.append(row)
            if progress:
                progress(row)
    return rows


# -- time-space diagram ----------------------------------------------------------------

def green_bands(sim: Simulator, horizon_s: float | None = None) -> list[tuple]:
    """``(intersection, distance_m, green_start_s, green_end_s)`` for every logged cycle."""
    horizon_s = sim.t if horizon_s is None else horizon_s
    x = sim.intersection_positions()
    start = np.zeros(sim.M)
    bands = []
    for m, g, y, red in sim.cycle_log:
        t0 = start[m]
        bands.append((int(m), float(x[m]), float(t0), float(min(t0 + g, horizon_s))))
        start[m] = t0 + g + y + red
    # the cycle in progress at the horizon
    for m in range(sim.M):
        t0 = start[m]
        if t0 < horizon_s:
            bands.append((m, float(x[m]), float(t0), float(min(t0 + sim.green[m], horizon_s))))
    bands.sort(key=lambda b: (b[0], b[2]))
    return bands


def export_time_space(trajectories: dict, path, bands: Sequence[tuple] | None = None) -> int:
    """Write ``vehicle_id,time_s,distance_m`` polylines; returns the number of vehicles.

    When ``bands`` are given they go to a sibling file ``<stem>_green.csv``.
    """
    if not trajectories:
        raise ValueError("no trajectories recorded")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "time_s", "distance_m"])
        for vid in sorted(trajectories):
            t, x = trajectories[vid]
            for a, b in zip(t, x):
                w.writerow([vid, f"{a:.3f}", f"{b:.3f}"])
    if bands is not None:
        with open(path.with_name(path.stem + "_green.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["intersection", "distance_m", "green_start_s", "green_end_s"])
            for m, xm, a, b in bands:
                w.writerow([m, f"{xm:.3f}", f"{a:.3f}", f"{b:.3f}"])
    return len(trajectories)


def through_vehicles_without_stops(trajectories: dict, positions, tol_s: float = 1e-6) -> list[int]:
    """Vehicles that enter upstream of the first intersection, pass every one
    of them and never stand still.

    A stop shows up as two consecutive points at the same distance.
    """
    x_first, x_last = float(positions[0]), float(positions[-1])
    out = []
    for vid, (t, x) in trajectories.items():
        if x[0] >= x_first - 1e-9 or x[-1] < x_last - 1e-9:
            continue
        stalled = np.any((np.diff(x) == 0) & (np.diff(t) > tol_s))
        if not stalled:
            out.append(vid)
    return out


def polyline_speeds(t, x) -> np.ndarray:
    dt = np.diff(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(dt > 0, np.diff(x) / dt, math.nan)
