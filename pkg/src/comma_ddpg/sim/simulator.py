from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import SignalTimingError
from . import kernels as K
from .config import CorridorConfig

PHASE_NAMES = ("Green", "Yellow", "Red")
PHASE_CODE = np.array([1.0, 0.0, -1.0])
_EPS = 1e-9


@dataclass
class StepMetrics:
    total_wait_s: float
    throughput: np.ndarray
    mean_speed_mps: float


@dataclass
class SignalState:
    phase: list
    remaining_s: np.ndarray
    current_green_duration_s: np.ndarray


@dataclass
class CorridorState:
    stopped_per_lane: list
    signal: SignalState
    sim_time_s: float


@dataclass
class GreenEnd:
    """Main-street green that just ended: vehicles left on the approach and idle green."""

    time_s: float
    cycle: int
    N: int
    g: float


@dataclass
class CumulativeMetrics:
    total_wait_s: float
    throughput: np.ndarray
    avg_speed_mps: float
    vehicles_generated: int
    vehicles_blocked: int
    vehicles_exited: int
    vehicles_in_network: int
    trajectories: dict = field(repr=False, default_factory=dict)


class Simulator:
    """Deterministic point-queue microsimulation of a signalized corridor.

    Time advances continuously; ``step`` splits each call at phase changes.
    Every intersection starts at a cycle boundary with ``green_min_s`` of
    green. A new green duration can be set for intersection ``m`` only while
    ``at_boundary(m)`` is true; otherwise the previous cycle's duration repeats.
    """

    def __init__(self, config: CorridorConfig, record_trajectories: bool = False,
                 record_history: bool = False, max_substep_s: float = 1.0):
        config.validate()
        self.config = cfg = config
        M = cfg.M
        self.M = M
        self.rng = np.random.default_rng(cfg.seed)
        self.record_trajectories = record_trajectories
        self.record_history = record_history
        # admission and spillback checks are taken at sub-interval starts
        self.max_substep_s = float(max_substep_s)

        lanes = cfg.lanes_per_intersection
        self.lane_ptr = np.concatenate([[0], np.cumsum(lanes)]).astype(np.int64)
        L = int(self.lane_ptr[-1])
        self.L = L
        self.n_main = np.asarray(cfg.main_lanes, dtype=np.int64)
        self.lane_m = np.repeat(np.arange(M), lanes).astype(np.int64)
        self.lane_main = np.array(
            [l - self.lane_ptr[self.lane_m[l]] < self.n_main[self.lane_m[l]] for l in range(L)]
        )
        self.lane_cap = np.full(L, cfg.lane_capacity, dtype=np.int64)
        self.int_x = np.empty(M)
        self.int_x[0] = cfg.entry_length_m
        for m in range(1, M):
            self.int_x[m] = self.int_x[m - 1] + cfg.link_length_m[m - 1]
        self.link_len = np.array(list(cfg.link_length_m) + [0.0])
        self.lane_app_len = np.array([
            cfg.link_length_m[self.lane_m[l] - 1] if self.lane_main[l] and self.lane_m[l] > 0
            else cfg.entry_length_m
            for l in range(L)
        ])
        rates = np.concatenate([np.asarray(r, dtype=float) for r in cfg.arrival_rate_vph]) / 3600.0
        self.src_lanes = np.flatnonzero(rates > 0)
        self.src_rates = rates[self.src_lanes]
        tf = np.asarray(cfg.turn_fractions)
        self.p_through = tf[:, 0]
        self.p_right = tf[:, 2]
        self.cycle = np.asarray(cfg.cycle_length_s, dtype=float)

        # lanes and vehicles
        V = int(self.lane_cap.sum())
        self.fifo = np.full((L, int(self.lane_cap.max())), -1, dtype=np.int64)
        self.f_head = np.zeros(L, dtype=np.int64)
        self.f_len = np.zeros(L, dtype=np.int64)
        self.next_free = np.full(L, -np.inf)
        self.vid = np.full(V, -1, dtype=np.int64)
        self.vlane = np.full(V, -1, dtype=np.int64)
        self.tstop = np.zeros(V)
        self.tenter = np.zeros(V)
        self.wait = np.zeros(V)
        self.exit_at = np.zeros(V, dtype=np.int64)
        self.dist = np.zeros(V)
        self.on_main = np.zeros(V, dtype=np.bool_)
        self.free_slots = np.arange(V - 1, -1, -1, dtype=np.int64)
        self.ints = np.zeros(7, dtype=np.int64)
        self.ints[K.N_FREE] = V
        self.facc = np.zeros(4)
        self.thr_cum = np.zeros(M, dtype=np.int64)
        self.wait_int = np.zeros(M)
        self.total_wait_s = 0.0
        self.traj_vid = np.zeros(0, dtype=np.int64)
        self.traj_t = np.zeros(0)
        self.traj_x = np.zeros(0)
        self._injected: list[tuple[int, int]] = []

        # signals
        self.t = 0.0
        self.phase = np.zeros(M, dtype=np.int64)
        self.green = np.full(M, float(cfg.green_min_s))
        self.cycle_start = np.zeros(M)
        self.phase_end = self.green.copy()
        self._at_boundary = np.ones(M, dtype=bool)
        self.cycles_completed = np.zeros(M, dtype=np.int64)
        self.last_dep_main = np.full(M, -np.inf)
        self.snap_stopped = np.zeros(L, dtype=np.int64)
        self.green_end_events: list[GreenEnd | None] = [None] * M
        self.cycle_log: list[tuple[int, float, float, float]] = []
        self._red_start = np.zeros(M)
        self.history: list[tuple] = []

    # -- signal control ----------------------------------------------------

    def at_boundary(self, m: int) -> bool:
        return bool(self._at_boundary[m])

    def pending_decisions(self) -> list[int]:
        return [int(m) for m in np.flatnonzero(self._at_boundary)]

    def _check_green(self, g: float):
        cfg = self.config
        if not np.isfinite(g) or g < cfg.green_min_s - _EPS or g > cfg.green_max_s + _EPS:
            raise SignalTimingError(
                f"green duration {g} outside [{cfg.green_min_s}, {cfg.green_max_s}]"
            )

    def set_green(self, m: int, green_s: float):
        """Green duration for intersection ``m``'s cycle starting now."""
        if not 0 <= m < self.M:
            raise IndexError(f"intersection {m} out of range")
        if not self._at_boundary[m]:
            raise SignalTimingError(f"intersection {m} is not at a cycle boundary (t={self.t})")
        green_s = float(green_s)
        self._check_green(green_s)
        green_s = min(max(green_s, self.config.green_min_s), self.config.green_max_s)
        self.green[m] = green_s
        self.phase_end[m] = self.cycle_start[m] + green_s

    def apply_green_durations(self, durations):
        durations = np.asarray(durations, dtype=float)
        if durations.shape != (self.M,):
            raise SignalTimingError(f"expected {self.M} durations, got shape {durations.shape}")
        for g in durations:
            self._check_green(g)
        for m in range(self.M):
            if not self._at_boundary[m]:
                raise SignalTimingError(f"intersection {m} is not at a cycle boundary (t={self.t})")
        for m, g in enumerate(durations):
            self.set_green(m, g)

    def red_duration(self, m: int) -> float:
        return self.cycle[m] - self.green[m] - self.config.yellow_s

    def time_to_next_boundary(self) -> float:
        return float(np.min(self.cycle_start + self.cycle - self.t))

    # -- stepping ------------------------------------------------------------

    def spawn(self, lane: int, exit_at: int | None = None) -> None:
        """Inject one vehicle at the upstream end of global lane ``lane`` now.

        ``exit_at`` is the intersection it leaves the network at; by default a
        main-street vehicle runs the whole corridor and a cross-street vehicle
        leaves at its own intersection.
        """
        if not 0 <= lane < self.L:
            raise IndexError(f"lane {lane} out of range")
        m = int(self.lane_m[lane])
        if exit_at is None:
            exit_at = self.M - 1 if self.lane_main[lane] else m
        if not m <= exit_at < self.M:
            raise ValueError(f"exit_at {exit_at} not downstream of intersection {m}")
        self._injected.append((int(lane), int(exit_at)))

    def _draw_arrivals(self, t0: float, h: float):
        counts = self.rng.poisson(self.src_rates * h)
        n = int(counts.sum())
        lanes = np.repeat(self.src_lanes, counts)
        times = t0 + self.rng.random(n) * h
        exits = self._draw_routes(lanes)
        if self._injected:
            inj = np.asarray(self._injected, dtype=np.int64)
            self._injected = []
            lanes = np.concatenate([inj[:, 0], lanes])
            times = np.concatenate([np.full(len(inj), t0), times])
            exits = np.concatenate([inj[:, 1], exits])
        order = np.argsort(times, kind="mergesort")
        return (lanes[order].astype(np.int64), times[order], exits[order].astype(np.int64))

    def _draw_routes(self, lanes: np.ndarray) -> np.ndarray:
        """Exit intersection per arrival, from per-intersection turn splits."""
        n = lanes.shape[0]
        M = self.M
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        u = self.rng.random((n, M))
        m0 = self.lane_m[lanes]
        main = self.lane_main[lanes]
        joins = ~main & (u[np.arange(n), m0] < self.p_right[m0])
        start = np.where(main, m0, m0 + 1)
        turn = u >= self.p_through[None, :]
        cols = np.arange(M)[None, :]
        turn &= cols >= start[:, None]
        turn[:, M - 1] = True
        exits = np.argmax(turn, axis=1)
        return np.where(main | joins, exits, m0)

    def _ensure_traj_capacity(self, extra: int):
        need = int(self.ints[K.N_TRAJ]) + extra
        if need > self.traj_t.shape[0]:
            size = max(need, 2 * self.traj_t.shape[0], 4096)
            for name in ("traj_vid", "traj_t", "traj_x"):
                old = getattr(self, name)
                new = np.zeros(size, dtype=old.dtype)
                new[: old.shape[0]] = old
                setattr(self, name, new)

    def _advance(self, t1: float, thr: np.ndarray):
        t0 = self.t
        h = t1 - t0
        arr_lane, arr_time, arr_exit = self._draw_arrivals(t0, h)
        if self.record_trajectories:
            per_lane = np.ceil(h / self.config.saturation_headway_s) + 2
            self._ensure_traj_capacity(int(len(arr_lane) + 2 * per_lane * self.L) + 8)
        K.advance(
            t0, t1, self.lane_ptr, self.n_main, self.lane_cap, self.lane_app_len,
            self.int_x, self.link_len, float(self.config.free_flow_speed_mps),
            float(self.config.saturation_headway_s), self.phase,
            self.fifo, self.f_head, self.f_len, self.next_free,
            self.vid, self.vlane, self.tstop, self.tenter, self.wait, self.exit_at,
            self.dist, self.on_main, self.free_slots,
            arr_lane, arr_time, arr_exit,
            self.ints, self.facc, thr, self.wait_int, self.last_dep_main,
            self.traj_vid, self.traj_t, self.traj_x, self.record_trajectories,
        )
        self.t = t1

    def _stopped_now(self) -> np.ndarray:
        out = np.zeros(self.L, dtype=np.int64)
        return K.stopped_counts(self.fifo, self.f_head, self.f_len, self.lane_cap, self.tstop, self.t, out)

    def _main_lanes(self, m):
        return range(self.lane_ptr[m], self.lane_ptr[m] + self.n_main[m])

    def _cross_lanes(self, m):
        return range(self.lane_ptr[m] + self.n_main[m], self.lane_ptr[m + 1])

    def _phase_events(self):
        Y = self.config.yellow_s
        stopped = None
        while True:
            due = np.flatnonzero(self.phase_end <= self.t + _EPS)
            if due.size == 0:
                return
            if stopped is None:
                stopped = self._stopped_now()
            for m in due:
                self.phase_end[m] = max(self.phase_end[m], self.t)
                if self.phase[m] == K.GREEN:
                    lanes = self._main_lanes(m)
                    if self.config.clearance_count == "stopped":
                        n_left = int(sum(stopped[l] for l in lanes))
                    else:
                        n_left = int(sum(self.f_len[l] for l in lanes))
                    if n_left > 0:
                        g = 0.0
                    else:
                        last = max(self.last_dep_main[m], self.cycle_start[m])
                        g = min(max(self.t - last, 0.0), self.green[m])
                    self.green_end_events[m] = GreenEnd(self.t, int(self.cycles_completed[m]), n_left, g)
                    for l in lanes:
                        self.snap_stopped[l] = stopped[l]
                    self.phase[m] = K.YELLOW
                    self.phase_end[m] = self.cycle_start[m] + self.green[m] + Y
                elif self.phase[m] == K.YELLOW:
                    self.phase[m] = K.RED
                    self._red_start[m] = self.t
                    self.phase_end[m] = self.cycle_start[m] + self.cycle[m]
                else:
                    for l in self._cross_lanes(m):
                        self.snap_stopped[l] = stopped[l]
                    red = self.t - self._red_start[m]
                    self.cycle_log.append((int(m), float(self.green[m]), float(Y), float(red)))
                    self.cycles_completed[m] += 1
                    self.cycle_start[m] = self.t
                    self.phase[m] = K.GREEN
                    self.phase_end[m] = self.t + self.green[m]
                    self.last_dep_main[m] = -np.inf
                    self._at_boundary[m] = True

    def step(self, dt_s: float = 1.0) -> StepMetrics:
        if not dt_s > 0:
            raise ValueError("dt_s must be positive")
        target = self.t + float(dt_s)
        self._at_boundary[:] = False
        thr = np.zeros(self.M, dtype=np.int64)
        self.facc[K.STEP_WAIT] = 0.0
        while self.t < target - _EPS:
            t1 = min(target, float(np.min(self.phase_end)), self.t + self.max_substep_s)
            if t1 > self.t:
                self._advance(t1, thr)
            self._phase_events()
        if abs(self.t - target) <= _EPS:
            self.t = target
        self._phase_events()
        self._at_boundary &= np.abs(self.cycle_start - self.t) <= _EPS
        step_wait = float(self.facc[K.STEP_WAIT])
        self.total_wait_s += step_wait
        self.thr_cum += thr
        self._check_conservation()
        active = self.vlane >= 0
        n_active = int(active.sum())
        moving = int((active & (self.tstop > self.t + _EPS)).sum())
        speed = self.config.free_flow_speed_mps * moving / n_active if n_active else 0.0
        if self.record_history:
            self._append_history(thr, step_wait)
        return StepMetrics(step_wait, thr, speed)

    def run_until_decision(self, horizon_s: float | None = None) -> list[int]:
        """Step to the next cycle boundary (or ``horizon_s``); return deciding intersections."""
        dt = self.time_to_next_boundary()
        if horizon_s is not None:
            dt = min(dt, horizon_s - self.t)
        if dt > _EPS:
            self.step(dt)
        return self.pending_decisions()

    def _check_conservation(self):
        i = self.ints
        if i[K.GENERATED] != i[K.IN_NETWORK] + i[K.EXITED] + i[K.BLOCKED]:
            raise AssertionError("vehicle conservation violated")

    # -- observations --------------------------------------------------------

    def _check_index(self, m):
        if not 0 <= m < self.M:
            raise IndexError(f"intersection {m} out of range [0, {self.M})")

    def observation(self) -> np.ndarray:
        """Per-intersection blocks ``[phase_m, stopped lanes of m / capacity]``."""
        out = np.empty(self.M + self.L)
        scaled = self.snap_stopped / self.lane_cap
        for m in range(self.M):
            a, b = self.lane_ptr[m], self.lane_ptr[m + 1]
            out[a + m] = PHASE_CODE[self.phase[m]]
            out[a + m + 1: b + m + 1] = scaled[a:b]
        return out

    def remaining_green(self) -> np.ndarray:
        rem = np.where(self.phase == K.GREEN, self.phase_end - self.t, 0.0)
        return np.maximum(rem, 0.0)

    def observe_local(self, m: int, critic: bool = False) -> np.ndarray:
        self._check_index(m)
        obs = self.observation()
        if critic:
            obs = np.concatenate([obs, self.remaining_green() / self.cycle])
        return obs

    def end_of_green_snapshot(self, m: int) -> tuple[int, float]:
        """``(N_mt, g_mt)`` for the main green that ended exactly now."""
        self._check_index(m)
        ev = self.green_end_events[m]
        if ev is None or abs(ev.time_s - self.t) > _EPS:
            raise SignalTimingError(f"intersection {m} is not at an end-of-green event (t={self.t})")
        return ev.N, ev.g

    def last_green_end(self, m: int) -> GreenEnd | None:
        self._check_index(m)
        return self.green_end_events[m]

    def take_intersection_waits(self) -> np.ndarray:
        """Waiting seconds accrued per intersection since the previous call."""
        w = self.wait_int.copy()
        self.wait_int[:] = 0.0
        return w

    def stopped_per_lane(self) -> list:
        return [self.snap_stopped[self.lane_ptr[m]:self.lane_ptr[m + 1]].copy() for m in range(self.M)]

    def state(self) -> CorridorState:
        rem = np.maximum(self.phase_end - self.t, 0.0)
        sig = SignalState([PHASE_NAMES[p] for p in self.phase], rem, self.green.copy())
        return CorridorState(self.stopped_per_lane(), sig, self.t)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.snap_stopped, self.phase, self.phase_end, self.green, self.f_len,
                    self.f_head, self.fifo, self.vid, self.vlane, self.tstop, self.wait,
                    self.ints, self.thr_cum, np.array([self.t, self.total_wait_s])):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # -- reporting -----------------------------------------------------------

    @property
    def counters(self) -> dict:
        i = self.ints
        return {
            "generated": int(i[K.GENERATED]),
            "blocked": int(i[K.BLOCKED]),
            "exited": int(i[K.EXITED]),
            "in_network": int(i[K.IN_NETWORK]),
        }

    def active_wait_s(self) -> float:
        return float(self.wait[self.vlane >= 0].sum())

    def vehicle_waits(self) -> np.ndarray:
        return self.wait[self.vlane >= 0].copy()

    def metrics_report(self) -> CumulativeMetrics:
        active = np.flatnonzero(self.vlane >= 0)
        v = self.config.free_flow_speed_mps
        app = self.lane_app_len[self.vlane[active]]
        pos = np.clip(app - np.maximum(self.tstop[active] - self.t, 0.0) * v, 0.0, app)
        dist = self.facc[K.EXITED_DIST] + float((self.dist[active] + pos).sum())
        time = self.facc[K.EXITED_TIME] + float((self.t - self.tenter[active]).sum())
        c = self.counters
        return CumulativeMetrics(
            total_wait_s=float(self.total_wait_s),
            throughput=self.thr_cum.copy(),
            avg_speed_mps=dist / time if time > 0 else 0.0,
            vehicles_generated=c["generated"],
            vehicles_blocked=c["blocked"],
            vehicles_exited=c["exited"],
            vehicles_in_network=c["in_network"],
            trajectories=self.trajectories(),
        )

    def trajectories(self) -> dict:
        """``vehicle_id -> (times, distances)`` polylines along the corridor."""
        n = int(self.ints[K.N_TRAJ])
        vids, t, x = self.traj_vid[:n], self.traj_t[:n], self.traj_x[:n]
        order = np.lexsort((t, vids))
        vids, t, x = vids[order], t[order], x[order]
        out = {}
        if n:
            cuts = np.flatnonzero(np.diff(vids)) + 1
            for a, b in zip(np.r_[0, cuts], np.r_[cuts, n]):
                out[int(vids[a])] = (t[a:b].copy(), x[a:b].copy())
        return out

    def intersection_positions(self) -> np.ndarray:
        return self.int_x.copy()

    def _append_history(self, thr, step_wait):
        for l in range(self.L):
            m = int(self.lane_m[l])
            n_stop = 0
            for k in range(self.f_len[l]):
                s = self.fifo[l, (self.f_head[l] + k) % self.lane_cap[l]]
                n_stop += self.tstop[s] <= self.t + _EPS
            self.history.append((self.t, m, int(l - self.lane_ptr[m]), n_stop,
                                 PHASE_NAMES[self.phase[m]], int(thr[m]), step_wait))

    def export_history_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sim_time_s", "intersection", "lane", "stopped", "phase", "throughput", "total_wait_s"])
            for row in self.history:
                w.writerow(row)


def new_corridor(config: CorridorConfig, **kwargs) -> Simulator:
    return Simulator(config, **kwargs)
