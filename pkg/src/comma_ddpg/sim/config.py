from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import yaml

from ..errors import ConfigError

KMH = 1.0 / 3.6
STOP_SPEED_MPS = 3.0 * KMH


def _broadcast(value, n, name):
    if isinstance(value, (int, float)):
        return [float(value)] * n
    value = list(value)
    if len(value) != n:
        raise ConfigError(f"{name}: expected {n} entries, got {len(value)}")
    return value


@dataclass
class CorridorConfig:
    """Arterial corridor of ``n_intersections`` signalized intersections.

    Each intersection has a main-street approach (the first ``main_lanes[m]``
    lanes) and a cross-street approach (the rest). The controlled green is the
    main-street green; the cross street is served during main-street red.

    Scalars given for per-intersection fields are broadcast. ``arrival_rate_vph``
    may be a scalar, one value per intersection, or one list of per-lane rates
    per intersection. Main lanes downstream of the first intersection also
    receive upstream through traffic on top of their own rate.
    """

    n_intersections: int = 5
    lanes_per_intersection: Sequence[int] = (3, 3, 4, 4, 4)
    main_lanes: Sequence[int] | None = None
    cycle_length_s: float | Sequence[float] = 120.0
    yellow_s: float = 5.0
    link_length_m: float | Sequence[float] = 300.0
    entry_length_m: float = 200.0
    free_flow_speed_mps: float = 13.9
    saturation_headway_s: float = 2.0
    arrival_rate_vph: Any = 300.0
    turn_fractions: Any = (0.8, 0.1, 0.1)
    green_min_s: float = 15.0
    green_max_s: float = 90.0
    stop_speed_threshold_mps: float = STOP_SPEED_MPS
    lane_capacity: int = 40
    # what N counts at green end: every vehicle on the main approach
    # ("approach") or only those already standing at the stop line ("stopped")
    clearance_count: str = "approach"
    seed: int = 0

    def __post_init__(self):
        self.normalize()
        self.validate()

    @property
    def M(self) -> int:
        return self.n_intersections

    @property
    def total_lanes(self) -> int:
        return int(sum(self.lanes_per_intersection))

    @property
    def actor_obs_dim(self) -> int:
        return self.M + self.total_lanes

    @property
    def critic_obs_dim(self) -> int:
        return 2 * self.M + self.total_lanes

    @property
    def green_mid_s(self) -> float:
        return 0.5 * (self.green_min_s + self.green_max_s)

    def normalize(self):
        M = int(self.n_intersections)
        if M < 1:
            raise ConfigError("invariant M >= 1 violated")
        self.n_intersections = M
        lanes = [int(n) for n in _broadcast(self.lanes_per_intersection, M, "lanes_per_intersection")]
        self.lanes_per_intersection = lanes
        if self.main_lanes is None:
            self.main_lanes = [max(1, (n + 1) // 2) for n in lanes]
        else:
            self.main_lanes = [int(n) for n in _broadcast(self.main_lanes, M, "main_lanes")]
        self.cycle_length_s = [float(c) for c in _broadcast(self.cycle_length_s, M, "cycle_length_s")]
        self.link_length_m = [float(x) for x in _broadcast(self.link_length_m, max(M - 1, 0), "link_length_m")]

        rates = self.arrival_rate_vph
        if isinstance(rates, (int, float)):
            rates = [[float(rates)] * n for n in lanes]
        else:
            rates = list(rates)
            if len(rates) != M:
                raise ConfigError(f"arrival_rate_vph: expected {M} entries, got {len(rates)}")
            rates = [
                [float(r)] * n if isinstance(r, (int, float)) else [float(x) for x in r]
                for r, n in zip(rates, lanes)
            ]
        self.arrival_rate_vph = rates

        tf = self.turn_fractions
        if len(tf) == 3 and all(isinstance(x, (int, float)) for x in tf):
            tf = [tuple(float(x) for x in tf)] * M
        tf = [tuple(float(x) for x in row) for row in tf]
        if len(tf) != M:
            raise ConfigError(f"turn_fractions: expected {M} rows, got {len(tf)}")
        self.turn_fractions = tf

    def validate(self):
        M = self.M
        for m, n in enumerate(self.lanes_per_intersection):
            if n < 1:
                raise ConfigError(f"invariant N_lane >= 1 violated at intersection {m}")
            if not 1 <= self.main_lanes[m] <= n:
                raise ConfigError(f"invariant 1 <= main_lanes <= N_lane violated at intersection {m}")
        if not 0 < self.green_min_s <= self.green_max_s:
            raise ConfigError("invariant 0 < green_min_s <= green_max_s violated")
        if self.yellow_s < 0:
            raise ConfigError("invariant yellow_s >= 0 violated")
        for m, c in enumerate(self.cycle_length_s):
            if not self.green_max_s + self.yellow_s < c:
                raise ConfigError(
                    f"invariant green_max_s + yellow_s < cycle_length_s violated at intersection {m}"
                )
        for m, row in enumerate(self.turn_fractions):
            if len(row) != 3 or min(row) < 0:
                raise ConfigError(f"turn_fractions at intersection {m} must be 3 non-negative values")
            if abs(sum(row) - 1.0) > 1e-9:
                raise ConfigError(f"invariant turn_fractions sum to 1 violated at intersection {m}")
        for m, (r, n) in enumerate(zip(self.arrival_rate_vph, self.lanes_per_intersection)):
            if len(r) != n:
                raise ConfigError(f"arrival_rate_vph at intersection {m}: expected {n} lane rates")
            if min(r) < 0 or not all(math.isfinite(x) for x in r):
                raise ConfigError(f"arrival_rate_vph at intersection {m} must be finite and >= 0")
        if min(self.link_length_m, default=1.0) <= 0 or self.entry_length_m <= 0:
            raise ConfigError("link and entry lengths must be positive")
        if self.free_flow_speed_mps <= self.stop_speed_threshold_mps:
            raise ConfigError("free_flow_speed_mps must exceed stop_speed_threshold_mps")
        if abs(self.stop_speed_threshold_mps - STOP_SPEED_MPS) > 1e-9:
            raise ConfigError("invariant stop_speed_threshold_mps == 3 km/h violated")
        if self.saturation_headway_s <= 0:
            raise ConfigError("saturation_headway_s must be positive")
        if self.lane_capacity < 1:
            raise ConfigError("lane_capacity must be >= 1")
        if self.clearance_count not in ("approach", "stopped"):
            raise ConfigError("clearance_count must be 'approach' or 'stopped'")

    # -- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["turn_fractions"] = [list(r) for r in self.turn_fractions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorridorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown corridor keys: {sorted(unknown)}")
        return cls(**d)


def load_yaml(path: str | Path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_corridor_config(path: str | Path) -> CorridorConfig:
    """Read the ``corridor:`` section (or the whole file) of a YAML config."""
    data = load_yaml(path)
    return CorridorConfig.from_dict(data.get("corridor", data))
