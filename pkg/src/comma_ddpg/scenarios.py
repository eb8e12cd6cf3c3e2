"""Built-in corridor scenarios and run-config files.

A run config is YAML with up to three sections::

    corridor: {...CorridorConfig fields...}
    train: {...TrainConfig fields...}
    eval: {horizon_s: 3600, seeds: [0, 1, 2, 3, 4], fixed_green_s: null}
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .sim.config import CorridorConfig, load_yaml
from .training import TrainConfig


def arterial_rates(lanes, main_lanes, main_entry_vph, main_side_vph, cross_vph):
    """Per-lane arrival rates: heavy main-street entry, lighter side feeds downstream."""
    return [
        [main_entry_vph if m == 0 else main_side_vph] * k + [cross_vph] * (n - k)
        for m, (n, k) in enumerate(zip(lanes, main_lanes))
    ]


def five_intersection_corridor(seed: int = 0, **overrides) -> CorridorConfig:
    """Five-intersection arterial near capacity under the midpoint fixed plan.

    Main street enters at 700 veh/h/lane with 90% through movement; side
    streets feed 120 veh/h/lane onto the main street and 150 veh/h/lane onto
    the cross approaches.
    """
    lanes = [3, 3, 4, 4, 4]
    main = [2] * 5
    cfg = dict(
        n_intersections=5,
        lanes_per_intersection=lanes,
        main_lanes=main,
        cycle_length_s=120.0,
        link_length_m=[300.0, 450.0, 250.0, 400.0],
        arrival_rate_vph=arterial_rates(lanes, main, 700.0, 120.0, 150.0),
        turn_fractions=(0.9, 0.05, 0.05),
        seed=seed,
    )
    cfg.update(overrides)
    return CorridorConfig(**cfg)


def quiet_corridor(seed: int = 0, n_intersections: int = 2, link_length_m: float = 150.0) -> CorridorConfig:
    """Short light-traffic corridor for smoke runs; its links are short enough
    for a platoon to clear several intersections inside one green."""
    lanes = [3] * n_intersections
    return CorridorConfig(
        n_intersections=n_intersections, lanes_per_intersection=lanes, main_lanes=[2] * n_intersections,
        link_length_m=[link_length_m] * (n_intersections - 1), arrival_rate_vph=200.0, seed=seed,
    )


SCENARIOS = {
    "corridor5": five_intersection_corridor,
    "quiet": quiet_corridor,
}


@dataclass
class EvalSettings:
    horizon_s: float = 3600.0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    fixed_green_s: float | None = None
    # evaluation simulators use seed ``eval_seed_offset + seed`` so they never
    # coincide with training rollouts
    eval_seed_offset: int = 10_000

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("eval seeds must be non-empty")
        if not self.horizon_s > 0:
            raise ConfigError("eval horizon must be positive")


@dataclass
class RunConfig:
    corridor: CorridorConfig
    train: TrainConfig
    eval: EvalSettings

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return {"corridor": self.corridor.to_dict(), "train": self.train.to_dict(),
                "eval": dict(vars(self.eval))}


def default_run_config() -> RunConfig:
    return RunConfig(five_intersection_corridor(), TrainConfig(), EvalSettings())


def load_run_config(path: str | Path | None) -> RunConfig:
    """Read a YAML run config; missing sections fall back to the built-in corridor."""
    if path is None:
        return default_run_config()
    data = load_yaml(path)
    unknown = set(data) - {"corridor", "train", "eval", "scenario"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    if "corridor" in data:
        corridor = CorridorConfig.from_dict(data["corridor"])
    else:
        name = data.get("scenario", "corridor5")
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
        corridor = SCENARIOS[name]()
    train = TrainConfig.from_dict(data.get("train") or {})
    ev = data.get("eval") or {}
    unknown = set(ev) - set(EvalSettings.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"{path}: unknown eval keys {sorted(unknown)}")
    return RunConfig(corridor, train, EvalSettings(**ev))
