import csv
import re
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from comma_ddpg.errors import ConfigError, SignalTimingError
from comma_ddpg.sim import CorridorConfig, Simulator, new_corridor
from comma_ddpg.sim import kernels as K

# 139 m at 13.9 m/s is exactly 10 s of travel, which keeps hand traces simple
TEN_S = 139.0


def one_lane(**kw):
    base = dict(n_intersections=1, lanes_per_intersection=[1], main_lanes=[1], arrival_rate_vph=0.0,
                link_length_m=[], entry_length_m=TEN_S, seed=0)
    base.update(kw)
    return CorridorConfig(**base)


def chain(M, **kw):
    base = dict(n_intersections=M, lanes_per_intersection=[1] * M, main_lanes=[1] * M, arrival_rate_vph=0.0,
                link_length_m=[TEN_S] * (M - 1), entry_length_m=TEN_S, seed=0)
    base.update(kw)
    return CorridorConfig(**base)


def run_fixed(sim, green, until):
    while sim.t < until - 1e-9:
        for m in sim.pending_decisions():
            sim.set_green(m, green)
        sim.run_until_decision(until)


def test_five_intersection_dimensions():
    cfg = CorridorConfig(n_intersections=5, lanes_per_intersection=[3, 3, 4, 4, 4])
    sim = new_corridor(cfg)
    assert cfg.critic_obs_dim == 28
    assert cfg.actor_obs_dim == 23
    assert sim.observe_local(0).shape == (23,)
    assert sim.observe_local(4, critic=True).shape == (28,)
    with pytest.raises(IndexError):
        sim.observe_local(5)


def test_new_simulator_starts_at_min_green():
    sim = Simulator(CorridorConfig(n_intersections=2, lanes_per_intersection=[2, 2], link_length_m=[200]))
    st_ = sim.state()
    assert st_.sim_time_s == 0.0
    assert st_.signal.phase == ["Green", "Green"]
    np.testing.assert_array_equal(st_.signal.current_green_duration_s, [15.0, 15.0])
    assert sim.counters["in_network"] == 0


def test_empty_corridor_never_waits():
    sim = Simulator(one_lane())
    for _ in range(36):
        m = sim.step(100.0)
        assert m.total_wait_s == 0.0
    assert sim.counters["generated"] == 0
    rep = sim.metrics_report()
    assert rep.total_wait_s == 0.0
    assert rep.throughput.tolist() == [0]
    obs = sim.observation()
    assert np.all(obs[1:] == 0)


def test_same_seed_same_digest():
    cfg = CorridorConfig(arrival_rate_vph=400.0, seed=7)
    a, b = Simulator(cfg), Simulator(cfg)
    for _ in range(100):
        a.step(10.0)
        b.step(10.0)
    assert a.digest() == b.digest()
    c = Simulator(replace(cfg, seed=8))
    for _ in range(100):
        c.step(10.0)
    assert c.digest() != a.digest()


@pytest.mark.parametrize("kw, needle", [
    (dict(n_intersections=0), "M >= 1"),
    (dict(lanes_per_intersection=[3, 0, 4, 4, 4]), "N_lane >= 1"),
    (dict(green_min_s=0.0), "green_min_s"),
    (dict(green_max_s=116.0), "green_max_s + yellow_s < cycle_length_s"),
    (dict(turn_fractions=(0.5, 0.2, 0.2)), "turn_fractions sum to 1"),
    (dict(stop_speed_threshold_mps=2.0), "3 km/h"),
])
def test_invalid_config_names_invariant(kw, needle):
    with pytest.raises(ConfigError, match=re.escape(needle)):
        Simulator(CorridorConfig(**kw))


def test_red_is_cycle_minus_green_minus_yellow():
    sim = Simulator(one_lane())
    sim.apply_green_durations([60.0])
    assert sim.red_duration(0) == 55.0
    with pytest.raises(SignalTimingError):
        sim.step(1.0)
        sim.apply_green_durations([60.0])  # mid-cycle
    sim2 = Simulator(one_lane())
    with pytest.raises(SignalTimingError):
        sim2.apply_green_durations([91.0])
    with pytest.raises(SignalTimingError):
        sim2.set_green(0, 14.0)


def test_min_green_everywhere_gives_long_reds():
    cfg = chain(3, arrival_rate_vph=300.0)
    sim = Simulator(cfg)
    run_fixed(sim, cfg.green_min_s, 1200)
    assert sim.cycle_log
    for m, g, y, r in sim.cycle_log:
        assert g == 15.0
        assert r == pytest.approx(120.0 - 15.0 - 5.0, abs=1e-9)


def test_queued_vehicle_discharges_in_first_headway():
    sim = Simulator(one_lane())
    sim.step(25.0)  # red from t=20
    sim.spawn(0)
    sim.run_until_decision()  # next cycle boundary at t=120
    assert sim.t == 120.0
    sim.set_green(0, 30.0)
    m = sim.step(2.0)
    assert m.throughput.tolist() == [1]


def test_red_wait_accrues_per_stopped_vehicle():
    k = 6
    sim = Simulator(one_lane())
    sim.step(25.0)
    for _ in range(k):
        sim.spawn(0)
    sim.step(15.0)  # all at the stop line by t=35
    m = sim.step(10.0)
    assert m.total_wait_s == pytest.approx(10.0 * k, abs=1e-9)


def test_poisson_arrival_counts_within_three_sigma():
    counts = []
    for seed in range(20):
        sim = Simulator(one_lane(arrival_rate_vph=360.0, seed=seed, lane_capacity=400))
        sim.step(3600.0)
        counts.append(sim.counters["generated"])
    assert all(abs(c - 360) <= 57 for c in counts)
    assert abs(np.mean(counts) - 360) <= 57 / np.sqrt(20)


def test_mirrored_intersections_have_identical_blocks():
    cfg = CorridorConfig(n_intersections=2, lanes_per_intersection=[2, 2], main_lanes=[1, 1],
                         arrival_rate_vph=0.0, link_length_m=[TEN_S], entry_length_m=TEN_S)
    sim = Simulator(cfg)
    sim.step(25.0)
    for _ in range(3):
        sim.spawn(0, exit_at=0)
        sim.spawn(2, exit_at=1)
    sim.step(70.0)
    obs = sim.observation()
    np.testing.assert_array_equal(obs[0:3], obs[3:6])
    sim.run_until_decision()
    sim.apply_green_durations([15.0, 15.0])
    sim.step(15.0)  # green ends at t=135 with vehicles left
    obs = sim.observation()
    np.testing.assert_array_equal(obs[0:3], obs[3:6])


def queue_then_green(k, green):
    sim = Simulator(one_lane())
    sim.step(25.0)
    for _ in range(k):
        sim.spawn(0)
    sim.run_until_decision()
    sim.set_green(0, green)
    sim.step(green)
    return sim


def test_snapshot_queue_empties_exactly_at_green_end():
    # 9 vehicles leave at 120, 122, ..., 136 and green ends at 136
    sim = queue_then_green(9, 16.0)
    assert sim.end_of_green_snapshot(0) == (0, 0.0)


def test_snapshot_counts_vehicles_left():
    sim = queue_then_green(16, 16.0)
    assert sim.end_of_green_snapshot(0) == (7, 0.0)
    assert sim.stopped_per_lane()[0].tolist() == [7]


def test_snapshot_idle_green_after_single_vehicle():
    # spawned at the boundary, at the stop line 10 s later, gone at t=130;
    # green runs to 142 so 12 s of it is idle
    sim = Simulator(one_lane())
    sim.run_until_decision()
    sim.spawn(0)
    sim.set_green(0, 22.0)
    sim.step(22.0)
    N, g = sim.end_of_green_snapshot(0)
    assert N == 0
    assert g == pytest.approx(12.0, abs=1e-9)


def test_snapshot_outside_green_end_rejected():
    sim = Simulator(one_lane())
    sim.step(3.0)
    with pytest.raises(SignalTimingError):
        sim.end_of_green_snapshot(0)


def test_clearance_count_includes_vehicles_still_approaching():
    def snap(mode):
        sim = Simulator(one_lane(clearance_count=mode))
        sim.run_until_decision()
        sim.set_green(0, 20.0)
        sim.step(15.0)
        sim.spawn(0)  # reaches the stop line at 145, after green ends at 140
        sim.step(5.0)
        return sim.end_of_green_snapshot(0)
    assert snap("approach") == (1, 0.0)
    assert snap("stopped")[0] == 0


def test_unimpeded_vehicle_has_free_flow_speed():
    sim = Simulator(chain(5))
    sim.apply_green_durations([90.0] * 5)
    sim.spawn(0)
    run_fixed(sim, 90.0, 600)
    rep = sim.metrics_report()
    assert rep.vehicles_exited == 1
    assert rep.total_wait_s == 0.0
    assert rep.avg_speed_mps == pytest.approx(13.9, rel=1e-12)
    assert rep.throughput.tolist() == [1] * 5


def test_two_vehicles_one_red_stop():
    sim = Simulator(one_lane())
    sim.spawn(0)  # through on the first green
    sim.step(80.0)
    sim.spawn(0)  # arrives at 90, waits for the green at 120
    run_fixed(sim, 15.0, 240)
    assert sim.total_wait_s == pytest.approx(30.0, abs=1.0)
    assert sim.metrics_report().vehicles_exited == 2


def test_history_export_header(tmp_path):
    sim = Simulator(chain(2, arrival_rate_vph=300.0), record_history=True)
    for _ in range(5):
        sim.step(1.0)
    p = tmp_path / "h.csv"
    sim.export_history_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["sim_time_s", "intersection", "lane", "stopped", "phase", "throughput", "total_wait_s"]
    assert len(rows) == 1 + 5 * 2


@given(seed=st.integers(0, 10_000), rate=st.floats(0.0, 1500.0), green=st.floats(15.0, 90.0))
def test_conservation_and_wait_accounting(seed, rate, green):
    cfg = CorridorConfig(n_intersections=3, lanes_per_intersection=[3, 2, 3], link_length_m=[200.0, 300.0],
                         arrival_rate_vph=rate, seed=seed, lane_capacity=15)
    sim = Simulator(cfg)
    total = 0.0
    while sim.t < 600:
        for m in sim.pending_decisions():
            sim.set_green(m, green)
        total += sim.step(7.0).total_wait_s
        c = sim.counters
        assert c["generated"] == c["in_network"] + c["exited"] + c["blocked"]
        assert all(0 <= x <= cfg.lane_capacity for lane in sim.stopped_per_lane() for x in lane)
        st_ = sim.state()
        assert np.all((st_.signal.remaining_s >= 0) & (st_.signal.remaining_s <= 120.0))
    assert total == pytest.approx(sim.total_wait_s, rel=1e-12, abs=1e-9)
    per_vehicle = sim.facc[K.EXITED_WAIT] + sim.active_wait_s()
    assert per_vehicle == pytest.approx(sim.total_wait_s, abs=1e-6)


@given(seed=st.integers(0, 10_000), greens=st.lists(st.floats(15.0, 90.0), min_size=4, max_size=4))
def test_phase_algebra(seed, greens):
    cfg = CorridorConfig(n_intersections=2, lanes_per_intersection=[2, 2], link_length_m=[250.0],
                         cycle_length_s=[120.0, 100.0], arrival_rate_vph=300.0, seed=seed)
    sim = Simulator(cfg)
    k = 0
    seen = [[] for _ in range(2)]
    while sim.t < 500:
        for m in sim.pending_decisions():
            sim.set_green(m, greens[k % 4])
            k += 1
        sim.step(1.0)
        for m in range(2):
            p = sim.state().signal.phase[m]
            if not seen[m] or seen[m][-1] != p:
                seen[m].append(p)
    for m, g, y, r in sim.cycle_log:
        assert g + y + r == pytest.approx(cfg.cycle_length_s[m], abs=1e-9)
    order = {"Green": "Yellow", "Yellow": "Red", "Red": "Green"}
    for s in seen:
        assert all(order[a] == b for a, b in zip(s, s[1:]))


def test_doubling_demand_never_reduces_waiting():
    def wait(rate, seed):
        cfg = CorridorConfig(arrival_rate_vph=rate, seed=seed)
        sim = Simulator(cfg)
        run_fixed(sim, 52.5, 1800)
        return sim.total_wait_s
    lo = np.mean([wait(150.0, s) for s in range(5)])
    hi = np.mean([wait(300.0, s) for s in range(5)])
    assert hi >= lo
