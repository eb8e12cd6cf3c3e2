"""Point-queue kernels for the corridor simulator.

Every lane is a FIFO of vehicle slots. A vehicle carries the time ``tstop`` at
which it reaches the stop line at free-flow speed; it departs at
``max(tstop, next_free, interval start)`` when its approach is green, so a
vehicle is stopped exactly on ``[tstop, departure)``. Signals are constant
inside one ``advance`` call; the caller splits time at phase changes.

These run under numba, or as plain Python when JIT is disabled.
"""
import numpy as np

from .._jit import njit

# int counters
GENERATED, BLOCKED, EXITED, NEXT_VID, IN_NETWORK, N_FREE, N_TRAJ = range(7)
# float accumulators
STEP_WAIT, EXITED_WAIT, EXITED_TIME, EXITED_DIST = range(4)

GREEN, YELLOW, RED = 0, 1, 2


@njit
def _record(traj_vid, traj_t, traj_x, ints, v, t, x):
    k = ints[N_TRAJ]
    traj_vid[k] = v
    traj_t[k] = t
    traj_x[k] = x
    ints[N_TRAJ] = k + 1


@njit
def _push_sorted(fifo, f_head, f_len, lane_cap, tstop, lane, s):
    """Insert slot ``s`` keeping the lane ordered by stop-line arrival time."""
    cap = lane_cap[lane]
    k = f_len[lane]
    while k > 0:
        prev = fifo[lane, (f_head[lane] + k - 1) % cap]
        if tstop[prev] <= tstop[s]:
            break
        fifo[lane, (f_head[lane] + k) % cap] = prev
        k -= 1
    fifo[lane, (f_head[lane] + k) % cap] = s
    f_len[lane] += 1


@njit
def advance(t0, t1, lane_ptr, n_main, lane_cap, lane_app_len, int_x, link_len,
            v_free, headway, phase,
            fifo, f_head, f_len, next_free,
            vid, vlane, tstop, tenter, wait, exit_at, dist, on_main, free_slots,
            arr_lane, arr_time, arr_exit,
            ints, facc, thr, wait_int, last_dep_main,
            traj_vid, traj_t, traj_x, record):
    M = phase.shape[0]

    # exogenous arrivals, already sorted by time
    for k in range(arr_lane.shape[0]):
        lane = arr_lane[k]
        ints[GENERATED] += 1
        if f_len[lane] >= lane_cap[lane]:
            ints[BLOCKED] += 1
            continue
        ints[N_FREE] -= 1
        s = free_slots[ints[N_FREE]]
        vid[s] = ints[NEXT_VID]
        ints[NEXT_VID] += 1
        vlane[s] = lane
        tenter[s] = arr_time[k]
        tstop[s] = arr_time[k] + lane_app_len[lane] / v_free
        wait[s] = 0.0
        dist[s] = 0.0
        exit_at[s] = arr_exit[k]
        m = 0
        while lane >= lane_ptr[m + 1]:
            m += 1
        on_main[s] = lane - lane_ptr[m] < n_main[m]
        _push_sorted(fifo, f_head, f_len, lane_cap, tstop, lane, s)
        ints[IN_NETWORK] += 1
        if record and on_main[s]:
            _record(traj_vid, traj_t, traj_x, ints, vid[s], arr_time[k], int_x[m] - lane_app_len[lane])

    max_dep = 0
    for lane in range(lane_cap.shape[0]):
        max_dep += lane_cap[lane]
    moved_slot = np.empty(max_dep, dtype=np.int64)
    moved_t = np.empty(max_dep)

    for m in range(M):
        n_moved = 0
        has_down = m + 1 < M
        room = 0
        if has_down:
            for l in range(lane_ptr[m + 1], lane_ptr[m + 1] + n_main[m + 1]):
                room += lane_cap[l] - f_len[l]
        for lane in range(lane_ptr[m], lane_ptr[m + 1]):
            is_main = lane - lane_ptr[m] < n_main[m]
            served = (phase[m] == GREEN) if is_main else (phase[m] == RED)
            cap = lane_cap[lane]
            while served and f_len[lane] > 0:
                s = fifo[lane, f_head[lane]]
                ts = tstop[s]
                d = max(ts, next_free[lane], t0)
                if d > t1:
                    break
                continues = exit_at[s] > m
                if continues and room - n_moved <= 0:
                    break  # spillback: downstream main lanes full
                f_head[lane] = (f_head[lane] + 1) % cap
                f_len[lane] -= 1
                w = d - max(ts, t0)
                if w > 0.0:
                    wait[s] += w
                    wait_int[m] += w
                    facc[STEP_WAIT] += w
                next_free[lane] = d + headway
                thr[m] += 1
                if is_main:
                    last_dep_main[m] = d
                dist[s] += lane_app_len[lane]
                if record and (on_main[s] or continues):
                    if d > ts:
                        _record(traj_vid, traj_t, traj_x, ints, vid[s], ts, int_x[m])
                    _record(traj_vid, traj_t, traj_x, ints, vid[s], d, int_x[m])
                if continues:
                    moved_slot[n_moved] = s
                    moved_t[n_moved] = d
                    n_moved += 1
                else:
                    ints[EXITED] += 1
                    ints[IN_NETWORK] -= 1
                    facc[EXITED_WAIT] += wait[s]
                    facc[EXITED_TIME] += d - tenter[s]
                    facc[EXITED_DIST] += dist[s]
                    vlane[s] = -1
                    free_slots[ints[N_FREE]] = s
                    ints[N_FREE] += 1
            # everyone left waits at the stop line until t1
            for k in range(f_len[lane]):
                s = fifo[lane, (f_head[lane] + k) % cap]
                if tstop[s] < t1:
                    w = t1 - max(tstop[s], t0)
                    if w > 0.0:
                        wait[s] += w
                        wait_int[m] += w
                        facc[STEP_WAIT] += w

        if n_moved > 0:
            order = np.argsort(moved_t[:n_moved], kind="mergesort")
            first = lane_ptr[m + 1]
            for j in range(n_moved):
                s = moved_slot[order[j]]
                d = moved_t[order[j]]
                best = first
                for l in range(first, first + n_main[m + 1]):
                    if f_len[l] < f_len[best]:
                        best = l
                vlane[s] = best
                tstop[s] = d + link_len[m] / v_free
                on_main[s] = True
                _push_sorted(fifo, f_head, f_len, lane_cap, tstop, best, s)


@njit
def stopped_counts(fifo, f_head, f_len, lane_cap, tstop, t, out):
    """Vehicles standing at each stop line at time ``t``."""
    for lane in range(f_len.shape[0]):
        c = 0
        for k in range(f_len[lane]):
            s = fifo[lane, (f_head[lane] + k) % lane_cap[lane]]
            if tstop[s] <= t + 1e-9:
                c += 1
        out[lane] = c
    return out
