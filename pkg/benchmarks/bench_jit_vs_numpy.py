"""Time the hot kernels with numba JIT and with the pure numpy fallback.

    python benchmarks/bench_jit_vs_numpy.py [--repeat 3]

Each path runs in its own interpreter because COMMA_DDPG_NO_JIT is read at
import time. The first call of each workload is reported separately since it
includes compilation (or cache loading) on the JIT path.
"""
import argparse
import json
import os
import subprocess
import sys
import time


def workloads():
    import numpy as np

    from comma_ddpg import experiments as X
    from comma_ddpg import nn
    from comma_ddpg.scenarios import five_intersection_corridor

    corridor = five_intersection_corridor()
    rng = np.random.default_rng(0)
    params = nn.MlpParams.init((23, 64, 64, 1), rng)
    x = rng.normal(size=(32, 23))
    dy = rng.normal(size=(32, 1))

    def sim_rollout():
        X.run_fixed_time(corridor, None, 3600.0, seed=0)

    def mlp_step():
        for _ in range(200):
            nn.forward(params, x)
            nn.backward(params, x, dy)

    def mlp_act():
        for i in range(2000):
            nn.forward(params, x[i % 32])

    return {"sim rollout 3600 s (5 intersections)": sim_rollout,
            "mlp fwd+bwd x200 (23-64-64-1, batch 32)": mlp_step,
            "mlp single-row forward x2000": mlp_act}


def child(repeat):
    from comma_ddpg._jit import USE_JIT

    out = {"jit": USE_JIT, "times": {}}
    for name, fn in workloads().items():
        t0 = time.perf_counter()
        fn()
        first = time.perf_counter() - t0
        warm = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            warm.append(time.perf_counter() - t0)
        out["times"][name] = (first, min(warm))
    print(json.dumps(out))


def run_path(no_jit, repeat):
    env = dict(os.environ)
    env.pop("COMMA_DDPG_NO_JIT", None)
    if no_jit:
        env["COMMA_DDPG_NO_JIT"] = "1"
    proc = subprocess.run([sys.executable, __file__, "--child", "--repeat", str(repeat)],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        child(args.repeat)
        return

    jit = run_path(False, args.repeat)
    ref = run_path(True, args.repeat)
    if not jit["jit"]:
        print("warning: numba unavailable, both columns use the numpy path")
    print(f"{'workload':44s} {'numba first':>12s} {'numba warm':>11s} {'numpy warm':>11s} {'speedup':>8s}")
    for name, (first, warm) in jit["times"].items():
        np_warm = ref["times"][name][1]
        print(f"{name:44s} {first:11.3f}s {warm:10.3f}s {np_warm:10.3f}s {np_warm / warm:7.1f}x")


if __name__ == "__main__":
    main()
