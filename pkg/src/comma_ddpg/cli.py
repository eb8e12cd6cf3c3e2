"""Command-line entry point: ``comma-ddpg <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import agents as ag
from . import experiments as X
from . import mdp
from . import training as T
from .errors import CheckpointError, ConfigError, InsufficientDataError, NonFiniteError, SignalTimingError
from .scenarios import RunConfig, load_run_config

log = logging.getLogger("comma_ddpg")


def _run_config(args) -> RunConfig:
    run = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        run = replace(run, train=replace(run.train, seed=args.seed), eval=replace(run.eval, seeds=[args.seed]))
    if getattr(args, "seeds", None):
        run = replace(run, eval=replace(run.eval, seeds=list(args.seeds)))
    if getattr(args, "epochs", None) is not None:
        run = replace(run, train=replace(run.train, epochs=args.epochs))
    return run


def _out_dir(args, default: str) -> Path:
    d = Path(args.out or default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _print_rows(rows):
    for r in rows:
        print(f"{r.controller:>18} seed {r.seed:>3}  wait {r.waiting_time_s:12.1f} s  "
              f"speed {r.avg_speed_mps:6.2f} m/s  thr {r.throughput}")


def _finish_rows(rows, out: Path):
    _print_rows(rows)
    X.write_results_csv(out / "results.csv", rows)
    summary = X.summarize(rows)
    X.write_summary(out / "summary.json", summary)
    print(f"wrote {out / 'results.csv'} and {out / 'summary.json'}")
    return summary


def cmd_train(args) -> int:
    run = _run_config(args)
    out = _out_dir(args, "runs/train")
    cfg = replace(run.train, use_global=not args.local_only, checkpoint_dir=str(out),
                  metrics_csv=str(out / "metrics.csv"))
    (out / "run_config.json").write_text(json.dumps(replace(run, train=cfg).to_dict(), indent=2))
    if args.checkpoint:
        trainer = T.Trainer.resume(args.checkpoint, T.corridor_factory(run.corridor), cfg)
    else:
        agents = T.build_agents(run.corridor, cfg)
        T.pretrain_from_fixed_time(agents, T.corridor_factory(run.corridor), cfg)
        trainer = T.Trainer(T.corridor_factory(run.corridor), agents, cfg)
    res = trainer.train()
    ag.save_bundle(res.agents.locals, res.agents.global_agent, out / "final")
    last = res.metrics[-1] if res.metrics else None
    if last is not None:
        print(f"trained {last.epoch} epochs; last rollout wait {last.total_wait_s:.1f} s; "
              f"actions local/global {res.provenance.local}/{res.provenance.global_}")
    print(f"final agents in {out / 'final'}")
    return 0


def cmd_eval(args) -> int:
    run = _run_config(args)
    out = _out_dir(args, "runs/eval")
    if args.checkpoint:
        agents = X.load_policy(args.checkpoint)
        calls = agents.global_agent.actor_calls if agents.global_agent is not None else 0
        rows = []
        for s in run.eval.seeds:
            es = X.eval_seed(run.eval, s)
            fx = X.run_fixed_time(run.corridor, run.eval.fixed_green_s, run.eval.horizon_s, es)
            lp = X.run_local_policy(run.corridor, agents.locals, run.eval.horizon_s, es, "checkpoint")
            fx.seed = lp.seed = s
            rows += [fx, lp]
        if agents.global_agent is not None and agents.global_agent.actor_calls != calls:
            raise RuntimeError("global actor was invoked during evaluation")
        _finish_rows(rows, out)
        return 0
    spec = X.ExperimentSpec(run, output_dir=str(out))
    res = X.run_experiment(spec, progress=lambda r: _print_rows([r]))
    for c in (X.Controller.COMMA_DDPG, X.Controller.LOCAL_ONLY_DDPG):
        red = res.reduction_vs(c)
        print(f"{c.value}: waiting-time reduction vs fixed-time, median {np.median(red):.1%} "
              f"(per seed {', '.join(f'{x:.1%}' for x in red)})")
    print(f"wrote {out / 'results.csv'} and {out / 'summary.json'}")
    return 0


def cmd_sweep_tau(args) -> int:
    run = _run_config(args)
    out = _out_dir(args, "runs/sweep_tau")
    rows = X.sweep_tau(run, progress=lambda r: log.info("%s seed %d wait %.0f", r.controller, r.seed, r.waiting_time_s))
    _finish_rows(rows, out)
    return 0


def cmd_compare_policy_mode(args) -> int:
    run = _run_config(args)
    out = _out_dir(args, "runs/policy_mode")
    rows = X.compare_on_off_policy(run, progress=lambda r: log.info("%s seed %d wait %.0f", r.controller, r.seed, r.waiting_time_s))
    _finish_rows(rows, out)
    return 0


def cmd_certify(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.mdp:
        m = mdp.FiniteMdp.load(args.mdp)
        pi = np.full((m.n_states, m.n_actions), 1.0 / m.n_actions)
        report = mdp.CertificateReport()
        r = mdp.value_iteration(m, pi, m.gamma, 1e-10, rng=np.random.default_rng(seed), track_error=True)
        excess = float(np.max(r.ratios)) - m.gamma if len(r.ratios) else 0.0
        report.add("contraction ratio - lambda", excess <= 1e-12, excess, 1e-12, "uniform policy")
        lin = float(np.max(np.abs(r.V - mdp.solve_linear(mdp.PolicyMatrix.from_policy(m, pi), m.gamma))))
        report.add("max |V_iter - V_linear|", lin <= 1e-6, lin, 1e-6)
        d = mdp.gershgorin_bound(mdp.PolicyMatrix.from_policy(m, pi).P_pi)
        report.add("gershgorin bound", d.bound <= 1.0 + 1e-12, d.bound, 1.0)
    else:
        report = mdp.certify_all(seed)
    text = report.to_text()
    print(text, end="")
    if args.out:
        p = Path(args.out)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
    return 0 if report.passed else 1


def cmd_export_diagram(args) -> int:
    run = _run_config(args)
    seed = run.eval.seeds[0]
    es = X.eval_seed(run.eval, seed)
    if args.checkpoint:
        agents = X.load_policy(args.checkpoint)
        _, sim = X.run_local_policy(run.corridor, agents.locals, run.eval.horizon_s, es, "checkpoint",
                                    record_trajectories=True, return_sim=True)
    else:
        _, sim = X.run_fixed_time(run.corridor, run.eval.fixed_green_s, run.eval.horizon_s, es,
                                  record_trajectories=True, return_sim=True)
    path = Path(args.out or "runs/time_space.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    traj = sim.trajectories()
    n = X.export_time_space(traj, path, X.green_bands(sim))
    clean = X.through_vehicles_without_stops(traj, sim.intersection_positions())
    print(f"wrote {n} vehicle polylines to {path}; {len(clean)} crossed every intersection without stopping")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="comma-ddpg", description="Corridor signal control with cooperative DDPG agents.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", help="YAML run config (default: built-in five-intersection corridor)")
        sp.add_argument("--seed", type=int, help="single seed for training and evaluation")
        sp.add_argument("--out", help="output directory or file")
        if checkpoint:
            sp.add_argument("--checkpoint", help="agent bundle or trainer checkpoint directory")
        return sp

    sp = common(sub.add_parser("train", help="train agents, writing per-epoch checkpoints and metrics"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--local-only", action="store_true", help="train without the global agent")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint, or run the full paired comparison"))
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_eval)

    for name, fn, h in (("sweep-tau", cmd_sweep_tau, "compare soft-update settings"),
                        ("compare-policy-mode", cmd_compare_policy_mode, "on-policy vs off-policy buffers")):
        sp = common(sub.add_parser(name, help=h), checkpoint=False)
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--epochs", type=int)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("certify-convergence", help="numerical contraction and spectral-bound certificates")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="write the text report here")
    sp.add_argument("--mdp", help="certify this finite MDP (JSON) under the uniform policy")
    sp.add_argument("--config", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_certify)

    sp = common(sub.add_parser("export-diagram", help="time-space trajectories for one evaluation run"))
    sp.set_defaults(func=cmd_export_diagram)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, InsufficientDataError, NonFiniteError, SignalTimingError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
