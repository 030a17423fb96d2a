"""Command-line entry point.

Environment overrides: ``HIQL_OUTPUT_DIR`` replaces the default output
directory and ``HIQL_THREADS`` caps the BLAS thread pool (default 1).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import experiments as ex
from . import plots, theory
from .data import generate_dataset, save_dataset
from .envs import load_map
from .runtime import FlatAgent, HierarchicalAgent

log = logging.getLogger("hiql")


def _output_dir(args) -> str:
    return args.output_dir or os.environ.get("HIQL_OUTPUT_DIR") or "runs"


def _overrides(pairs) -> dict:
    items = {}
    for p in pairs or []:
        if "=" not in p:
            raise SystemExit(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        items[k.strip()] = v.strip()
    return items


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    cfg = ex.apply_overrides(cfg, _overrides(args.set))
    items = {"run.output_dir": _output_dir(args)}
    if getattr(args, "seeds", None):
        items["run.seeds"] = args.seeds
    return ex.apply_overrides(cfg, items).validate()


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_generate_data(args):
    env = load_map(args.env)
    ds = generate_dataset(env, args.behavior, args.num_traj, args.max_len, seed=args.seed, epsilon=args.epsilon)
    save_dataset(ds, args.out)
    _print_json({"path": str(args.out), "trajectories": len(ds), "transitions": ds.num_transitions,
                 "content_hash": ds.content_hash()})


def cmd_train(args):
    cfg = _config(args)
    records = ex.run_seeds(cfg)
    summary = {
        "hierarchical_success": ex.aggregate(records, ("hierarchical", "success")),
        "flat_success": ex.aggregate(records, ("flat", "success")),
        "runs": [r.run_dir for r in records],
    }
    if len(records) > 0:
        ex.emit_plots(records, Path(cfg.output_dir) / "plots")
    _print_json(summary)


def cmd_eval(args):
    run_dir = args.checkpoint or args.run_dir
    if run_dir is None:
        raise ValueError("eval needs a run directory (positional or --checkpoint)")
    cfg, env, value, high, low, flat = ex.load_run(run_dir)
    items = _overrides(args.set)
    if args.episodes is not None:
        items["eval.episodes"] = str(args.episodes)
    cfg = ex.apply_overrides(cfg, items)
    rng = np.random.default_rng(args.seed)
    distant, every, d0 = ex._pairs(env, cfg, rng)
    out = {"hierarchical": ex._evaluate_agent(HierarchicalAgent(high, low, cfg.subgoal_hold), env, cfg, distant, every, d0, args.seed)}
    if flat is not None:
        out["flat"] = ex._evaluate_agent(FlatAgent(flat), env, cfg, distant, every, d0, args.seed)
    out.update(seed=args.seed, episodes=cfg.eval.episodes, distant_threshold=int(d0))
    (Path(run_dir) / f"eval_seed_{args.seed}.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    _print_json(out)


def cmd_analyze_theory(args):
    out = Path(_output_dir(args)) / "theory"
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = _ints(args.k_range) if args.k_range else (1, None)
    result = {}
    for T in _ints(args.T):
        for sigma in _floats(args.sigma):
            ks = list(range(lo, min(hi or T, T) + 1))
            rows = theory.bound_table(T, sigma, ks)
            label = f"T={T}, sigma={sigma:g}"
            result[label] = {"rows": rows, "optimal_k": theory.optimal_k(T, sigma), "flat": theory.flat_error(T, sigma)}
            plots.bound_curves({label: rows}, out / f"bound_T{T}_s{sigma:g}.svg")
            print(f"# {label}  flat={result[label]['flat']:.6f}  optimal_k={result[label]['optimal_k']}")
            print("k\thigh\tlow\tbound\tflat")
            for r in rows:
                print(f"{r['k']}\t{r['high']:.6f}\t{r['low']:.6f}\t{r['bound']:.6f}\t{r['flat']:.6f}")
    plots.write_plot_data(out / "theory_table.json", result)


def cmd_noise_study(args):
    env = load_map(args.env)
    out = Path(_output_dir(args)) / "noise_study"
    goal = args.goal if args.goal is not None else env.num_states - 1
    m = theory.noisy_action_map(env, goal, args.sigma, args.seed, args.k)
    plots.write_plot_data(out / "action_map.json", m.to_dict())
    if hasattr(env, "coord"):
        plots.action_map_plot(env, {"flat": (m.flat_actions, m.flat_correct), "hierarchical": (m.hier_actions, m.hier_correct)},
                              out / "action_map.svg")
    prof = theory.wrong_arrow_profile(env, goal, args.sigma, range(args.seeds), args.k)
    plots.line_plot({"flat": (prof["distance"], prof["flat_wrong"]), "hierarchical": (prof["distance"], prof["hier_wrong"])},
                    out / "wrong_by_distance.svg", "distance to goal", "wrong-arrow fraction")
    _print_json({"flat_wrong": m.wrong_fraction("flat"), "hier_wrong": m.wrong_fraction("hier"), "k": m.k})


def cmd_ablate_k(args):
    cfg = _config(args)
    _print_json(ex.ablate_k(cfg, _ints(args.k_list)))


def cmd_ablate_repr(args):
    cfg = _config(args)
    modes = [m.strip() for m in args.modes.split(",")] if args.modes else list(ex.REPR_MODES)
    _print_json(ex.ablate_repr(cfg, modes))


def cmd_action_limited(args):
    cfg = _config(args)
    _print_json(ex.action_limited(cfg, _floats(args.fractions))["summary"])


def _add_run_args(p):
    p.add_argument("--config", help="experiment config file (dotted key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--output-dir", help="output directory (env HIQL_OUTPUT_DIR; default runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiql", description="Hierarchical goal-conditioned offline RL on gridworlds")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="roll out a behavior policy and save a dataset")
    p.add_argument("--env", default="maze15")
    p.add_argument("--behavior", default="epsilon_noisy", choices=["optimal", "epsilon_noisy", "random_walk"])
    p.add_argument("--num-traj", type=int, default=200)
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="run the staged pipeline for each seed")
    _add_run_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a persisted run directory")
    p.add_argument("run_dir", type=Path, nargs="?", help="run directory written by train")
    p.add_argument("--checkpoint", type=Path, help="same as the positional run directory")
    p.add_argument("--episodes", type=int, help="number of evaluation episodes")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze-theory", help="closed-form error bounds across subgoal steps")
    p.add_argument("--T", default="8,64,256", help="comma-separated distances")
    p.add_argument("--sigma", default="0.2,0.5,1.0", help="comma-separated noise levels")
    p.add_argument("--k-range", default="", help="lo,hi (default 1..T)")
    p.add_argument("--output-dir")
    p.set_defaults(fn=cmd_analyze_theory)

    p = sub.add_parser("noise-study", help="greedy arrows under a noisy optimal value")
    p.add_argument("--env", default="maze15")
    p.add_argument("--goal", type=int)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=100, help="noise draws for the distance profile")
    p.add_argument("--output-dir")
    p.set_defaults(fn=cmd_noise_study)

    p = sub.add_parser("ablate-k", help="success rate against subgoal steps")
    _add_run_args(p)
    p.add_argument("--k-list", default="1,2,4,8,16")
    p.set_defaults(fn=cmd_ablate_k)

    p = sub.add_parser("ablate-repr", help="compare subgoal representations")
    _add_run_args(p)
    p.add_argument("--modes", default="", help="subset of raw,phi_g,phi_gs,phi_diff")
    p.set_defaults(fn=cmd_ablate_repr)

    p = sub.add_parser("action-limited", help="low-level policy from a fraction of labeled trajectories")
    _add_run_args(p)
    p.add_argument("--fractions", default="1.0,0.25")
    p.set_defaults(fn=cmd_action_limited)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = int(os.environ.get("HIQL_THREADS", "1"))
    try:
        with threadpool_limits(limits=threads):
            args.fn(args)
    except (ValueError, KeyError, ex.StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
