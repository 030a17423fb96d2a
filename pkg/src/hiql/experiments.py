"""Staged experiment runner: value -> high-level -> low-level extraction, plus
the flat baseline, evaluation, persistence and the declared sweeps.

Configs are flat ``section.key = value`` text. Every run writes, under
``<output_dir>/seed_<n>/``:

* ``config.txt``    the resolved config
* ``metrics.jsonl`` one record per logged step (schema versioned)
* ``record.json``   hashes and final evaluation (bit-reproducible)
* ``timings.json``  wall-clock stage timings (not reproducible by nature)
* ``checkpoints/``  value and policy parameters
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plots
from .data import Dataset, generate_dataset, load_dataset, strip_actions
from .envs import GoalEnv, builtin_map, load_map
from .nn import FrozenValue, LearnedValue, ValueNet, load_params, params_hash, save_params
from .policy import AwrConfig, FlatPolicy, HighPolicy, LowPolicy, train_flat, train_high, train_low
from .runtime import EvalConfig, FlatAgent, HierarchicalAgent, evaluate, policy_accuracy, sample_goal_pairs
from .theory import NoiseModel
from .value import IqlConfig, ValueTrainState, train_value

__all__ = [
    "DataConfig",
    "NetConfig",
    "EvalSettings",
    "ExperimentConfig",
    "RunRecord",
    "StageError",
    "parse_config",
    "serialize_config",
    "load_config",
    "apply_overrides",
    "build_dataset",
    "run_experiment",
    "run_seeds",
    "aggregate",
    "ablate_k",
    "ablate_repr",
    "action_limited",
    "emit_plots",
    "load_run",
]

METRICS_SCHEMA = 1
REPR_MODES = {"raw": None, "phi_g": "g", "phi_gs": "gs", "phi_diff": "diff"}
VALUE_SOURCES = ("learned", "noisy_oracle")


@dataclass(frozen=True)
class DataConfig:
    behavior: str = "epsilon_noisy"
    num_traj: int = 200
    max_len: int = 100
    epsilon: float = 0.3
    path: str = ""


@dataclass(frozen=True)
class NetConfig:
    feature_kind: str = "xy"
    value_hidden: tuple = (128, 128, 128)
    phi_hidden: tuple = (128, 128, 128)
    rep_dim: int = 10
    policy_hidden: tuple = (64, 64)
    layer_norm: bool = True


@dataclass(frozen=True)
class EvalSettings:
    episodes: int = 100
    max_steps: int = 100
    epsilon: float = 0.05
    min_distance: int = 0  # 0 means half the diameter
    every: int = 1000
    final_only: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "maze15"
    k: int = 6
    representation: str = "phi_gs"
    labeled_fraction: float = 1.0
    seeds: tuple = (0,)
    output_dir: str = "runs"
    value_source: str = "learned"
    noise_sigma: float = 0.0
    repr_grad: bool = False
    subgoal_hold: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    iql: IqlConfig = field(default_factory=IqlConfig)
    flat: AwrConfig = field(default_factory=AwrConfig)
    high: AwrConfig = field(default_factory=AwrConfig)
    low: AwrConfig = field(default_factory=AwrConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def validate(self) -> "ExperimentConfig":
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.representation not in REPR_MODES:
            raise ValueError(f"representation must be one of {sorted(REPR_MODES)}")
        if self.value_source not in VALUE_SOURCES:
            raise ValueError(f"value_source must be one of {VALUE_SOURCES}")
        if self.value_source == "noisy_oracle" and self.representation != "raw":
            raise ValueError("the noisy oracle value has no representation head; use representation=raw")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.subgoal_hold < 1:
            raise ValueError("subgoal_hold must be at least 1")
        if not (self.env.startswith(("chain:", "open:")) or Path(self.env).exists()):
            builtin_map(self.env)  # raises for unknown names
        if self.data.path and not Path(self.data.path).exists():
            raise ValueError(f"dataset file {self.data.path} does not exist")
        return self

    @property
    def phi_input(self):
        return REPR_MODES[self.representation]

    @property
    def policy_mode(self) -> str:
        return "raw" if self.representation == "raw" else "repr"

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        text = serialize_config(dataclasses.replace(self, output_dir=""))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# --- config text format -------------------------------------------------------------------

_TOP = "run"
_SECTIONS = ("data", "net", "iql", "flat", "high", "low", "eval")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ValueError(f"bad value {raw!r} for {key}") from None
    return raw


def _flatten(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for g in dataclasses.fields(v):
                out[f"{f.name}.{g.name}"] = getattr(v, g.name)
        else:
            out[f"{_TOP}.{f.name}"] = v
    return out


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in _flatten(cfg).items())


def apply_overrides(cfg: ExperimentConfig, items: dict) -> ExperimentConfig:
    """Return ``cfg`` with dotted-key string overrides applied; unknown keys are errors."""
    known = _flatten(cfg)
    top, sections = {}, {s: {} for s in _SECTIONS}
    for key, raw in items.items():
        key = key.strip()
        if key not in known:
            raise KeyError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        value = _coerce(str(raw), known[key], key)
        (top if section == _TOP else sections[section])[name] = value
    for s, vals in sections.items():
        if vals:
            top[s] = dataclasses.replace(getattr(cfg, s), **vals)
    return dataclasses.replace(cfg, **top)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return apply_overrides(base or ExperimentConfig(), items)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# --- records ------------------------------------------------------------------------------


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


@dataclass
class RunRecord:
    seed: int
    config_hash: str
    dataset_hash: str
    value_hash: str
    metrics: list
    final: dict
    timings: dict = field(default_factory=dict)
    run_dir: str = ""

    def to_dict(self) -> dict:
        """Reproducible part only (no timings, no paths)."""
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "dataset_hash": self.dataset_hash,
            "value_hash": self.value_hash,
            "final": self.final,
        }

    def record_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# --- stages ------------------------------------------------------------------------------


def _streams(seed: int) -> dict:
    names = ("data", "strip", "value", "high", "low", "flat", "eval")
    seqs = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc

        return inner

    return wrap


def build_dataset(cfg: ExperimentConfig, env: GoalEnv, seed: int) -> Dataset:
    if cfg.data.path:
        return load_dataset(cfg.data.path, env)
    data_seed = int(np.random.SeedSequence(int(seed)).generate_state(1)[0])
    d = cfg.data
    return generate_dataset(env, d.behavior, d.num_traj, d.max_len, seed=data_seed, epsilon=d.epsilon)


@_stage("value")
def _train_value_stage(cfg, env, dataset, rng, log):
    if cfg.value_source == "noisy_oracle":
        v_star = env.optimal_values(cfg.iql.gamma)
        table = NoiseModel(cfg.noise_sigma).perturb(v_star, rng)
        table[np.eye(env.num_states, dtype=bool)] = 0.0
        return None, FrozenValue(table), {"table": table}
    n = cfg.net
    net = ValueNet(env.feature_dim, n.value_hidden, n.phi_hidden, n.rep_dim, cfg.phi_input, n.layer_norm)
    state = ValueTrainState.create(net, rng)
    for rec in train_value(state, env, dataset, cfg.iql, rng, log_every=100):
        log("value", rec)
    live = LearnedValue(net, state.params, env)
    return live, live.freeze(), state.params


def _pairs(env, cfg, rng):
    d0 = cfg.eval.min_distance or env.diameter // 2
    distant = sample_goal_pairs(env, cfg.eval.episodes, rng, min_distance=d0)
    every = np.argwhere(env.distances > 0)
    return distant, every, d0


def _evaluate_agent(agent, env, cfg, distant, every, d0, seed):
    ec = EvalConfig(cfg.eval.episodes, cfg.eval.max_steps, cfg.eval.epsilon, seed)
    rep = evaluate(agent, env, distant, ec)
    acc = policy_accuracy(agent, env, every, d0)
    return {"success": rep.success_rate, "mean_return": rep.mean_return, "accuracy": acc}


def _policy_loop(train, make_agent, stage, cfg, env, awr, eval_ctx, log, seed):
    """Run ``train(callback)`` and evaluate every ``eval.every`` steps (and at the end)."""
    every = max(1, cfg.eval.every)

    def callback(done):
        if make_agent is None:
            return
        if done == awr.steps or (not cfg.eval.final_only and done % every == 0):
            res = _evaluate_agent(make_agent(), env, cfg, *eval_ctx, seed)
            log(f"eval_{stage}", {"step": done - 1, **_flat_metrics(res)})

    for rec in train(callback):
        log(stage, rec)


def _flat_metrics(res):
    acc = res["accuracy"]
    return {
        "success": res["success"],
        "acc_overall": acc["overall"],
        "acc_near": acc["near"],
        "acc_distant": acc["distant"],
    }


def _high_stage(cfg, env, frozen, dataset, rngs, log, eval_ctx, seed):
    n = cfg.net
    high = HighPolicy(env, cfg.policy_mode, n.rep_dim, n.policy_hidden, rngs["high"], n.layer_norm)

    @_stage("high")
    def run():
        _policy_loop(
            lambda cb: train_high(high, frozen, dataset, cfg.high, cfg.k, rngs["high"], callback=cb),
            None, "high", cfg, env, cfg.high, eval_ctx, log, seed,
        )

    run()
    return high


def _low_stage(cfg, env, high, value, low_dataset, rng, log, eval_ctx, seed, stage="low"):
    n = cfg.net
    low = LowPolicy(env, cfg.policy_mode, n.rep_dim, n.policy_hidden, rng, n.layer_norm)

    @_stage(stage)
    def run():
        _policy_loop(
            lambda cb: train_low(low, value, low_dataset, cfg.low, cfg.k, rng, repr_grad=cfg.repr_grad, callback=cb),
            lambda: HierarchicalAgent(high, low, cfg.subgoal_hold),
            stage, cfg, env, cfg.low, eval_ctx, log, seed,
        )

    run()
    return low


def _flat_stage(cfg, env, value, dataset, rng, log, eval_ctx, seed):
    flat = FlatPolicy(env, cfg.net.policy_hidden, rng, cfg.net.layer_norm)

    @_stage("flat")
    def run():
        _policy_loop(
            lambda cb: train_flat(flat, value, dataset, cfg.flat, rng, callback=cb),
            lambda: FlatAgent(flat), "flat", cfg, env, cfg.flat, eval_ctx, log, seed,
        )

    run()
    return flat


class _Logger:
    def __init__(self):
        self.records = []

    def __call__(self, stage, rec):
        self.records.append({"schema": METRICS_SCHEMA, "stage": stage, **rec})


def _write_metrics(path: Path, records):
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _persist(run_dir: Path, cfg, record: RunRecord, checkpoints: dict):
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = dataclasses.replace(cfg, seeds=(record.seed,), output_dir="")
    (run_dir / "config.txt").write_text(serialize_config(resolved))
    _write_metrics(run_dir / "metrics.jsonl", record.metrics)
    _dump_json(run_dir / "record.json", record.to_dict())
    _dump_json(run_dir / "timings.json", record.timings)
    for name, (params, header) in checkpoints.items():
        save_params(run_dir / "checkpoints" / f"{name}.zip", params, header)


def _prepare(cfg, seed):
    env = load_map(cfg.env, feature_kind=cfg.net.feature_kind)
    rngs = _streams(seed)
    try:
        full = build_dataset(cfg, env, seed)
        full.check(env)
    except Exception as exc:
        raise StageError("data", exc) from exc
    return env, rngs, full


class _timer:
    def __init__(self, sink, name):
        self.sink, self.name = sink, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.name] = self.sink.get(self.name, 0.0) + time.perf_counter() - self.t0
        return False


def _shared_stages(cfg, seed, log, timings):
    """Data, value and high-level stages, which never read action labels."""
    env, rngs, full = _prepare(cfg, seed)
    eval_ctx = _pairs(env, cfg, rngs["eval"])
    with _timer(timings, "value"):
        live, frozen, value_params = _train_value_stage(cfg, env, full, rngs["value"], log)
    value_before = params_hash(value_params)
    with _timer(timings, "high"):
        high = _high_stage(cfg, env, frozen, full, rngs, log, eval_ctx, seed)
    return env, rngs, full, eval_ctx, live, frozen, value_params, value_before, high


def _low_value(cfg, live, frozen):
    return live if cfg.repr_grad else frozen


def _finish(cfg, seed, env, full, eval_ctx, value_params, value_before, high, low, flat, log, timings, run_dir, live):
    final = {
        "hierarchical": _evaluate_agent(HierarchicalAgent(high, low, cfg.subgoal_hold), env, cfg, *eval_ctx, seed),
        "flat": _evaluate_agent(FlatAgent(flat), env, cfg, *eval_ctx, seed) if flat is not None else None,
        "labeled_fraction": cfg.labeled_fraction,
        "k": cfg.k,
        "distant_threshold": int(eval_ctx[2]),
    }
    after = params_hash(live.params if (cfg.repr_grad and live is not None) else value_params)
    if not cfg.repr_grad and after != value_before:
        raise StageError("isolation", RuntimeError("value parameters changed during policy extraction"))
    record = RunRecord(
        seed=int(seed),
        config_hash=dataclasses.replace(cfg, seeds=(seed,)).config_hash(),
        dataset_hash=full.content_hash(),
        value_hash=after,
        metrics=log.records,
        final=final,
        timings=dict(timings),
    )
    checkpoints = {
        "value": (live.params if (cfg.repr_grad and live is not None) else value_params, {"kind": "value", "representation": cfg.representation}),
        "high": (high.params, {"kind": "high", "mode": high.mode}),
        "low": (low.params, {"kind": "low", "mode": low.mode}),
    }
    if flat is not None:
        checkpoints["flat"] = (flat.params, {"kind": "flat"})
    if run_dir is not None:
        run_dir = Path(run_dir)
        _persist(run_dir, cfg, record, checkpoints)
        record.run_dir = str(run_dir)
    return record


def run_experiment(cfg: ExperimentConfig, seed: int | None = None, run_dir=None, with_flat: bool = True) -> RunRecord:
    """One seed of the full pipeline: value, high, low, flat, evaluation, persistence.

    With ``labeled_fraction < 1`` the value and high-level stages see every
    trajectory while the low-level and flat stages see only the labeled ones.
    """
    cfg = cfg.validate()
    seed = cfg.seeds[0] if seed is None else int(seed)
    if run_dir is None and cfg.output_dir:
        run_dir = Path(cfg.output_dir) / f"seed_{seed}"
    log, timings = _Logger(), {}
    env, rngs, full, eval_ctx, live, frozen, value_params, before, high = _shared_stages(cfg, seed, log, timings)
    labeled = full if cfg.labeled_fraction >= 1.0 else strip_actions(full, cfg.labeled_fraction, rngs["strip"])
    with _timer(timings, "low"):
        low = _low_stage(cfg, env, high, _low_value(cfg, live, frozen), labeled, rngs["low"], log, eval_ctx, seed)
    flat = None
    if with_flat:
        with _timer(timings, "flat"):
            flat = _flat_stage(cfg, env, frozen, labeled, rngs["flat"], log, eval_ctx, seed)
    return _finish(cfg, seed, env, full, eval_ctx, value_params, before, high, low, flat, log, timings, run_dir, live)


def run_seeds(cfg: ExperimentConfig, **kwargs) -> list[RunRecord]:
    """Independent runs merged in seed order."""
    return [run_experiment(cfg, seed=s, **kwargs) for s in cfg.seeds]


def aggregate(records, path=("hierarchical", "success")) -> dict:
    vals = []
    for r in records:
        v = r.final if isinstance(r, RunRecord) else r
        for p in path:
            v = v[p]
        vals.append(float(v))
    vals = np.array(vals)
    sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return {"mean": float(vals.mean()), "std": sd, "sem": sd / math.sqrt(len(vals)), "n": len(vals), "values": vals.tolist()}


# --- sweeps ---------------------------------------------------------------------------------


def _sweep_dir(cfg, name):
    return Path(cfg.output_dir) / name if cfg.output_dir else None


def ablate_k(cfg: ExperimentConfig, k_list, emit: bool = True) -> list[dict]:
    """Success rate against subgoal step k (one run per k per seed)."""
    k_list = [int(k) for k in k_list]
    if not k_list:
        raise ValueError("k_list must be nonempty")
    out_dir = _sweep_dir(cfg, "ablate_k")
    rows = []
    for k in k_list:
        sub = dataclasses.replace(cfg, k=k)
        recs = [
            run_experiment(sub, seed=s, run_dir=(out_dir / f"k_{k}" / f"seed_{s}") if out_dir else None, with_flat=False)
            for s in cfg.seeds
        ]
        agg = aggregate(recs)
        rows.append({"k": k, "success_mean": agg["mean"], "success_sem": agg["sem"], "success": agg["values"]})
    if emit and out_dir:
        _table_outputs(out_dir, "ablate_k", rows, "k", "success_mean", "success_sem", "subgoal steps k", "success rate")
    return rows


def ablate_repr(cfg: ExperimentConfig, modes=tuple(REPR_MODES), emit: bool = True) -> list[dict]:
    out_dir = _sweep_dir(cfg, "ablate_repr")
    rows = []
    for m in modes:
        sub = dataclasses.replace(cfg, representation=m)
        recs = [
            run_experiment(sub, seed=s, run_dir=(out_dir / m / f"seed_{s}") if out_dir else None, with_flat=False)
            for s in cfg.seeds
        ]
        agg = aggregate(recs)
        rows.append({"representation": m, "success_mean": agg["mean"], "success_sem": agg["sem"], "success": agg["values"]})
    if emit and out_dir:
        groups = {r["representation"]: {"HIQL": r["success_mean"]} for r in rows}
        plots.grouped_bars(groups, out_dir / "ablate_repr.svg", ylabel="success rate")
        _dump_json(out_dir / "ablate_repr_table.json", rows)
    return rows


def action_limited(cfg: ExperimentConfig, fractions=(1.0, 0.25), emit: bool = True) -> dict:
    """Per seed: value and high-level stages once, then one low-level policy per
    labeled fraction; the flat baseline uses full labels.

    Value and high-level training never read actions and draw from their own RNG
    streams, so sharing them across fractions yields exactly what separate runs
    would produce.
    """
    cfg = cfg.validate()
    fractions = [float(f) for f in fractions]
    out_dir = _sweep_dir(cfg, "action_limited")
    per_seed = []
    for seed in cfg.seeds:
        log, timings = _Logger(), {}
        env, rngs, full, eval_ctx, live, frozen, value_params, before, high = _shared_stages(cfg, seed, log, timings)
        row = {"seed": int(seed)}
        for frac in fractions:
            sub = dataclasses.replace(cfg, labeled_fraction=frac)
            stream = _streams(seed)
            labeled = full if frac >= 1.0 else strip_actions(full, frac, stream["strip"])
            with _timer(timings, f"low_{frac:g}"):
                low = _low_stage(
                    sub, env, high, _low_value(sub, live, frozen), labeled, stream["low"], log, eval_ctx, seed,
                    stage=f"low_{frac:g}",
                )
            res = _evaluate_agent(HierarchicalAgent(high, low, cfg.subgoal_hold), env, cfg, *eval_ctx, seed)
            row[f"hiql_{frac:g}"] = res["success"]
            row[f"hiql_{frac:g}_acc_distant"] = res["accuracy"]["distant"]
        with _timer(timings, "flat"):
            flat = _flat_stage(cfg, env, frozen, full, _streams(seed)["flat"], log, eval_ctx, seed)
        res = _evaluate_agent(FlatAgent(flat), env, cfg, *eval_ctx, seed)
        row["flat_1"] = res["success"]
        row["flat_1_acc_distant"] = res["accuracy"]["distant"]
        per_seed.append(row)
        if out_dir:
            d = out_dir / f"seed_{seed}"
            d.mkdir(parents=True, exist_ok=True)
            _write_metrics(d / "metrics.jsonl", log.records)
            _dump_json(d / "record.json", row)
            _dump_json(d / "timings.json", timings)
    keys = [k for k in per_seed[0] if k != "seed"]
    summary = {k: aggregate(per_seed, (k,)) for k in keys}
    result = {"per_seed": per_seed, "summary": summary, "fractions": fractions}
    if emit and out_dir:
        _dump_json(out_dir / "action_limited_table.json", result)
        groups = {k: {"success": summary[k]["mean"]} for k in keys}
        plots.grouped_bars(groups, out_dir / "action_limited.svg", ylabel="success rate")
    return result


def _table_outputs(out_dir, name, rows, x, y, err, xlabel, ylabel):
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(out_dir / f"{name}_table.json", rows)
    plots.line_plot({"HIQL": ([r[x] for r in rows], [r[y] for r in rows], [r[err] for r in rows])},
                    out_dir / f"{name}.svg", xlabel, ylabel)


def emit_plots(records, out_dir) -> list[Path]:
    """Accuracy-by-distance bars and success summary for a family of run records."""
    records = list(records)
    if not records:
        raise ValueError("no run records to plot")
    family = {(r.final["k"], r.final["labeled_fraction"]) for r in records}
    if len(family) != 1:
        raise ValueError("records come from different experiment families")
    out_dir = Path(out_dir)
    groups = {}
    for bin_name in ("near", "distant", "overall"):
        groups[bin_name] = {
            m: float(np.mean([r.final[m]["accuracy"][bin_name] for r in records if r.final.get(m)]))
            for m in ("hierarchical", "flat")
            if any(r.final.get(m) for r in records)
        }
    acc = plots.grouped_bars(groups, out_dir / "accuracy_by_distance.svg")
    seeds = [r.seed for r in records]
    series = {
        m: (seeds, [r.final[m]["success"] for r in records])
        for m in ("hierarchical", "flat")
        if all(r.final.get(m) for r in records)
    }
    succ = plots.line_plot(series, out_dir / "success_by_seed.svg", "seed", "distant-goal success")
    return [acc, succ]


# --- reloading -------------------------------------------------------------------------------


def load_run(run_dir):
    """Rebuild env, frozen value and policies from a persisted run directory."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.txt")
    env = load_map(cfg.env, feature_kind=cfg.net.feature_kind)
    ck = run_dir / "checkpoints"
    vparams, _ = load_params(ck / "value.zip")
    n = cfg.net
    if cfg.value_source == "noisy_oracle":
        value = FrozenValue(vparams["table"])
    else:
        net = ValueNet(env.feature_dim, n.value_hidden, n.phi_hidden, n.rep_dim, cfg.phi_input, n.layer_norm)
        value = LearnedValue(net, vparams, env).freeze()
    rng = np.random.default_rng(0)
    high = HighPolicy(env, cfg.policy_mode, n.rep_dim, n.policy_hidden, rng, n.layer_norm)
    low = LowPolicy(env, cfg.policy_mode, n.rep_dim, n.policy_hidden, rng, n.layer_norm)
    high.params = load_params(ck / "high.zip")[0]
    low.params = load_params(ck / "low.zip")[0]
    flat = None
    if (ck / "flat.zip").exists():
        flat = FlatPolicy(env, n.policy_hidden, rng, n.layer_norm)
        flat.params = load_params(ck / "flat.zip")[0]
    return cfg, env, value, high, low, flat
