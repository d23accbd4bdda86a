"""Config-driven experiment orchestration shared by the CLI, demos and tests.

Artifacts are laid out as ``<out>/<experiment>/<label>/<seed>/metrics.csv``
where ``label`` is the agent name, suffixed with the grid point for sweeps.
Each label directory carries ``config.ini``, the effective configuration,
from which the runs can be reproduced exactly.
"""

from __future__ import annotations

import functools
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import harness
from .agent import make_agent
from .config import ConfigError, parse_config
from .environments import (
    GeneratorConfig,
    ImpressionReplayEnv,
    RatingReplayEnv,
    SyntheticEnv,
    SyntheticEnvSpec,
    generate_impression_log,
    generate_rating_matrix,
    load_impression_log,
    load_rating_matrix,
    split_users,
)

_GEN_KEYS = set(GeneratorConfig.__dataclass_fields__) - {"kind"}


@functools.lru_cache(maxsize=4)
def _generated(kind, items, data_seed):
    cfg = GeneratorConfig(kind=kind, **dict(items))
    if kind == "impressions":
        return generate_impression_log(cfg, data_seed)[0]
    return generate_rating_matrix(cfg, data_seed)[0]


def _dataset(env_cfg):
    kind = env_cfg["kind"]
    data_seed = int(env_cfg.get("data_seed", 0))
    if env_cfg.get("generate"):
        items = tuple(sorted((k, v) for k, v in env_cfg.items() if k in _GEN_KEYS))
        return _generated(kind, items, data_seed)
    if kind == "impressions":
        if "log" not in env_cfg or "items" not in env_cfg:
            raise ConfigError("impressions env needs env.log and env.items (or env.generate = true)")
        return load_impression_log(env_cfg["log"], env_cfg["items"], env_cfg.get("users"))
    for key in ("ratings", "users", "items"):
        if key not in env_cfg:
            raise ConfigError(f"ratings env needs env.{key} (or env.generate = true)")
    return load_rating_matrix(env_cfg["ratings"], env_cfg["users"], env_cfg["items"])


def build_env(env_cfg, seed):
    """Returns ``(train_env, eval_env_or_None, train_users)``."""
    kind = env_cfg.get("kind", "synthetic")
    if kind == "synthetic":
        spec = SyntheticEnvSpec(**{k: v for k, v in env_cfg.items() if k != "kind"})
        return SyntheticEnv(spec, seed=seed), None, None
    data = _dataset(env_cfg)
    n_eval = int(env_cfg.get("eval_users", 0))
    data_seed = int(env_cfg.get("data_seed", 0))
    if kind == "impressions":
        users = data.users
        if n_eval:
            train, held = split_users(users, n_eval, data_seed)
            return (ImpressionReplayEnv(data, train, seed),
                    ImpressionReplayEnv(data, held, seed + 1), train)
        return ImpressionReplayEnv(data, None, seed), None, None
    rows = np.arange(len(data.user_ids))
    standardize = bool(env_cfg.get("standardize", False))
    if n_eval:
        train, held = split_users([str(r) for r in rows], n_eval, data_seed)
        train_rows, held_rows = [int(r) for r in train], [int(r) for r in held]
        return (RatingReplayEnv(data, train_rows, seed, standardize),
                RatingReplayEnv(data, held_rows, seed + 1, standardize), None)
    return RatingReplayEnv(data, None, seed, standardize), None, None


def run_one(cfg, seed):
    """One seed of one configuration; returns ``(RunMetrics, extras)``."""
    if not cfg.agent_name:
        raise ConfigError("no agent selected (set agent.name)")
    ex = cfg.experiment
    rngs = harness.derive_rngs(seed)
    env, eval_env, train_users = build_env(cfg.env, rngs["env"])
    agent = make_agent(cfg.agent_name, env.context_dim, env.action_dim,
                       n_actions=env.n_actions, seed=rngs["agent"], **cfg.agent_params)
    metrics = harness.run_episode(agent, env, ex["steps"], seed=seed, train_steps=ex["train_steps"],
                                  batch_size=ex["batch_size"], capacity=ex["capacity"],
                                  timing=ex["timing"], rngs=rngs)
    extras = {}
    if ex["eval_steps"] and eval_env is not None:
        extras["eval_reward"] = harness.evaluate(agent, eval_env, ex["eval_steps"], seed=seed,
                                                 mode=ex["eval_mode"], train_users=train_users)
    return metrics, extras


def _run_task(args):
    text, seed = args
    return run_one(parse_config(text), seed)


def run_config(cfg, workers=1):
    """Run every seed of one configuration; returns ``{seed: (metrics, extras)}``."""
    seeds = cfg.seeds
    if workers > 1 and len(seeds) > 1:
        # configs travel as text so workers rebuild everything from the echo
        text = cfg.to_text()
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            results = list(pool.map(_run_task, [(text, s) for s in seeds]))
    else:
        results = [run_one(cfg, s) for s in seeds]
    return dict(zip(seeds, results))


def summarize(results, window):
    runs = [m for m, _ in results.values()]
    summ = harness.aggregate(runs, window=min(window, runs[0].steps))
    names = sorted({k for _, extra in results.values() for k in extra})
    for name in names:
        m, se, sd = harness.mean_stderr([extra[name] for _, extra in results.values()])
        summ[name] = {"mean": m, "stderr": se, "std": sd, "n": len(results)}
    return summ


def write_runs(out_dir, label, cfg, results):
    base = os.path.join(out_dir, label)
    os.makedirs(base, exist_ok=True)
    with open(os.path.join(base, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    for seed, (metrics, extras) in results.items():
        d = os.path.join(base, str(seed))
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, "metrics.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(metrics.to_csv())
        if cfg.experiment.get("trace"):
            with open(os.path.join(d, "trace.jsonl"), "w", encoding="utf-8") as fh:
                fh.write(metrics.to_jsonl())
        if extras:
            with open(os.path.join(d, "extras.csv"), "w", encoding="utf-8", newline="") as fh:
                fh.write("metric,value\n")
                for k in sorted(extras):
                    fh.write(f"{k},{extras[k]!r}\n")


def primary_metric(summary):
    """Regret (lower is better) when defined, otherwise average reward."""
    if "avg_regret" in summary:
        return "avg_regret", False
    return "avg_reward", True


def write_summary(out_dir, summaries):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(harness.summary_csv(summaries))
    first = next(iter(summaries.values()))
    metric, higher = primary_metric(first)
    ranked = dict(sorted(summaries.items(),
                         key=lambda kv: kv[1][metric]["mean"] * (-1 if higher else 1)))
    text = harness.summary_table(ranked, metric)
    for extra in ("final_window_reward", "eval_reward"):
        if extra in first and extra != metric:
            text += "\n" + harness.summary_table(ranked, extra)
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    return text


def run_experiment(cfg, out=None, workers=1, log=None):
    """Run every grid point (or the single configuration) and aggregate.

    Returns ``{label: (summary, results)}``. With ``out`` set, writes all
    artifacts under ``out/<experiment>/``.
    """
    summaries, everything = {}, {}
    for point, pcfg in cfg.grid_points():
        if not point:
            label = pcfg.agent_name
        elif "agent.name" in cfg.grid:
            label = point
        else:
            label = f"{pcfg.agent_name}@{point}"
        if log:
            log(f"running {label} on seeds {list(pcfg.seeds)}")
        results = run_config(pcfg, workers)
        summ = summarize(results, pcfg.experiment["window"])
        summaries[label] = summ
        everything[label] = (summ, results)
        if out:
            write_runs(os.path.join(out, cfg.name), label, pcfg, results)
    if out:
        write_summary(os.path.join(out, cfg.name), summaries)
    return everything


def load_results(exp_dir):
    """Read back ``{label: {seed: RunMetrics}}`` from an experiment directory."""
    found = {}
    if not os.path.isdir(exp_dir):
        raise FileNotFoundError(f"no experiment directory {exp_dir!r}")
    for label in sorted(os.listdir(exp_dir)):
        ldir = os.path.join(exp_dir, label)
        if not os.path.isdir(ldir):
            continue
        runs = {}
        for seed in sorted(os.listdir(ldir), key=lambda s: (len(s), s)):
            path = os.path.join(ldir, seed, "metrics.csv")
            if os.path.isfile(path):
                with open(path, encoding="utf-8") as fh:
                    runs[seed] = harness.RunMetrics.from_csv(fh.read())
        if runs:
            found[label] = runs
    if not found:
        raise FileNotFoundError(f"no metrics.csv files under {exp_dir!r}")
    return found
