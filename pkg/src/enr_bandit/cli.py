"""Command-line entry point: ``enr-bandit {run,sweep,bench,gen-data,report}``.

Exit codes: 0 success, 1 invalid input (config, flags, data files),
2 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys

import numpy as np

from . import experiment, harness
from .agent import make_agent, registered_agents
from .config import ConfigError, ExperimentConfig, builtin_configs, load_config, parse_scalar
from .environments import DataFormatError, GeneratorConfig, read_generator_config, write_generated


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg):
    print(msg, file=sys.stderr)


def _load(args):
    cfg = load_config(args.config, args.set or ())
    return cfg


def cmd_run(args):
    cfg = _load(args)
    cfg.grid = {}
    return _execute(cfg, args)


def cmd_sweep(args):
    cfg = _load(args)
    for item in args.grid or ():
        key, sep, values = item.partition("=")
        if not sep:
            raise ConfigError(f"grid entry {item!r} is not key=v1,v2,...")
        cfg.set_grid(key.strip(), parse_scalar(values))
    return _execute(cfg, args)


def _execute(cfg, args):
    experiment.run_experiment(cfg, out=args.out, workers=args.workers, log=_log)
    exp_dir = os.path.join(args.out, cfg.name)
    with open(os.path.join(exp_dir, "summary.txt"), encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    _log(f"artifacts written to {exp_dir}")
    return 0


def bench_rows(agents, context_dim, action_dim, n_actions, batch_size, repetitions, per_agent=None,
               seed=0):
    """Median per-candidate inference and per-batch training seconds for each agent."""
    rng = np.random.default_rng(seed)
    context = rng.standard_normal(context_dim)
    actions = rng.standard_normal((n_actions, action_dim))
    batch = (rng.standard_normal((batch_size, context_dim)),
             rng.standard_normal((batch_size, action_dim)),
             (rng.random(batch_size) < 0.5).astype(float))
    rows = []
    for name in agents:
        params = (per_agent or {}).get(name, {})
        agent = make_agent(name, context_dim, action_dim, n_actions=n_actions, seed=seed, **params)
        infer, train = harness.time_probe(agent, context, actions, batch, repetitions=repetitions,
                                          rng=np.random.default_rng(seed))
        rows.append({"agent": name, "n_actions": n_actions, "infer_s_per_action": infer,
                     "train_s_per_batch": train})
    return rows


def cmd_bench(args):
    cfg = load_config(args.config, args.set or ()) if args.config else ExperimentConfig()
    for item in ([] if args.config else args.set or ()):
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value)
    agents = args.agents.split(",") if args.agents else registered_agents()
    unknown = set(agents) - set(registered_agents())
    if unknown:
        raise ConfigError(f"unknown agents {sorted(unknown)}; registered agents: "
                          f"{', '.join(registered_agents())}")
    env = cfg.env
    rows = bench_rows(agents, int(env.get("context_dim", 100)), int(env.get("action_dim", 100)),
                      args.actions, cfg.experiment["batch_size"], args.repetitions, cfg.per_agent)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agent", "n_actions", "infer_s_per_action", "train_s_per_batch"])
    for r in rows:
        w.writerow([r["agent"], r["n_actions"], f"{r['infer_s_per_action']:.6g}",
                    f"{r['train_s_per_batch']:.6g}"])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    width = max(len("agent"), *(len(r["agent"]) for r in rows))
    print(f"{'agent':<{width}}  {'infer s/action':>14}  {'train s/batch':>13}")
    for r in rows:
        print(f"{r['agent']:<{width}}  {r['infer_s_per_action']:>14.3e}  "
              f"{r['train_s_per_batch']:>13.3e}")
    return 0


def cmd_gen_data(args):
    if args.config:
        cfg = read_generator_config(args.config)
        values = dict(cfg.__dict__)
    else:
        values = {"kind": args.kind}
    fields = GeneratorConfig.__dataclass_fields__
    for item in args.set or ():
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in fields:
            raise ConfigError(f"unknown generator setting {item!r}; keys: {', '.join(fields)}")
        values[key] = parse_scalar(value)
    cfg = GeneratorConfig(**values)
    paths = write_generated(cfg, args.seed, args.out)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


def report_curves(results):
    """Seed-averaged cumulative reward (and regret when defined) per step."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "step", "cum_avg_reward", "cum_avg_regret"])
    for label, runs in results.items():
        runs = list(runs.values())
        reward = np.mean([r.cumulative_average() for r in runs], axis=0)
        regret = None
        if all(r.has_regret for r in runs):
            regret = np.mean([np.cumsum(r.regret_trace()) / np.arange(1, r.steps + 1)
                              for r in runs], axis=0)
        for t in range(len(reward)):
            w.writerow([label, t + 1, repr(float(reward[t])),
                        "" if regret is None else repr(float(regret[t]))])
    return buf.getvalue()


def cmd_report(args):
    results = experiment.load_results(args.experiment_dir)
    summaries = {}
    for label, runs in results.items():
        summaries[label] = harness.aggregate(runs.values(), window=args.window)
    out = args.out or args.experiment_dir
    text = experiment.write_summary(out, summaries)
    with open(os.path.join(out, "curves.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(report_curves(results))
    sys.stdout.write(text)
    return 0


def build_parser():
    p = _Parser(prog="enr-bandit", description="Neural contextual-bandit experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help=f"config file or bundled name ({', '.join(builtin_configs())})")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value (repeatable), e.g. agent.prior_scale=0.5")

    workers = os.cpu_count() or 1
    for name, helptext in (("run", "run one configuration over its seeds"),
                           ("sweep", "run every point of a hyperparameter grid")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--out", default="runs", help="output root (default: runs)")
        sp.add_argument("--workers", type=int, default=workers,
                        help=f"parallel seed workers (default: {workers})")
        if name == "sweep":
            sp.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                            help="add a grid axis (repeatable), e.g. agent.index_dim=2,5,10")

    sp = sub.add_parser("bench", help="time inference and training for each agent")
    common(sp, config_required=False)
    sp.add_argument("--agents", help="comma-separated agent names (default: all registered)")
    sp.add_argument("--actions", type=int, default=1000, help="candidates per decision")
    sp.add_argument("--repetitions", type=int, default=30)
    sp.add_argument("--out", help="directory for bench.csv")

    sp = sub.add_parser("gen-data", help="write a synthetic impression log or rating matrix")
    sp.add_argument("--config", help="generator settings file (key = value lines)")
    sp.add_argument("--kind", choices=("impressions", "ratings"), default="impressions")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("report", help="summarize stored runs of an experiment")
    sp.add_argument("experiment_dir")
    sp.add_argument("--window", type=int, default=500)
    sp.add_argument("--out", help="where to write summary/curves (default: experiment_dir)")
    return p


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "bench": cmd_bench, "gen-data": cmd_gen_data,
            "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be at least 1")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
