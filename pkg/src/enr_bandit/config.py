"""Experiment configuration: INI-style sections with ``key = value`` lines.

Sections: ``[experiment]``, ``[agent]``, ``[env]``, optional per-agent
blocks ``[agent.<name>]`` whose values apply only when that agent runs, and
an optional ``[grid]`` whose comma-separated values are swept as a
cartesian product. Overrides use dotted keys (``agent.prior_scale=0.5``);
an undotted key addresses the ``[experiment]`` section. Unknown sections or
keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import itertools
import os
from dataclasses import dataclass, field, fields
from importlib import resources

from .environments import GeneratorConfig, SyntheticEnvSpec


class ConfigError(ValueError):
    pass


def parse_scalar(text):
    """int, float, bool, comma-separated tuple, or the raw string."""
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    if "," in text:
        return tuple(parse_scalar(p) for p in text.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_scalar(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        if len(value) == 1:
            return format_scalar(value[0]) + ","
        return ",".join(format_scalar(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


EXPERIMENT_KEYS = {
    "name": "experiment",
    "steps": 5000,
    "train_steps": 1,
    "batch_size": 32,
    "capacity": 100_000,
    "seeds": 1,
    "timing": False,
    "window": 500,
    "eval_steps": 0,
    "eval_mode": "marginal",
    "trace": False,
}

ENV_KINDS = {
    "synthetic": {f.name for f in fields(SyntheticEnvSpec)} | {"kind"},
    "impressions": {"kind", "log", "items", "users", "eval_users", "generate",
                    *(f.name for f in fields(GeneratorConfig) if f.name != "kind"),
                    "data_seed"},
    "ratings": {"kind", "ratings", "users", "items", "eval_users", "generate", "standardize",
                *(f.name for f in fields(GeneratorConfig) if f.name != "kind"), "data_seed"},
}


@dataclass
class ExperimentConfig:
    experiment: dict = field(default_factory=lambda: dict(EXPERIMENT_KEYS))
    agent: dict = field(default_factory=dict)
    env: dict = field(default_factory=lambda: {"kind": "synthetic"})
    source: str = "<defaults>"
    per_agent: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)

    @property
    def name(self):
        return self.experiment["name"]

    @property
    def agent_name(self):
        return self.agent.get("name")

    @property
    def agent_params(self):
        params = {k: v for k, v in self.agent.items() if k != "name"}
        params.update(self.per_agent.get(self.agent_name, {}))
        return params

    @property
    def seeds(self):
        s = self.experiment["seeds"]
        if isinstance(s, int):
            if s <= 0:
                raise ConfigError("seeds must be a positive count or a list")
            return tuple(range(s))
        if isinstance(s, tuple) and s:
            return tuple(int(v) for v in s)
        raise ConfigError(f"bad seeds value {s!r}")

    def set(self, dotted, value):
        section, _, key = dotted.rpartition(".")
        section = section or "experiment"
        if isinstance(value, str):
            value = parse_scalar(value)
        if section == "experiment":
            if key not in EXPERIMENT_KEYS:
                raise ConfigError(f"unknown experiment key {key!r}")
            self.experiment[key] = value
        elif section == "agent":
            self.agent[key] = value
        elif section == "env":
            if key not in set().union(*ENV_KINDS.values()):
                raise ConfigError(f"unknown env key {key!r}")
            self.env[key] = value
        elif section.startswith("agent."):
            self.per_agent.setdefault(section[len("agent."):], {})[key] = value
        else:
            raise ConfigError(f"unknown config section {section!r}")

    def set_grid(self, dotted, values):
        if not isinstance(values, tuple):
            values = (values,)
        probe = self.copy()
        for v in values:
            probe.set(dotted, v)  # rejects unknown keys up front
        self.grid[dotted] = values

    def grid_points(self):
        """Every combination of grid values as ``(label, config)`` pairs, in
        declaration order; a config without a grid yields itself once."""
        keys = list(self.grid)
        base = self.copy()
        base.grid = {}
        if not keys:
            return [("", base)]
        points = []
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            cfg = base.copy()
            parts = []
            for k, v in zip(keys, combo):
                cfg.set(k, v)
                parts.append(format_scalar(v) if k == "agent.name" else
                             f"{k.rpartition('.')[2]}={format_scalar(v)}")
            points.append(("_".join(parts), cfg))
        return points

    def validate_env(self):
        kind = self.env.get("kind", "synthetic")
        if kind not in ENV_KINDS:
            raise ConfigError(f"unknown env kind {kind!r}; expected one of {sorted(ENV_KINDS)}")
        unknown = set(self.env) - ENV_KINDS[kind]
        if unknown:
            raise ConfigError(f"unknown env keys for kind {kind!r}: {sorted(unknown)}")

    def copy(self):
        return ExperimentConfig(dict(self.experiment), dict(self.agent), dict(self.env),
                                self.source, {k: dict(v) for k, v in self.per_agent.items()},
                                dict(self.grid))

    def to_text(self):
        lines = []
        sections = [("experiment", self.experiment), ("agent", self.agent), ("env", self.env)]
        sections += [(f"agent.{name}", vals) for name, vals in sorted(self.per_agent.items())]
        if self.grid:
            sections.append(("grid", self.grid))
        for section, values in sections:
            lines.append(f"[{section}]")
            for key in sorted(values):
                lines.append(f"{key} = {format_scalar(values[key])}")
            lines.append("")
        return "\n".join(lines)


def parse_config(text, source="<string>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = ExperimentConfig(source=source)
    for section in parser.sections():
        if section not in ("experiment", "agent", "env", "grid") and not section.startswith("agent."):
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            try:
                if section == "grid":
                    cfg.set_grid(key, parse_scalar(raw))
                else:
                    cfg.set(f"{section}.{key}", raw)
            except ConfigError as exc:
                raise ConfigError(f"{source}: [{section}] {exc}") from None
    cfg.validate_env()
    return cfg


def builtin_configs():
    root = resources.files("enr_bandit") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def load_config(name_or_path, overrides=()):
    """Load a config file (or a bundled config by name) and apply overrides.

    Overriding a key that is also a grid axis removes that axis.
    """
    if os.path.exists(name_or_path):
        with open(name_or_path, encoding="utf-8") as fh:
            cfg = parse_config(fh.read(), name_or_path)
    else:
        res = resources.files("enr_bandit") / "configs" / f"{name_or_path}.ini"
        if not res.is_file():
            raise ConfigError(f"no config file or bundled config named {name_or_path!r}; "
                              f"bundled: {', '.join(builtin_configs())}")
        cfg = parse_config(res.read_text(encoding="utf-8"), name_or_path)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        key = key.strip()
        cfg.set(key, value)
        # an explicit override pins a gridded key
        cfg.grid.pop(key if "." in key else f"experiment.{key}", None)
        cfg.grid.pop(key, None)
    cfg.validate_env()
    return cfg
