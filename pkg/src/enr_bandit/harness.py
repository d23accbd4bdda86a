"""Online interaction loop, replay buffer, metrics and timing probes."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .environments import UnsupportedMetric


class ReplayBuffer:
    """Bounded FIFO of (context, action, reward) transitions stored in ring arrays."""

    def __init__(self, capacity, context_dim, action_dim):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.contexts = np.zeros((capacity, context_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.size = 0
        self._next = 0
        self.total_added = 0

    def __len__(self):
        return self.size

    def add(self, context, action, reward):
        i = self._next
        self.contexts[i] = context
        self.actions[i] = action
        self.rewards[i] = reward
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def oldest_first(self):
        """Indices of the stored transitions from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.size) + self._next) % self.capacity

    def sample(self, batch_size, rng):
        """Uniform draw with replacement over the current contents."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(self.size, size=batch_size)
        return self.contexts[idx], self.actions[idx], self.rewards[idx]


@dataclass
class RunMetrics:
    rewards: np.ndarray
    actions: np.ndarray
    optimal_rewards: np.ndarray | None = None
    expected_rewards: np.ndarray | None = None
    optimal_expected_rewards: np.ndarray | None = None
    infer_seconds: np.ndarray | None = None
    train_seconds: np.ndarray | None = None
    seed: int | None = None

    @property
    def steps(self):
        return len(self.rewards)

    @property
    def has_regret(self):
        return self.optimal_rewards is not None

    def average_reward(self):
        return float(np.mean(self.rewards))

    def cumulative_average(self):
        return np.cumsum(self.rewards) / np.arange(1, self.steps + 1)

    def windowed_average(self, window):
        window = min(window, self.steps)
        c = np.concatenate([[0.0], np.cumsum(self.rewards)])
        out = np.empty(self.steps)
        for t in range(self.steps):
            lo = max(0, t + 1 - window)
            out[t] = (c[t + 1] - c[lo]) / (t + 1 - lo)
        return out

    def final_windowed_average(self, window):
        return float(np.mean(self.rewards[-window:]))

    def regret(self, expected=False):
        if not self.has_regret:
            raise UnsupportedMetric("regret is undefined for replay environments")
        if expected:
            return float(np.mean(self.optimal_expected_rewards - self.expected_rewards))
        return float(np.mean(self.optimal_rewards - self.rewards))

    def regret_trace(self):
        if not self.has_regret:
            raise UnsupportedMetric("regret is undefined for replay environments")
        return self.optimal_rewards - self.rewards

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "action", "reward", "cum_avg_reward", "regret", "expected_regret",
                    "infer_s", "train_s"])
        cum = self.cumulative_average()
        for t in range(self.steps):
            reg = exp_reg = inf = tr = ""
            if self.has_regret:
                reg = repr(float(self.optimal_rewards[t] - self.rewards[t]))
                exp_reg = repr(float(self.optimal_expected_rewards[t] - self.expected_rewards[t]))
            if self.infer_seconds is not None:
                inf = f"{self.infer_seconds[t]:.6g}"
                tr = f"{self.train_seconds[t]:.6g}"
            w.writerow([t + 1, int(self.actions[t]), repr(float(self.rewards[t])),
                        repr(float(cum[t])), reg, exp_reg, inf, tr])
        return buf.getvalue()

    def to_jsonl(self):
        lines = []
        for t in range(self.steps):
            rec = {"step": t + 1, "action": int(self.actions[t]), "reward": float(self.rewards[t])}
            if self.has_regret:
                rec["optimal_reward"] = float(self.optimal_rewards[t])
                rec["expected_reward"] = float(self.expected_rewards[t])
                rec["optimal_expected_reward"] = float(self.optimal_expected_rewards[t])
            lines.append(json.dumps(rec))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.DictReader(io.StringIO(text)))
        rewards = np.array([float(r["reward"]) for r in rows])
        actions = np.array([int(r["action"]) for r in rows])
        m = cls(rewards=rewards, actions=actions)
        if rows and rows[0]["regret"] != "":
            m.optimal_rewards = rewards + np.array([float(r["regret"]) for r in rows])
            m.expected_rewards = np.zeros(len(rows))
            m.optimal_expected_rewards = np.array([float(r["expected_regret"]) for r in rows])
        return m


def derive_rngs(seed):
    """Independent generators for env, agent init, action selection, training and buffer."""
    ss = np.random.SeedSequence(seed)
    env_ss, agent_ss, select_ss, train_ss, buffer_ss = ss.spawn(5)
    return {
        "env": int(env_ss.generate_state(1)[0]),
        "agent": int(agent_ss.generate_state(1)[0]),
        "select": np.random.default_rng(select_ss),
        "train": np.random.default_rng(train_ss),
        "buffer": np.random.default_rng(buffer_ss),
    }


def run_episode(agent, env, steps, seed=0, train_steps=1, batch_size=32, capacity=100_000,
                timing=False, rngs=None):
    """Interact for ``steps`` decisions.

    Each step stores the previous transition, asks the agent for an action,
    collects the reward and then runs ``train_steps`` optimizer steps on
    replay batches. Training waits until the buffer holds a transition.
    """
    if steps <= 0 or train_steps < 0 or batch_size <= 0:
        raise ValueError("steps and batch_size must be positive, train_steps non-negative")
    rngs = rngs or derive_rngs(seed)
    context, actions = env.reset()
    buffer = ReplayBuffer(capacity, len(context), np.shape(actions)[1])
    rewards = np.zeros(steps)
    chosen = np.zeros(steps, dtype=np.int64)
    synthetic = hasattr(env, "probabilities")
    opt = np.zeros(steps) if synthetic else None
    exp = np.zeros(steps) if synthetic else None
    opt_exp = np.zeros(steps) if synthetic else None
    infer_s = np.zeros(steps) if timing else None
    train_s = np.zeros(steps) if timing else None
    pending = None
    clock = time.perf_counter
    for t in range(steps):
        if pending is not None:
            buffer.add(*pending)
        t0 = clock() if timing else 0.0
        index = agent.select(context, actions, rngs["select"])
        if timing:
            infer_s[t] = (clock() - t0) / len(actions)
        action = np.asarray(actions[index])
        out = env.step(index)
        rewards[t] = out.reward
        chosen[t] = index
        if synthetic:
            opt[t] = out.optimal_reward
            exp[t] = out.expected_reward
            opt_exp[t] = out.optimal_expected_reward
        agent.observe(context, action, index, out.reward)
        pending = (context, action, out.reward)
        t0 = clock() if timing else 0.0
        if agent.trains and len(buffer) > 0:
            for _ in range(train_steps):
                batch = buffer.sample(batch_size, rngs["buffer"])
                agent.train(*batch, rngs["train"])
        if timing:
            train_s[t] = clock() - t0
        context, actions = out.context, out.actions
    return RunMetrics(rewards, chosen, opt, exp, opt_exp, infer_s, train_s, seed)


def mean_stderr(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values")
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd / np.sqrt(v.size), sd


def aggregate(runs, window=None):
    """Mean, standard error and standard deviation of each scalar metric across runs."""
    runs = list(runs)
    if not runs:
        raise ValueError("no runs to aggregate")
    if len({r.steps for r in runs}) != 1:
        raise ValueError("runs have different lengths")
    metrics = {"avg_reward": [r.average_reward() for r in runs]}
    if window:
        metrics["final_window_reward"] = [r.final_windowed_average(window) for r in runs]
    if all(r.has_regret for r in runs):
        metrics["avg_regret"] = [r.regret() for r in runs]
        metrics["avg_expected_regret"] = [r.regret(expected=True) for r in runs]
    summary = {}
    for name, vals in metrics.items():
        m, se, sd = mean_stderr(vals)
        summary[name] = {"mean": m, "stderr": se, "std": sd, "n": len(vals)}
    return summary


def summary_rows(named_summaries):
    """Flatten ``{label: aggregate(...)}`` into CSV-ready rows."""
    rows = []
    for label, summ in named_summaries.items():
        for metric, s in summ.items():
            rows.append({"label": label, "metric": metric, "mean": s["mean"],
                         "stderr": s["stderr"], "std": s["std"], "n": s["n"]})
    return rows


def summary_csv(named_summaries):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["# spread columns: stderr = std(ddof=1)/sqrt(n); std = std(ddof=1)"])
    w.writerow(["label", "metric", "mean", "stderr", "std", "n"])
    for r in summary_rows(named_summaries):
        w.writerow([r["label"], r["metric"], repr(r["mean"]), repr(r["stderr"]),
                    repr(r["std"]), r["n"]])
    return buf.getvalue()


def summary_table(named_summaries, metric):
    """Aligned plain-text table of ``mean +- stderr`` for one metric."""
    rows = [(label, s[metric]) for label, s in named_summaries.items() if metric in s]
    if not rows:
        return ""
    w = max(len("label"), *(len(lbl) for lbl, _ in rows))
    lines = [f"{'label':<{w}}  {metric:>12}  {'stderr':>10}  {'n':>4}"]
    for label, s in rows:
        lines.append(f"{label:<{w}}  {s['mean']:>12.5f}  {s['stderr']:>10.5f}  {s['n']:>4d}")
    return "\n".join(lines) + "\n"


def time_probe(agent, context, actions, batch, repetitions=30, warmup=5, rng=None):
    """Median seconds per candidate for one decision, and per training batch.

    ``batch`` is ``(contexts, actions, rewards)``. Uses the monotonic
    performance counter; warm-up calls are discarded.
    """
    rng = rng or np.random.default_rng(0)
    clock = time.perf_counter
    infer, train = [], []
    for i in range(warmup + repetitions):
        t0 = clock()
        agent.select(context, actions, rng)
        dt = clock() - t0
        if i >= warmup:
            infer.append(dt / len(actions))
    if agent.trains:
        snapshot = _snapshot(agent)
        for i in range(warmup + repetitions):
            t0 = clock()
            agent.train(*batch, rng)
            dt = clock() - t0
            if i >= warmup:
                train.append(dt)
        _restore(agent, snapshot)
    return float(np.median(infer)), (float(np.median(train)) if train else 0.0)


def _param_sets(agent):
    if hasattr(agent, "network"):
        return [agent.network.params]
    if hasattr(agent, "members"):
        return [m.params for m in agent.members]
    return []


def _snapshot(agent):
    return [p.flat.copy() for p in _param_sets(agent)]


def _restore(agent, snapshot):
    for p, flat in zip(_param_sets(agent), snapshot):
        p.flat[:] = flat


def evaluate(agent, env, steps, seed=0, mode="marginal", train_users=None):
    """Average reward of a frozen agent on a held-out environment.

    ``mode="marginal"`` acts greedily on point predictions (the zero index
    for epistemic networks); ``mode="sampled"`` uses the agent's own
    exploratory rule. No observation or training happens.
    """
    if mode not in ("marginal", "sampled"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if train_users is not None and hasattr(env, "users"):
        overlap = set(train_users) & set(env.users)
        if overlap:
            raise ValueError(f"evaluation users overlap the training users ({len(overlap)} shared)")
    rng = np.random.default_rng(seed)
    context, actions = env.reset()
    total = 0.0
    for _ in range(steps):
        if mode == "marginal":
            index = agent.greedy(context, actions)
        else:
            index = agent.select(context, actions, rng)
        out = env.step(index)
        total += out.reward
        context, actions = out.context, out.actions
    return total / steps


def interactions_to_reach(metrics_list, target, window):
    """First step at which the seed-averaged windowed reward reaches ``target``
    (``None`` if never)."""
    curves = np.mean([m.windowed_average(window) for m in metrics_list], axis=0)
    hits = np.flatnonzero(curves[window - 1:] >= target)
    return None if hits.size == 0 else int(hits[0] + window)


@dataclass
class RunConfig:
    agent: str
    agent_params: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)
    steps: int = 5000
    train_steps: int = 1
    batch_size: int = 32
    capacity: int = 100_000
    seeds: tuple = (0,)
    timing: bool = False
    window: int = 500

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.capacity <= 0:
            raise ValueError("steps, batch_size and capacity must be positive")
        if self.train_steps < 0:
            raise ValueError("train_steps must be non-negative")
        if len(self.seeds) == 0:
            raise ValueError("at least one seed is required")
