"""Bandit environments: the synthetic logistic bandit and two logged-data
replay environments (impression logs and dense rating matrices).

Every environment follows the same loop::

    context, actions = env.reset()
    outcome = env.step(index)     # reward + next context/candidates
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit


class UnsupportedMetric(RuntimeError):
    """Raised when a metric needs information the environment does not have."""


class DataFormatError(ValueError):
    pass


@dataclass
class StepOutcome:
    reward: float
    context: np.ndarray
    actions: np.ndarray
    optimal_reward: float | None = None
    expected_reward: float | None = None
    optimal_expected_reward: float | None = None
    item_id: str | None = None


# ----------------------------------------------------------------------------
# synthetic logistic bandit


@dataclass
class SyntheticEnvSpec:
    context_dim: int = 100
    action_dim: int = 100
    n_actions: int = 100
    fixed_actions: bool = True
    theta_scale: float = 1.0

    def __post_init__(self):
        if min(self.context_dim, self.action_dim, self.n_actions) <= 0:
            raise ValueError("dimensions and action count must be positive")


class SyntheticEnv:
    """Reward ~ Bernoulli(sigmoid(theta . concat(context, action))).

    ``theta``, contexts and action features are standard normal. One uniform
    draw per step decides the realized reward of every arm, so the realized
    optimal reward is never below the chosen arm's reward.
    """

    def __init__(self, spec=None, seed=None, theta=None):
        self.spec = spec or SyntheticEnvSpec()
        self.rng = np.random.default_rng(seed)
        d = self.spec.context_dim + self.spec.action_dim
        if theta is None:
            theta = self.rng.standard_normal(d) * self.spec.theta_scale
        self.theta = np.asarray(theta, dtype=np.float64)
        if self.theta.shape != (d,):
            raise ValueError(f"theta has shape {self.theta.shape}, expected ({d},)")
        self.fixed = (self.rng.standard_normal((self.spec.n_actions, self.spec.action_dim))
                      if self.spec.fixed_actions else None)
        self.context = None
        self.actions = None
        self.t = 0

    @property
    def context_dim(self):
        return self.spec.context_dim

    @property
    def action_dim(self):
        return self.spec.action_dim

    @property
    def n_actions(self):
        return self.spec.n_actions

    def _draw(self):
        self.context = self.rng.standard_normal(self.spec.context_dim)
        if self.fixed is not None:
            self.actions = self.fixed
        else:
            self.actions = self.rng.standard_normal((self.spec.n_actions, self.spec.action_dim))
        return self.context, self.actions

    def reset(self):
        self.t = 0
        return self._draw()

    def probabilities(self, context=None, actions=None):
        context = self.context if context is None else context
        actions = self.actions if actions is None else actions
        dS = self.spec.context_dim
        return expit(context @ self.theta[:dS] + actions @ self.theta[dS:])

    def step(self, index):
        if self.context is None:
            raise RuntimeError("call reset() first")
        if not 0 <= index < len(self.actions):
            raise IndexError(f"action index {index} out of range [0, {len(self.actions)})")
        p = self.probabilities()
        u = self.rng.random()
        p_best = float(p.max())
        outcome = StepOutcome(
            reward=float(u < p[index]),
            optimal_reward=float(u < p_best),
            expected_reward=float(p[index]),
            optimal_expected_reward=p_best,
            context=None, actions=None,
        )
        self.t += 1
        outcome.context, outcome.actions = self._draw()
        return outcome


def regret(trace, expected=False):
    """Average per-step shortfall against the optimal action.

    ``trace`` is a sequence of :class:`StepOutcome` or a mapping with
    ``reward``/``optimal_reward`` arrays. ``expected=True`` uses success
    probabilities instead of realized rewards.
    """
    if isinstance(trace, dict):
        got = np.asarray(trace["expected_reward" if expected else "reward"], dtype=float)
        best = trace.get("optimal_expected_reward" if expected else "optimal_reward")
        if best is None:
            raise UnsupportedMetric("regret needs the optimal reward, which this environment lacks")
        best = np.asarray(best, dtype=float)
    else:
        trace = list(trace)
        key, okey = (("expected_reward", "optimal_expected_reward") if expected
                     else ("reward", "optimal_reward"))
        if any(getattr(o, okey) is None for o in trace):
            raise UnsupportedMetric("regret needs the optimal reward, which this environment lacks")
        got = np.array([getattr(o, key) for o in trace], dtype=float)
        best = np.array([getattr(o, okey) for o in trace], dtype=float)
    if got.size == 0:
        raise ValueError("empty trace")
    return float(np.mean(best - got))


# ----------------------------------------------------------------------------
# impression logs


@dataclass
class Impression:
    impression_id: str
    user_id: str
    time: str
    history: tuple
    candidates: tuple
    labels: np.ndarray


@dataclass
class ImpressionLog:
    impressions: list
    item_features: dict
    user_features: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.impressions)

    @property
    def feature_dim(self):
        return len(next(iter(self.item_features.values()))) if self.item_features else 0

    @property
    def users(self):
        return sorted({imp.user_id for imp in self.impressions})

    def mean_label_rate(self):
        labels = [imp.labels for imp in self.impressions]
        return float(np.concatenate(labels).mean()) if labels else float("nan")

    def user_context(self, imp):
        """Mean-pooled history item features (zeros for an empty history),
        followed by the user's own features when a user table is present."""
        d = self.feature_dim
        if imp.history:
            pooled = np.mean([self.item_features[h] for h in imp.history], axis=0)
        else:
            pooled = np.zeros(d)
        if self.user_features:
            return np.concatenate([pooled, self.user_features[imp.user_id]])
        return pooled

    def candidate_features(self, imp):
        return np.array([self.item_features[c] for c in imp.candidates])

    def validate(self):
        for imp in self.impressions:
            if len(imp.candidates) < 2:
                raise DataFormatError(f"impression {imp.impression_id} has fewer than 2 candidates")
            for item in (*imp.history, *imp.candidates):
                if item not in self.item_features:
                    raise DataFormatError(f"item {item!r} has no features")
            if self.user_features and imp.user_id not in self.user_features:
                raise DataFormatError(f"user {imp.user_id!r} has no features")
        return self


def read_feature_table(path):
    """CSV of ``id,f1,f2,...``; a non-numeric first row is treated as a header."""
    table = {}
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                vec = np.array([float(v) for v in row[1:]])
            except ValueError:
                if lineno == 1:
                    continue
                raise DataFormatError(f"{path}:{lineno}: non-numeric feature value") from None
            if width is None:
                width = len(vec)
            elif len(vec) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} features, got {len(vec)}")
            if not np.all(np.isfinite(vec)):
                raise DataFormatError(f"{path}:{lineno}: non-finite feature value")
            table[row[0]] = vec
    return table


def write_feature_table(path, table):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        width = len(next(iter(table.values()))) if table else 0
        w.writerow(["id", *[f"f{i}" for i in range(width)]])
        for key, vec in table.items():
            w.writerow([key, *[repr(float(v)) for v in vec]])


def parse_impression_line(line, lineno=0):
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise DataFormatError(f"line {lineno}: expected 5 tab-separated columns, got {len(parts)}")
    imp_id, user, time, history, cands = parts
    items, labels = [], []
    for tok in cands.split():
        item, sep, label = tok.rpartition("-")
        if not sep or not item:
            raise DataFormatError(f"line {lineno}: malformed candidate {tok!r}")
        if label not in ("0", "1"):
            raise DataFormatError(f"line {lineno}: label {label!r} of {item!r} not in {{0, 1}}")
        items.append(item)
        labels.append(int(label))
    if not items:
        raise DataFormatError(f"line {lineno}: no candidates")
    return Impression(imp_id, user, time, tuple(history.split()), tuple(items),
                      np.array(labels, dtype=np.float64))


def load_impression_log(path, item_features_path, user_features_path=None):
    """Read a tab-separated impression log plus its feature tables."""
    impressions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            impressions.append(parse_impression_line(line, lineno))
    items = read_feature_table(item_features_path) if item_features_path else {}
    users = read_feature_table(user_features_path) if user_features_path else {}
    return ImpressionLog(impressions, items, users).validate()


def write_impression_log(log, path):
    with open(path, "w", encoding="utf-8") as fh:
        for imp in log.impressions:
            cands = " ".join(f"{c}-{int(l)}" for c, l in zip(imp.candidates, imp.labels))
            fh.write("\t".join([imp.impression_id, imp.user_id, imp.time,
                                " ".join(imp.history), cands]) + "\n")


def split_users(users, n_eval, seed):
    """Disjoint (train, eval) user lists."""
    users = sorted(users)
    if n_eval >= len(users):
        raise ValueError("evaluation split would leave no training users")
    rng = np.random.default_rng(seed)
    held = set(rng.choice(len(users), size=n_eval, replace=False).tolist())
    train = [u for i, u in enumerate(users) if i not in held]
    evals = [u for i, u in enumerate(users) if i in held]
    return train, evals


class ImpressionReplayEnv:
    """Replays logged impressions sampled uniformly with replacement.

    The reward for a choice is the logged label of that candidate, so no
    reward is ever fabricated.
    """

    def __init__(self, log, users=None, seed=None):
        self.log = log
        allowed = None if users is None else set(users)
        self.pool = [imp for imp in log.impressions
                     if allowed is None or imp.user_id in allowed]
        if not self.pool:
            raise ValueError("no impressions for the selected users")
        self.users = sorted({imp.user_id for imp in self.pool})
        self.rng = np.random.default_rng(seed)
        self.current = None
        dims = log.user_context(self.pool[0]).shape[0], log.feature_dim
        self.context_dim, self.action_dim = dims
        self.n_actions = None

    def _draw(self):
        self.current = self.pool[int(self.rng.integers(len(self.pool)))]
        return self.log.user_context(self.current), self.log.candidate_features(self.current)

    def reset(self):
        return self._draw()

    def step(self, index):
        imp = self.current
        if not 0 <= index < len(imp.candidates):
            raise IndexError(f"candidate index {index} out of range [0, {len(imp.candidates)})")
        reward = float(imp.labels[index])
        item = imp.candidates[index]
        context, actions = self._draw()
        return StepOutcome(reward=reward, context=context, actions=actions, item_id=item)


# ----------------------------------------------------------------------------
# rating matrices


@dataclass
class RatingMatrix:
    user_ids: list
    item_ids: list
    ratings: np.ndarray            # NaN marks a missing cell
    user_features: np.ndarray
    item_features: np.ndarray

    def __post_init__(self):
        n_u, n_i = len(self.user_ids), len(self.item_ids)
        if self.ratings.shape != (n_u, n_i):
            raise DataFormatError("rating matrix shape does not match id lists")
        if len(self.user_features) != n_u or len(self.item_features) != n_i:
            raise DataFormatError("feature tables do not match id lists")

    @property
    def density(self):
        return float(np.isfinite(self.ratings).mean())

    def present(self, user_row):
        return np.flatnonzero(np.isfinite(self.ratings[user_row]))


def load_rating_matrix(ratings_path, user_features_path, item_features_path):
    """Read ``user_id,item_id,rating`` triples plus both feature tables."""
    users = read_feature_table(user_features_path)
    items = read_feature_table(item_features_path)
    uid = {u: i for i, u in enumerate(users)}
    iid = {it: i for i, it in enumerate(items)}
    ratings = np.full((len(users), len(items)), np.nan)
    with open(ratings_path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"{ratings_path}:{lineno}: expected 3 columns")
            try:
                value = float(row[2])
            except ValueError:
                if lineno == 1:
                    continue
                raise DataFormatError(f"{ratings_path}:{lineno}: non-numeric rating") from None
            if row[0] not in uid or row[1] not in iid:
                raise DataFormatError(f"{ratings_path}:{lineno}: unknown user or item id")
            ratings[uid[row[0]], iid[row[1]]] = value
    return RatingMatrix(list(users), list(items), ratings,
                        np.array(list(users.values())), np.array(list(items.values())))


def write_rating_matrix(matrix, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "ratings.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "rating"])
        for u, i in zip(*np.nonzero(np.isfinite(matrix.ratings))):
            w.writerow([matrix.user_ids[u], matrix.item_ids[i], repr(float(matrix.ratings[u, i]))])
    write_feature_table(os.path.join(directory, "users.csv"),
                        dict(zip(matrix.user_ids, matrix.user_features)))
    write_feature_table(os.path.join(directory, "items.csv"),
                        dict(zip(matrix.item_ids, matrix.item_features)))


class RatingReplayEnv:
    """Samples a user per step; every item with a present rating is a candidate."""

    def __init__(self, matrix, user_rows=None, seed=None, standardize=False):
        self.matrix = matrix
        self.rows = np.arange(len(matrix.user_ids)) if user_rows is None else np.asarray(user_rows)
        self.rows = np.array([r for r in self.rows if matrix.present(r).size > 0])
        if self.rows.size == 0:
            raise ValueError("no user has any rated item")
        self.rng = np.random.default_rng(seed)
        self.standardize = standardize
        vals = matrix.ratings[np.isfinite(matrix.ratings)]
        self._mu, self._sd = float(vals.mean()), float(vals.std() or 1.0)
        self.context_dim = matrix.user_features.shape[1]
        self.action_dim = matrix.item_features.shape[1]
        self.n_actions = None
        self.user = None
        self.items = None

    def _draw(self):
        self.user = int(self.rows[self.rng.integers(len(self.rows))])
        self.items = self.matrix.present(self.user)
        return self.matrix.user_features[self.user], self.matrix.item_features[self.items]

    def reset(self):
        return self._draw()

    def step(self, index):
        if not 0 <= index < len(self.items):
            raise IndexError(f"candidate index {index} out of range [0, {len(self.items)})")
        value = self.matrix.ratings[self.user, self.items[index]]
        if not np.isfinite(value):
            raise RuntimeError("chose an item without a rating")
        reward = (value - self._mu) / self._sd if self.standardize else float(value)
        item = self.matrix.item_ids[self.items[index]]
        context, actions = self._draw()
        return StepOutcome(reward=float(reward), context=context, actions=actions, item_id=item)


# ----------------------------------------------------------------------------
# synthetic logged data


@dataclass
class GeneratorConfig:
    kind: str = "impressions"          # or "ratings"
    n_users: int = 5000
    n_items: int = 2000
    feature_dim: int = 16
    latent_dim: int = 8
    candidates: int = 10
    impressions_per_user: int = 2
    history_length: int = 5
    base_ctr: float = 0.1
    preference_scale: float = 2.0
    rating_noise: float = 0.5
    density: float = 1.0

    def __post_init__(self):
        if self.n_users <= 0 or self.n_items <= 0:
            raise ValueError("generator needs at least one user and one item")
        if self.kind not in ("impressions", "ratings"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.kind == "impressions" and not 2 <= self.candidates <= self.n_items:
            raise ValueError("candidates must lie in [2, n_items]")
        if not 0.0 < self.base_ctr < 1.0:
            raise ValueError("base_ctr must lie in (0, 1)")


def _latent_model(cfg, rng):
    """Item features, their latent embeddings and per-user latent tastes."""
    item_feats = rng.standard_normal((cfg.n_items, cfg.feature_dim))
    proj = rng.standard_normal((cfg.feature_dim, cfg.latent_dim)) / np.sqrt(cfg.feature_dim)
    item_latent = item_feats @ proj
    user_latent = rng.standard_normal((cfg.n_users, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    return item_feats, item_latent, user_latent


def calibrate_intercept(cfg, user_latent, item_latent):
    """Intercept making the mean click probability over all (user, item)
    pairs equal ``cfg.base_ctr``; candidates are drawn uniformly, so this is
    also the expected label rate of the log."""
    scores = cfg.preference_scale * (user_latent @ item_latent.T)
    target = cfg.base_ctr
    return brentq(lambda b: float(expit(b + scores).mean()) - target, -40.0, 40.0, xtol=1e-12)


def click_probabilities(cfg, user_latent, item_latent, intercept):
    """Latent click model: sigmoid(intercept + scale * u . v)."""
    return expit(intercept + cfg.preference_scale * (user_latent @ item_latent.T))


def generate_impression_log(cfg, seed):
    """Returns ``(log, truth)``; ``truth`` holds the click probabilities of
    every logged candidate so oracle and uniform CTRs can be computed."""
    rng = np.random.default_rng(seed)
    item_feats, item_latent, user_latent = _latent_model(cfg, rng)
    intercept = calibrate_intercept(cfg, user_latent, item_latent)
    width = len(str(max(cfg.n_items, cfg.n_users)))
    item_ids = [f"N{i:0{width}d}" for i in range(cfg.n_items)]
    user_ids = [f"U{u:0{width}d}" for u in range(cfg.n_users)]
    impressions, truth = [], []
    imp_no = 0
    for u in range(cfg.n_users):
        probs_u = click_probabilities(cfg, user_latent[u:u + 1], item_latent, intercept)[0]
        # history: items the user engaged with, drawn by preference
        hist_w = probs_u / probs_u.sum()
        hist = rng.choice(cfg.n_items, size=cfg.history_length, replace=False, p=hist_w)
        for _ in range(cfg.impressions_per_user):
            cands = rng.choice(cfg.n_items, size=cfg.candidates, replace=False)
            p = probs_u[cands]
            labels = (rng.random(cfg.candidates) < p).astype(np.float64)
            imp_no += 1
            impressions.append(Impression(str(imp_no), user_ids[u], f"t{imp_no}",
                                          tuple(item_ids[h] for h in hist),
                                          tuple(item_ids[c] for c in cands), labels))
            truth.append(p)
    log = ImpressionLog(impressions, dict(zip(item_ids, item_feats)))
    return log, truth


def generate_rating_matrix(cfg, seed):
    rng = np.random.default_rng(seed)
    item_feats, item_latent, user_latent = _latent_model(cfg, rng)
    user_feats = user_latent + 0.1 * rng.standard_normal(user_latent.shape)
    mean = 2.0 + cfg.preference_scale * (user_latent @ item_latent.T)
    ratings = mean + cfg.rating_noise * rng.standard_normal(mean.shape)
    if cfg.density < 1.0:
        ratings[rng.random(ratings.shape) >= cfg.density] = np.nan
    width = len(str(max(cfg.n_items, cfg.n_users)))
    return RatingMatrix([f"U{u:0{width}d}" for u in range(cfg.n_users)],
                        [f"I{i:0{width}d}" for i in range(cfg.n_items)],
                        ratings, user_feats, item_feats), mean


def read_generator_config(path):
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    from .config import parse_scalar
    fields = GeneratorConfig.__dataclass_fields__
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise DataFormatError(f"{path}:{lineno}: expected key = value")
            if key not in fields:
                raise DataFormatError(f"{path}:{lineno}: unknown generator key {key!r}")
            values[key] = parse_scalar(value.strip())
    return GeneratorConfig(**values)


def write_generated(cfg, seed, directory):
    """Generate a dataset and write it under ``directory``; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    if cfg.kind == "impressions":
        log, _ = generate_impression_log(cfg, seed)
        paths = {"log": os.path.join(directory, "behaviors.tsv"),
                 "items": os.path.join(directory, "items.csv")}
        write_impression_log(log, paths["log"])
        write_feature_table(paths["items"], log.item_features)
        return paths
    matrix, _ = generate_rating_matrix(cfg, seed)
    write_rating_matrix(matrix, directory)
    return {name: os.path.join(directory, f"{name}.csv") for name in ("ratings", "users", "items")}
