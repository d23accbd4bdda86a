"""Comparison agents: greedy/epsilon-greedy, multi-armed UCB and Thompson
sampling, linear UCB/TS, the neural UCB/TS family and ensemble sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import nn
from .agent import Agent, argmax_first, register

FULL_GRADIENT_PARAM_CAP = 2000


class LinearBanditState:
    """Ridge sufficient statistics ``(gamma, gamma_inv, b)``.

    ``gamma_inv`` is maintained with Sherman-Morrison rank-one updates and
    recomputed from ``gamma`` every ``reinvert_every`` updates.
    """

    def __init__(self, dim, lam=1.0, reinvert_every=500):
        if lam <= 0:
            raise ValueError("lambda must be positive")
        self.dim = dim
        self.lam = lam
        self.gamma = lam * np.eye(dim)
        self.gamma_inv = np.eye(dim) / lam
        self.b = np.zeros(dim)
        self.reinvert_every = reinvert_every
        self.n_updates = 0

    def update(self, x, reward=0.0, scale=1.0):
        """``gamma += scale * x x^T`` and ``b += reward * x``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"vector has shape {x.shape}, expected ({self.dim},)")
        self.gamma += scale * np.outer(x, x)
        self.b += reward * x
        gx = self.gamma_inv @ x
        denom = 1.0 + scale * (x @ gx)
        if denom <= 0:
            raise np.linalg.LinAlgError("rank-one update lost positive definiteness")
        self.gamma_inv -= (scale / denom) * np.outer(gx, gx)
        self.n_updates += 1
        if self.reinvert_every and self.n_updates % self.reinvert_every == 0:
            self.reinvert()

    def reinvert(self):
        chol = np.linalg.cholesky(self.gamma)
        inv_l = np.linalg.inv(chol)
        self.gamma_inv = inv_l.T @ inv_l

    def mean(self):
        return self.gamma_inv @ self.b

    def quad(self, xs):
        """``x^T gamma_inv x`` for each row of ``xs``."""
        xs = np.atleast_2d(xs)
        return np.einsum("ij,jk,ik->i", xs, self.gamma_inv, xs)


@dataclass
class ArmStats:
    n_arms: int
    alpha0: float = 1.0
    beta0: float = 1.0
    counts: np.ndarray = field(init=False)
    sums: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.n_arms <= 0:
            raise ValueError("need at least one arm")
        self.counts = np.zeros(self.n_arms, dtype=np.int64)
        self.sums = np.zeros(self.n_arms)

    def update(self, arm, reward):
        self.counts[arm] += 1
        self.sums[arm] += reward

    @property
    def means(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), 0.0)

    @property
    def beta_params(self):
        return self.alpha0 + self.sums, self.beta0 + self.counts - self.sums


def vanilla_ucb_select(stats, t, alpha):
    """Untried arms first (lowest index), then mean + alpha * sqrt(ln t / n)."""
    untried = np.flatnonzero(stats.counts == 0)
    if untried.size:
        return int(untried[0])
    bonus = alpha * np.sqrt(np.log(max(t, 1)) / stats.counts)
    return argmax_first(stats.means + bonus)


def vanilla_ts_select(stats, rng):
    a, b = stats.beta_params
    return argmax_first(rng.beta(a, b))


# ----------------------------------------------------------------------------
# neural building blocks


class MlpNetwork:
    """MLP on ``concat(context, action)`` with a sigmoid or identity head."""

    def __init__(self, context_dim, action_dim, hidden_dims=(200, 100), output_head="sigmoid",
                 seed=None, prefix="f."):
        self.context_dim = context_dim
        self.action_dim = action_dim
        self.output_head = output_head
        self.spec = nn.MlpSpec(context_dim + action_dim, hidden_dims, 1)
        self.prefix = prefix
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params = nn.glorot_init(self.spec, rng, prefix)

    @property
    def last_layer(self):
        return f"{self.prefix}W{self.spec.n_layers - 1}"

    @property
    def width(self):
        return self.spec.representation_dim

    def inputs(self, context, actions):
        c = np.atleast_2d(np.asarray(context, dtype=np.float64))
        a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if c.shape[1] != self.context_dim or a.shape[1] != self.action_dim:
            raise ValueError("feature dimensions do not match the network")
        n = max(c.shape[0], a.shape[0])
        return np.concatenate([np.broadcast_to(c, (n, c.shape[1])),
                               np.broadcast_to(a, (n, a.shape[1]))], axis=1)

    def run(self, context, actions, params=None):
        """Forward on each candidate row; returns ``(logits, tape)``."""
        params = self.params if params is None else params
        out, tape = nn.forward(self.spec, params, self.inputs(context, actions), self.prefix)
        return out[:, 0], tape

    def head(self, logits):
        return expit(logits) if self.output_head == "sigmoid" else logits

    def head_slope(self, logits):
        if self.output_head == "sigmoid":
            p = expit(logits)
            return p * (1.0 - p)
        return np.ones_like(logits)

    def predict(self, context, actions):
        return self.head(self.run(context, actions)[0])

    def representation(self, context, actions):
        return self.run(context, actions)[1].inputs[-1]

    def last_layer_gradients(self, context, actions):
        """Gradient of each candidate's output w.r.t. the final weight matrix."""
        logits, tape = self.run(context, actions)
        return self.head_slope(logits)[:, None] * tape.inputs[-1], self.head(logits)

    def gradients(self, context, actions, blocks=None):
        """Per-candidate output gradients w.r.t. the named blocks (all by default)."""
        if blocks is None:
            blocks = self.params.names
        inp = self.inputs(context, actions)
        rows = []
        for x in inp:
            logit, tape = nn.forward(self.spec, self.params, x, self.prefix)
            up = self.head_slope(logit)
            grads, _ = nn.backward(tape, up)
            rows.append(np.concatenate([grads[name].ravel() for name in blocks]))
        return np.array(rows), self.predict(context, actions)

    def loss_and_grads(self, contexts, actions, rewards, extra_logits=None):
        logits, tape = self.run(contexts, actions)
        if extra_logits is not None:
            logits = logits + extra_logits
        rewards = np.asarray(rewards, dtype=np.float64)
        if self.output_head == "sigmoid":
            values, d = nn.bce_with_logits(logits, rewards)
        else:
            diff = logits - rewards
            values, d = diff * diff, 2.0 * diff
        grads, _ = nn.backward(tape, d[:, None])
        return float(values.sum()), grads


class PriorMlpNetwork(MlpNetwork):
    """Trainable MLP plus a frozen, independently initialized additive prior MLP."""

    def __init__(self, context_dim, action_dim, hidden_dims=(200, 100), output_head="sigmoid",
                 prior_scale=0.3, seed=None):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        super().__init__(context_dim, action_dim, hidden_dims, output_head, rng)
        self.prior_scale = prior_scale
        self.prior = nn.glorot_init(self.spec, rng, self.prefix)

    def prior_logits(self, context, actions):
        return self.run(context, actions, self.prior)[0]

    def run_total(self, context, actions):
        return self.run(context, actions)[0] + self.prior_scale * self.prior_logits(context, actions)

    def predict(self, context, actions):
        return self.head(self.run_total(context, actions))

    def loss_and_grads(self, contexts, actions, rewards, extra_logits=None):
        prior = self.prior_scale * self.prior_logits(contexts, actions)
        if extra_logits is not None:
            prior = prior + extra_logits
        return super().loss_and_grads(contexts, actions, rewards, prior)


def _check_candidates(actions):
    if len(actions) == 0:
        raise ValueError("empty candidate set")


@dataclass
class _NeuralAgent(Agent):
    network: MlpNetwork = None
    learning_rate: float = 1e-3
    optimizer: nn.Adam = field(init=False, default=None)

    def __post_init__(self):
        self.optimizer = nn.Adam(self.network.params, self.learning_rate)

    def greedy_scores(self, context, actions):
        return self.network.run(context, actions)[0]

    def train(self, contexts, actions, rewards, rng):
        value, grads = self.network.loss_and_grads(contexts, actions, rewards)
        self.optimizer.step(self.network.params, grads)
        return value


@dataclass
class EpsGreedyAgent(_NeuralAgent):
    epsilon: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        super().__post_init__()

    def select(self, context, actions, rng):
        _check_candidates(actions)
        # one uniform draw every step keeps the random stream aligned across epsilons
        explore = rng.random() < self.epsilon
        if explore:
            return int(rng.integers(len(actions)))
        return self.greedy(context, actions)


def eps_greedy_select(net, context, actions, epsilon, rng):
    _check_candidates(actions)
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(len(actions)))
    return argmax_first(net.run(context, actions)[0])


@dataclass
class NeuralLinUCBAgent(_NeuralAgent):
    """Optimism on the last hidden representation with one shared matrix."""

    alpha: float = 1.0
    lam: float = 1.0
    state: LinearBanditState = field(init=False, default=None)

    def __post_init__(self):
        super().__post_init__()
        self.state = LinearBanditState(self.network.width, self.lam)

    def scores(self, context, actions):
        logits, tape = self.network.run(context, actions)
        rep = tape.inputs[-1]
        return self.network.head(logits) + self.alpha * np.sqrt(self.state.quad(rep))

    def select(self, context, actions, rng):
        _check_candidates(actions)
        return argmax_first(self.scores(context, actions))

    def observe(self, context, action, action_index, reward):
        rep = self.network.representation(context, action)[0]
        self.state.update(rep, reward)


@dataclass
class _GradientAgent(_NeuralAgent):
    """Shared machinery for the NeuralUCB / NeuralTS variants.

    ``full_gradient`` uses every parameter (tiny nets only); otherwise only
    the final weight matrix. ``blocks`` overrides the parameter selection.
    With ``width_scale`` the gram update is divided by the last hidden width.
    """

    alpha: float = 1.0
    lam: float = 1.0
    width_scale: bool = True
    full_gradient: bool = False
    blocks: tuple = None
    state: LinearBanditState = field(init=False, default=None)

    def __post_init__(self):
        super().__post_init__()
        net = self.network
        if self.blocks is None:
            if self.full_gradient:
                if net.params.size > FULL_GRADIENT_PARAM_CAP:
                    raise ValueError(
                        f"full-gradient mode needs <= {FULL_GRADIENT_PARAM_CAP} parameters, "
                        f"network has {net.params.size}")
                self.blocks = tuple(net.params.names)
            else:
                self.blocks = None
        dim = (sum(net.params[b].size for b in self.blocks) if self.blocks
               else net.width)
        self.state = LinearBanditState(dim, self.lam)

    def features(self, context, actions):
        if self.blocks is None:
            return self.network.last_layer_gradients(context, actions)
        return self.network.gradients(context, actions, self.blocks)

    def variance(self, g):
        return self.lam * self.state.quad(g)

    def observe(self, context, action, action_index, reward):
        g, _ = self.features(context, action)
        scale = 1.0 / self.network.width if self.width_scale else 1.0
        self.state.update(g[0], reward, scale=scale)


@dataclass
class NeuralUCBAgent(_GradientAgent):
    def scores(self, context, actions):
        g, pred = self.features(context, actions)
        return pred + self.alpha * np.sqrt(self.state.quad(g))

    def select(self, context, actions, rng):
        _check_candidates(actions)
        return argmax_first(self.scores(context, actions))


@dataclass
class NeuralTSAgent(_GradientAgent):
    def select(self, context, actions, rng):
        _check_candidates(actions)
        g, pred = self.features(context, actions)
        std = self.alpha * np.sqrt(self.variance(g))
        return argmax_first(pred + std * rng.standard_normal(len(pred)))


@dataclass
class LinUCBAgent(Agent):
    """LinUCB on ``concat(context, action)``; per-arm or shared statistics."""

    dim: int = 0
    alpha: float = 1.0
    lam: float = 1.0
    shared: bool = False
    trains: bool = False
    states: dict = field(default_factory=dict)

    def _state(self, arm):
        key = 0 if self.shared else arm
        if key not in self.states:
            self.states[key] = LinearBanditState(self.dim, self.lam)
        return self.states[key]

    @staticmethod
    def joint(context, actions):
        a = np.atleast_2d(actions)
        c = np.broadcast_to(np.asarray(context, dtype=np.float64), (a.shape[0], np.shape(context)[-1]))
        return np.concatenate([c, a], axis=1)

    def scores(self, context, actions):
        xs = self.joint(context, actions)
        if xs.shape[1] != self.dim:
            raise ValueError(f"joint features have dim {xs.shape[1]}, expected {self.dim}")
        if self.shared:
            st = self._state(0)
            return xs @ st.mean() + self.alpha * np.sqrt(st.quad(xs))
        out = np.empty(len(xs))
        # untouched arms share the identical prior state: score = alpha * |x| / sqrt(lam)
        for i, x in enumerate(xs):
            st = self.states.get(i)
            if st is None:
                out[i] = self.alpha * np.sqrt(x @ x / self.lam)
            else:
                out[i] = x @ st.mean() + self.alpha * np.sqrt(x @ st.gamma_inv @ x)
        return out

    def greedy_scores(self, context, actions):
        saved, self.alpha = self.alpha, 0.0
        try:
            return self.scores(context, actions)
        finally:
            self.alpha = saved

    def select(self, context, actions, rng):
        _check_candidates(actions)
        return argmax_first(self.scores(context, actions))

    def observe(self, context, action, action_index, reward):
        x = self.joint(context, action)[0]
        self._state(action_index).update(x, reward)


@dataclass
class LinearTSAgent(Agent):
    """Gaussian posterior over a shared linear model: N(gamma^-1 b, alpha^2 gamma^-1)."""

    dim: int = 0
    alpha: float = 1.0
    lam: float = 1.0
    trains: bool = False
    state: LinearBanditState = field(init=False, default=None)

    def __post_init__(self):
        self.state = LinearBanditState(self.dim, self.lam)

    def sample_theta(self, rng):
        cov = self.state.gamma_inv
        try:
            chol = np.linalg.cholesky(0.5 * (cov + cov.T))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("posterior covariance is not positive definite") from exc
        return self.state.mean() + self.alpha * chol @ rng.standard_normal(self.dim)

    def select(self, context, actions, rng):
        _check_candidates(actions)
        xs = LinUCBAgent.joint(context, actions)
        return argmax_first(xs @ self.sample_theta(rng))

    def greedy_scores(self, context, actions):
        return LinUCBAgent.joint(context, actions) @ self.state.mean()

    def observe(self, context, action, action_index, reward):
        self.state.update(LinUCBAgent.joint(context, action)[0], reward)


@dataclass
class VanillaUCBAgent(Agent):
    n_arms: int = 1
    alpha: float = 1.0
    trains: bool = False
    stats: ArmStats = field(init=False, default=None)
    t: int = 0

    def __post_init__(self):
        self.stats = ArmStats(self.n_arms)

    def select(self, context, actions, rng):
        _check_candidates(actions)
        self.t += 1
        return vanilla_ucb_select(self.stats, self.t, self.alpha)

    def greedy_scores(self, context, actions):
        return self.stats.means

    def observe(self, context, action, action_index, reward):
        self.stats.update(action_index, reward)


@dataclass
class VanillaTSAgent(Agent):
    n_arms: int = 1
    alpha0: float = 1.0
    beta0: float = 1.0
    trains: bool = False
    stats: ArmStats = field(init=False, default=None)

    def __post_init__(self):
        self.stats = ArmStats(self.n_arms, self.alpha0, self.beta0)

    def select(self, context, actions, rng):
        _check_candidates(actions)
        return vanilla_ts_select(self.stats, rng)

    def greedy_scores(self, context, actions):
        a, b = self.stats.beta_params
        return a / (a + b)

    def observe(self, context, action, action_index, reward):
        if reward not in (0, 1):
            raise ValueError(f"Beta-Bernoulli sampling needs binary rewards, got {reward!r}")
        self.stats.update(action_index, reward)


@dataclass
class EnsembleAgent(Agent):
    """Ensemble sampling: one member (plus its frozen prior) drives each decision."""

    members: list = field(default_factory=list)
    learning_rate: float = 1e-3
    bootstrap: bool = False
    optimizers: list = field(init=False, default_factory=list)

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("ensemble needs at least one member")
        self.optimizers = [nn.Adam(m.params, self.learning_rate) for m in self.members]

    def select(self, context, actions, rng):
        _check_candidates(actions)
        m = self.members[int(rng.integers(len(self.members)))]
        return argmax_first(m.run_total(context, actions))

    def greedy_scores(self, context, actions):
        return np.mean([m.run_total(context, actions) for m in self.members], axis=0)

    def train(self, contexts, actions, rewards, rng):
        total = 0.0
        for member, opt in zip(self.members, self.optimizers):
            if self.bootstrap:
                keep = rng.random(len(rewards)) < 0.5
                if not keep.any():
                    continue
                c, a, r = contexts[keep], actions[keep], rewards[keep]
            else:
                c, a, r = contexts, actions, rewards
            value, grads = member.loss_and_grads(c, a, r)
            opt.step(member.params, grads)
            total += value
        return total


# ----------------------------------------------------------------------------
# registry

_NET_KEYS = ("hidden_dims", "output_head")


def _net(context_dim, action_dim, seed, kw):
    opts = {k: kw.pop(k) for k in _NET_KEYS if k in kw}
    return MlpNetwork(context_dim, action_dim, seed=seed, **opts)


@register("exploit")
def make_exploit(context_dim, action_dim, n_actions=None, seed=None, learning_rate=1e-3, **kw):
    return EpsGreedyAgent(name="exploit", network=_net(context_dim, action_dim, seed, kw),
                          learning_rate=learning_rate, epsilon=0.0, **kw)


@register("eps_greedy")
def make_eps_greedy(context_dim, action_dim, n_actions=None, seed=None, learning_rate=1e-3, **kw):
    return EpsGreedyAgent(name="eps_greedy", network=_net(context_dim, action_dim, seed, kw),
                          learning_rate=learning_rate, **kw)


@register("neural_linucb")
def make_neural_linucb(context_dim, action_dim, n_actions=None, seed=None, learning_rate=1e-3, **kw):
    return NeuralLinUCBAgent(name="neural_linucb", network=_net(context_dim, action_dim, seed, kw),
                             learning_rate=learning_rate, **kw)


@register("neural_ucb_ll")
def make_neural_ucb(context_dim, action_dim, n_actions=None, seed=None, learning_rate=1e-3, **kw):
    return NeuralUCBAgent(name="neural_ucb_ll", network=_net(context_dim, action_dim, seed, kw),
                          learning_rate=learning_rate, **kw)


@register("neural_ts_ll")
def make_neural_ts(context_dim, action_dim, n_actions=None, seed=None, learning_rate=1e-3, **kw):
    return NeuralTSAgent(name="neural_ts_ll", network=_net(context_dim, action_dim, seed, kw),
                         learning_rate=learning_rate, **kw)


@register("linucb")
def make_linucb(context_dim, action_dim, n_actions=None, seed=None, **kw):
    return LinUCBAgent(name="linucb", dim=context_dim + action_dim, **kw)


@register("linear_ts")
def make_linear_ts(context_dim, action_dim, n_actions=None, seed=None, **kw):
    return LinearTSAgent(name="linear_ts", dim=context_dim + action_dim, **kw)


@register("ucb")
def make_ucb(context_dim, action_dim, n_actions=None, seed=None, **kw):
    if n_actions is None:
        raise ValueError("ucb needs a fixed number of arms")
    return VanillaUCBAgent(name="ucb", n_arms=n_actions, **kw)


@register("ts")
def make_ts(context_dim, action_dim, n_actions=None, seed=None, **kw):
    if n_actions is None:
        raise ValueError("ts needs a fixed number of arms")
    return VanillaTSAgent(name="ts", n_arms=n_actions, **kw)


@register("ensemble")
def make_ensemble(context_dim, action_dim, n_actions=None, seed=None, learning_rate=1e-3,
                  n_members=8, prior_scale=0.3, hidden_dims=(200, 100), output_head="sigmoid",
                  bootstrap=False):
    if n_members < 1:
        raise ValueError("ensemble needs at least one member")
    rng = np.random.default_rng(seed)
    members = [PriorMlpNetwork(context_dim, action_dim, hidden_dims, output_head, prior_scale, rng)
               for _ in range(n_members)]
    return EnsembleAgent(name="ensemble", members=members, learning_rate=learning_rate,
                         bootstrap=bootstrap)
