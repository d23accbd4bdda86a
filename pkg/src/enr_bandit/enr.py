"""Epistemic Neural Recommendation and the generic EpiNet-on-MLP network.

Both networks produce a logit

    marginal(x) + (g_train(sg[x], z) + prior_scale * g_prior(sg[x], z)) . z

where ``x`` is a joint context/action representation, ``z`` an epistemic
index and ``sg`` a stop-gradient. ``g_prior`` is initialized independently
and is never trained. A sigmoid head turns the logit into a click
probability for binary rewards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import nn
from .agent import Agent, register

__all__ = [
    "EnrConfig",
    "EpinetWrapConfig",
    "EnrNetwork",
    "EpinetMlpNetwork",
    "EpistemicAgent",
    "sample_index",
    "summarize",
]


def sample_index(rng, dim, prior="gaussian", size=None):
    """Draw epistemic indices; returns shape ``(dim,)`` or ``(size, dim)``."""
    shape = (dim,) if size is None else (size, dim)
    if prior == "gaussian":
        return rng.standard_normal(shape)
    if prior == "one_hot":
        n = 1 if size is None else size
        z = np.zeros((n, dim))
        z[np.arange(n), rng.integers(dim, size=n)] = 1.0
        return z[0] if size is None else z
    raise ValueError(f"unknown index prior {prior!r}")


@dataclass
class EnrConfig:
    context_dim: int
    action_dim: int
    embed_dim: int = 100
    marginal_hidden_dims: tuple = (200, 100)
    epinet_hidden_dims: tuple = (50, 20)
    index_dim: int = 5
    index_prior: str = "gaussian"
    prior_scale: float = 0.3
    output_head: str = "sigmoid"
    train_index_count: int = 8
    layer_norm: bool = True
    layer_norm_eps: float = 1e-5
    stop_gradient: bool = True

    def __post_init__(self):
        self.marginal_hidden_dims = tuple(self.marginal_hidden_dims)
        self.epinet_hidden_dims = tuple(self.epinet_hidden_dims)
        for name in ("context_dim", "action_dim", "embed_dim", "index_dim", "train_index_count"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.prior_scale < 1.0:
            raise ValueError("prior_scale must lie in (0, 1)")
        if self.index_prior not in ("gaussian", "one_hot"):
            raise ValueError(f"unknown index prior {self.index_prior!r}")
        if self.output_head not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output head {self.output_head!r}")

    @property
    def joint_dim(self):
        return 3 * self.embed_dim

    def marginal_spec(self):
        return nn.MlpSpec(self.joint_dim, self.marginal_hidden_dims, 1)

    def epinet_spec(self):
        return nn.MlpSpec(self.joint_dim + self.index_dim, self.epinet_hidden_dims, self.index_dim)


@dataclass
class EpinetWrapConfig:
    context_dim: int
    action_dim: int
    base_hidden_dims: tuple = (200, 100)
    epinet_hidden_dims: tuple = (50,)
    index_dim: int = 5
    index_prior: str = "gaussian"
    prior_scale: float = 0.3
    output_head: str = "sigmoid"
    train_index_count: int = 8
    stop_gradient: bool = True

    def __post_init__(self):
        self.base_hidden_dims = tuple(self.base_hidden_dims)
        self.epinet_hidden_dims = tuple(self.epinet_hidden_dims)
        if not self.base_hidden_dims:
            raise ValueError("the base network needs at least one hidden layer")
        if not 0.0 < self.prior_scale < 1.0:
            raise ValueError("prior_scale must lie in (0, 1)")
        if self.index_dim <= 0 or self.train_index_count <= 0:
            raise ValueError("index_dim and train_index_count must be positive")
        if self.index_prior not in ("gaussian", "one_hot"):
            raise ValueError(f"unknown index prior {self.index_prior!r}")
        if self.output_head not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output head {self.output_head!r}")

    def base_spec(self):
        return nn.MlpSpec(self.context_dim + self.action_dim, self.base_hidden_dims, 1)

    def epinet_spec(self):
        rep = self.base_hidden_dims[-1]
        return nn.MlpSpec(rep + self.index_dim, self.epinet_hidden_dims, self.index_dim)


def _as_batch(a, dim, what):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != dim:
        raise ValueError(f"{what} has shape {a.shape}, expected (*, {dim})")
    return a


def _summarize_side(params, side, feats, use_ln, eps):
    pre = feats @ params[f"{side}.W"] + params[f"{side}.b"]
    act = np.maximum(pre, 0.0)
    if not use_ln:
        return act, (pre, None)
    out, cache = nn.layer_norm(act, params[f"{side}.ln_g"], params[f"{side}.ln_b"], eps)
    return out, (pre, cache)


def summarize(params, context, action, layer_norm=True, eps=1e-5):
    """Context/action summaries, their interaction, and the joint vector.

    Works on single vectors or on row-aligned batches (a single context row
    broadcasts against many action rows).
    """
    squeeze = np.ndim(context) == 1 and np.ndim(action) == 1
    c = np.atleast_2d(np.asarray(context, dtype=np.float64))
    a = np.atleast_2d(np.asarray(action, dtype=np.float64))
    if c.shape[1] != params["ctx.W"].shape[0] or a.shape[1] != params["act.W"].shape[0]:
        raise ValueError("feature dimension does not match the summarizer")
    hc, _ = _summarize_side(params, "ctx", c, layer_norm, eps)
    ha, _ = _summarize_side(params, "act", a, layer_norm, eps)
    hc, ha = np.broadcast_arrays(hc, ha)
    inter = hc * ha
    x = np.concatenate([hc, ha, inter], axis=1)
    if squeeze:
        return hc[0], ha[0], inter[0], x[0]
    return hc, ha, inter, x


def _epinet_pairs(spec, params, prefix, rep, zs):
    """Epinet outputs for all pairs of ``rep`` rows and ``zs`` rows: ``(n, m, d_z)``."""
    n, R = rep.shape
    m = zs.shape[0]
    W0 = params[f"{prefix}W0"]
    a = (rep @ W0[:R])[:, None, :] + (zs @ W0[R:] + params[f"{prefix}b0"])[None, :, :]
    pre = [a.reshape(n * m, -1)]
    inputs = [None]
    last = spec.n_layers - 1
    h = pre[0]
    for i in range(1, spec.n_layers):
        h = np.maximum(h, 0.0)
        inputs.append(h)
        h = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        pre.append(h)
    out = h.reshape(n, m, -1)
    return out, (spec, params, prefix, rep, zs, inputs, pre, last)


def _epinet_pairs_backward(cache, dout, grads, want_rep):
    """Accumulate parameter grads (when ``grads`` is given); return d rep or ``None``."""
    spec, params, prefix, rep, zs, inputs, pre, last = cache
    n, m = rep.shape[0], zs.shape[0]
    R = rep.shape[1]
    g = dout.reshape(n * m, -1)
    for i in range(last, 0, -1):
        if grads is not None:
            grads[f"{prefix}W{i}"] += inputs[i].T @ g
            grads[f"{prefix}b{i}"] += g.sum(axis=0)
        g = (g @ params[f"{prefix}W{i}"].T) * (pre[i - 1] > 0.0)
    g3 = g.reshape(n, m, -1)
    per_row = g3.sum(axis=1)
    if grads is not None:
        W0 = grads[f"{prefix}W0"]
        W0[:R] += rep.T @ per_row
        W0[R:] += zs.T @ g3.sum(axis=0)
        grads[f"{prefix}b0"] += per_row.sum(axis=0)
    if not want_rep:
        return None
    return per_row @ params[f"{prefix}W0"][:R].T


class _EpistemicNetwork:
    """Shared epinet head logic; subclasses supply the joint representation."""

    cfg = None
    params: nn.ParamSet
    prior: nn.ParamSet

    # subclasses implement: _represent(contexts, actions) -> (marginal_logit, rep, cache)
    # and _backward_base(cache, d_marginal, d_rep, grads)

    @property
    def index_dim(self):
        return self.cfg.index_dim

    def sample_index(self, rng, size=None):
        return sample_index(rng, self.cfg.index_dim, self.cfg.index_prior, size)

    def _uncertainty(self, rep, z):
        """``(g_train + scale * g_prior) . z`` with one index per row of ``rep``.

        Runs the epinets on ``concat(rep, z)`` directly; used for per-row
        indices and as a reference for the factored path below.
        """
        spec = self.cfg.epinet_spec()
        gin = np.concatenate([rep, z], axis=1)
        g, tape = nn.forward(spec, self.params, gin, prefix="g.")
        gp, ptape = nn.forward(spec, self.prior, gin, prefix="gp.")
        total = g + self.cfg.prior_scale * gp
        return (total * z).sum(axis=1), (tape, ptape)

    def _uncertainty_pairs(self, rep, zs):
        """Uncertainty term for every (row, index) pair, shape ``(n, m)``.

        The first epinet layer splits into a representation part computed once
        per row and an index part computed once per index.
        """
        spec = self.cfg.epinet_spec()
        g, cache = _epinet_pairs(spec, self.params, "g.", rep, zs)
        gp, pcache = _epinet_pairs(spec, self.prior, "gp.", rep, zs)
        total = g + self.cfg.prior_scale * gp
        return (total * zs[None, :, :]).sum(axis=2), (cache, pcache)

    def logits(self, context, actions, z):
        """Pre-head outputs for each action row under index ``z``.

        ``z`` may be one index shared by all rows or one index per row.
        """
        marg, rep, _ = self._represent(context, actions)
        n = rep.shape[0]
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.cfg.index_dim:
            raise ValueError(f"index has dim {z.shape[-1]}, expected {self.cfg.index_dim}")
        if z.ndim == 1:
            unc, _ = self._uncertainty_pairs(rep, z[None, :])
            return marg + unc[:, 0]
        unc, _ = self._uncertainty(rep, np.broadcast_to(z, (n, self.cfg.index_dim)))
        return marg + unc

    def marginal_logits(self, context, actions):
        marg, _, _ = self._represent(context, actions)
        return marg

    def head(self, logits):
        return expit(logits) if self.cfg.output_head == "sigmoid" else logits

    def predict(self, context, actions, z):
        return self.head(self.logits(context, actions, z))

    def loss_and_grads(self, contexts, actions, rewards, zs, include_marginal=True):
        """Summed loss over every (transition, index) pair and its gradient.

        With ``include_marginal=False`` the marginal output enters the loss as
        a constant, which isolates the epinet branch's gradient.
        """
        cfg = self.cfg
        rewards = np.asarray(rewards, dtype=np.float64).ravel()
        zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
        marg, rep, cache = self._represent(contexts, actions)
        unc, (gcache, pcache) = self._uncertainty_pairs(rep, zs)
        logit = marg[:, None] + unc
        target = np.broadcast_to(rewards[:, None], logit.shape)
        if cfg.output_head == "sigmoid":
            values, dlogit = nn.bce_with_logits(logit, target)
        else:
            diff = logit - target
            values, dlogit = diff * diff, 2.0 * diff
        grads = self.params.zeros_like()
        dout = dlogit[:, :, None] * zs[None, :, :]
        want_rep = not cfg.stop_gradient
        d_rep = _epinet_pairs_backward(gcache, dout, grads, want_rep)
        if want_rep:
            d_rep = d_rep + _epinet_pairs_backward(pcache, cfg.prior_scale * dout, None, True)
        d_marg = dlogit.sum(axis=1) if include_marginal else None
        self._backward_base(cache, d_marg, d_rep, grads)
        return float(values.sum()), grads

    def train_step(self, optimizer, contexts, actions, rewards, rng):
        if len(rewards) == 0:
            raise ValueError("empty batch")
        zs = self.sample_index(rng, size=self.cfg.train_index_count)
        value, grads = self.loss_and_grads(contexts, actions, rewards, zs)
        optimizer.step(self.params, grads)
        return value

    def save(self, path):
        nn.save_params(self.params.merged(self.prior), path)


class EnrNetwork(_EpistemicNetwork):
    """Summarizers + interaction + marginal MLP + trainable and prior epinets."""

    def __init__(self, cfg, seed=None):
        self.cfg = cfg
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        E = cfg.embed_dim
        shapes = []
        for side, d in (("ctx", cfg.context_dim), ("act", cfg.action_dim)):
            shapes += [(f"{side}.W", (d, E)), (f"{side}.b", (E,))]
            if cfg.layer_norm:
                shapes += [(f"{side}.ln_g", (E,)), (f"{side}.ln_b", (E,))]
        mspec, gspec = cfg.marginal_spec(), cfg.epinet_spec()
        shapes += mspec.block_shapes("f.") + gspec.block_shapes("g.")
        self.params = nn.ParamSet(shapes)
        for side, d in (("ctx", cfg.context_dim), ("act", cfg.action_dim)):
            glorot_side = nn.MlpSpec(d, (), E)
            tmp = nn.glorot_init(glorot_side, rng)
            self.params[f"{side}.W"] = tmp["W0"]
            if cfg.layer_norm:
                self.params[f"{side}.ln_g"] = 1.0
        nn.glorot_fill(self.params, mspec, rng, "f.")
        nn.glorot_fill(self.params, gspec, rng, "g.")
        self.prior = nn.glorot_init(gspec, rng, "gp.")

    def summarize(self, context, action):
        return summarize(self.params, context, action, self.cfg.layer_norm, self.cfg.layer_norm_eps)

    def _represent(self, contexts, actions):
        cfg = self.cfg
        c = _as_batch(contexts, cfg.context_dim, "context")
        a = _as_batch(actions, cfg.action_dim, "action")
        if c.shape[0] != a.shape[0] and c.shape[0] != 1 and a.shape[0] != 1:
            raise ValueError("context and action batches are not aligned")
        hc, ccache = _summarize_side(self.params, "ctx", c, cfg.layer_norm, cfg.layer_norm_eps)
        ha, acache = _summarize_side(self.params, "act", a, cfg.layer_norm, cfg.layer_norm_eps)
        n = max(hc.shape[0], ha.shape[0])
        hcb = np.broadcast_to(hc, (n, hc.shape[1]))
        hab = np.broadcast_to(ha, (n, ha.shape[1]))
        x = np.concatenate([hcb, hab, hcb * hab], axis=1)
        f, ftape = nn.forward(cfg.marginal_spec(), self.params, x, prefix="f.")
        cache = (c, a, hc, ha, hcb, hab, ccache, acache, ftape)
        return f[:, 0], x, cache

    def _backward_base(self, cache, d_marg, d_rep, grads):
        c, a, hc, ha, hcb, hab, ccache, acache, ftape = cache
        E = self.cfg.embed_dim
        dx = np.zeros((hcb.shape[0], 3 * E))
        if d_marg is not None:
            _, dxf = nn.backward(ftape, d_marg[:, None], grads)
            dx += dxf
        if d_rep is not None:
            dx += d_rep
        dhc = dx[:, :E] + dx[:, 2 * E:] * hab
        dha = dx[:, E:2 * E] + dx[:, 2 * E:] * hcb
        # a single broadcast row collects the gradient of every row it fed
        if hc.shape[0] == 1 and dhc.shape[0] > 1:
            dhc = dhc.sum(axis=0, keepdims=True)
        if ha.shape[0] == 1 and dha.shape[0] > 1:
            dha = dha.sum(axis=0, keepdims=True)
        for side, feats, dh, (pre, lncache) in (("ctx", c, dhc, ccache), ("act", a, dha, acache)):
            if lncache is not None:
                dh, dg, db = nn.layer_norm_backward(lncache, self.params[f"{side}.ln_g"], dh)
                grads[f"{side}.ln_g"] += dg
                grads[f"{side}.ln_b"] += db
            dpre = dh * (pre > 0.0)
            grads[f"{side}.W"] += feats.T @ dpre
            grads[f"{side}.b"] += dpre.sum(axis=0)


class EpinetMlpNetwork(_EpistemicNetwork):
    """An MLP on concat(context, action) with an epinet on its last hidden layer."""

    def __init__(self, cfg, seed=None):
        self.cfg = cfg
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        bspec, gspec = cfg.base_spec(), cfg.epinet_spec()
        self.params = nn.ParamSet(bspec.block_shapes("f.") + gspec.block_shapes("g."))
        nn.glorot_fill(self.params, bspec, rng, "f.")
        nn.glorot_fill(self.params, gspec, rng, "g.")
        self.prior = nn.glorot_init(gspec, rng, "gp.")

    def _represent(self, contexts, actions):
        cfg = self.cfg
        c = _as_batch(contexts, cfg.context_dim, "context")
        a = _as_batch(actions, cfg.action_dim, "action")
        n = max(c.shape[0], a.shape[0])
        inp = np.concatenate([np.broadcast_to(c, (n, c.shape[1])),
                              np.broadcast_to(a, (n, a.shape[1]))], axis=1)
        f, tape = nn.forward(cfg.base_spec(), self.params, inp, prefix="f.")
        return f[:, 0], tape.inputs[-1], tape

    def _backward_base(self, tape, d_marg, d_rep, grads):
        if d_marg is None and d_rep is None:
            return
        n = tape.output.shape[0]
        d_out = np.zeros((n, 1)) if d_marg is None else d_marg[:, None]
        if d_rep is None:
            nn.backward(tape, d_out, grads)
            return
        # gradient entering the last hidden layer from outside the base net
        spec, params = tape.spec, tape.params
        last = spec.n_layers - 1
        g = d_out
        grads[f"f.W{last}"] += tape.inputs[last].T @ g
        grads[f"f.b{last}"] += g.sum(axis=0)
        g = g @ params[f"f.W{last}"].T + d_rep
        for i in range(last - 1, -1, -1):
            g = g * (tape.pre[i] > 0.0)
            grads[f"f.W{i}"] += tape.inputs[i].T @ g
            grads[f"f.b{i}"] += g.sum(axis=0)
            g = g @ params[f"f.W{i}"].T


@dataclass
class EpistemicAgent(Agent):
    """Thompson sampling with an epistemic network (ENR or EpiNet + MLP).

    One index is drawn per decision and shared across all candidates; ties
    go to the lowest candidate index.
    """

    network: _EpistemicNetwork = None
    learning_rate: float = 1e-3
    optimizer: nn.Adam = field(init=False, default=None)

    def __post_init__(self):
        self.optimizer = nn.Adam(self.network.params, self.learning_rate)

    def select(self, context, actions, rng):
        if len(actions) == 0:
            raise ValueError("empty candidate set")
        z = self.network.sample_index(rng)
        scores = self.network.logits(context, actions, z)
        self.last_index = z
        return int(np.argmax(scores))

    def select_with_details(self, context, actions, rng):
        z = self.network.sample_index(rng)
        preds = self.network.predict(context, actions, z)
        return int(np.argmax(preds)), z, preds

    def greedy_scores(self, context, actions):
        return self.network.marginal_logits(context, actions)

    def train(self, contexts, actions, rewards, rng):
        return self.network.train_step(self.optimizer, contexts, actions, rewards, rng)


@register("enr")
def make_enr(context_dim, action_dim, n_actions=None, seed=None, learning_rate=1e-3, **kw):
    cfg = EnrConfig(context_dim, action_dim, **kw)
    return EpistemicAgent(name="enr", network=EnrNetwork(cfg, seed), learning_rate=learning_rate)


@register("epinet_mlp")
def make_epinet_mlp(context_dim, action_dim, n_actions=None, seed=None, learning_rate=1e-3, **kw):
    cfg = EpinetWrapConfig(context_dim, action_dim, **kw)
    return EpistemicAgent(name="epinet_mlp", network=EpinetMlpNetwork(cfg, seed),
                          learning_rate=learning_rate)
