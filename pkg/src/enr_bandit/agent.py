"""Agent protocol shared by every bandit policy, plus the name registry."""

from __future__ import annotations

import inspect
from dataclasses import dataclass

import numpy as np

_REGISTRY = {}


def register(name):
    def deco(factory):
        _REGISTRY[name] = factory
        return factory
    return deco


def registered_agents():
    from . import baselines, enr  # noqa: F401  (populate the registry)
    return sorted(_REGISTRY)


def make_agent(name, context_dim, action_dim, n_actions=None, seed=None, **hyper):
    """Build a registered agent; unknown names or hyperparameters raise ``ValueError``."""
    names = registered_agents()
    if name not in _REGISTRY:
        raise ValueError(f"unknown agent {name!r}; registered agents: {', '.join(names)}")
    factory = _REGISTRY[name]
    sig = inspect.signature(factory)
    accepts_kw = any(p.kind is p.VAR_KEYWORD for p in sig.parameters.values())
    if not accepts_kw:
        unknown = set(hyper) - set(sig.parameters)
        if unknown:
            raise ValueError(f"agent {name!r} does not accept {sorted(unknown)}")
    try:
        return factory(context_dim, action_dim, n_actions=n_actions, seed=seed, **hyper)
    except TypeError as exc:
        raise ValueError(f"bad hyperparameters for agent {name!r}: {exc}") from None


def argmax_first(scores):
    """Index of the maximum; ties resolve to the lowest index."""
    return int(np.argmax(scores))


@dataclass
class Agent:
    """Base policy.

    The harness calls ``select`` once per step, ``observe`` with the realized
    reward, and ``train`` K times on replay batches. Agents without a network
    leave ``train`` as a no-op.
    """

    name: str = "agent"
    trains: bool = True

    def select(self, context, actions, rng):
        raise NotImplementedError

    def observe(self, context, action, action_index, reward):
        pass

    def train(self, contexts, actions, rewards, rng):
        return None

    def greedy_scores(self, context, actions):
        raise NotImplementedError

    def greedy(self, context, actions):
        return argmax_first(self.greedy_scores(context, actions))
