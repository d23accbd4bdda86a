"""Neural contextual bandits with epistemic networks (ENR) and baselines."""

from .agent import make_agent, registered_agents

__version__ = "0.1.0"
__all__ = ["make_agent", "registered_agents"]
