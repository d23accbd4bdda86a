"""Regret of ENR, EpiNet+MLP and epsilon-greedy on a scaled-down toy problem.

Runs in about a minute. The full-size comparison lives in the bundled
``toy_comparison`` config:  enr-bandit sweep --config toy_comparison
"""

import numpy as np

from enr_bandit import experiment, harness
from enr_bandit.config import load_config

STEPS, SEEDS = 1500, 3

for name in ("enr", "epinet_mlp", "eps_greedy"):
    cfg = load_config("toy_comparison", [f"agent.name={name}", f"steps={STEPS}",
                                         f"seeds={SEEDS}"])
    cfg.grid = {}
    runs = [m for m, _ in experiment.run_config(cfg).values()]
    m, se, _ = harness.mean_stderr([r.regret() for r in runs])
    # cumulative average regret at a few checkpoints, averaged over seeds
    curve = np.mean([np.cumsum(r.regret_trace()) / np.arange(1, r.steps + 1) for r in runs],
                    axis=0)
    marks = "  ".join(f"t={t}:{curve[t - 1]:.3f}" for t in (100, 500, 1000, STEPS))
    print(f"{name:<11} avg regret {m:.4f} ± {se:.4f}   {marks}")
