"""Replay on a generated click log: ENR against epsilon-greedy.

Generates a small impression log with a known latent click model, replays
it to both agents and reports the training-time windowed CTR and the CTR
on held-out users. The full-size version is the bundled ``mind_like``
config:  enr-bandit sweep --config mind_like
"""

from enr_bandit import experiment, harness
from enr_bandit.config import load_config

OVERRIDES = ["steps=2000", "seeds=2", "window=500", "eval_steps=1000",
             "env.n_users=1500", "env.n_items=600", "env.eval_users=200"]

for name in ("enr", "eps_greedy"):
    cfg = load_config("mind_like", [f"agent.name={name}", *OVERRIDES])
    cfg.grid = {}
    results = experiment.run_config(cfg)
    summary = experiment.summarize(results, cfg.experiment["window"])
    win, held = summary["final_window_reward"], summary["eval_reward"]
    print(f"{name:<10} final windowed CTR {win['mean']:.3f} ± {win['stderr']:.3f}   "
          f"held-out CTR {held['mean']:.3f} ± {held['stderr']:.3f}")
