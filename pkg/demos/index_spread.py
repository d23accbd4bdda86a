"""How ENR's predictions vary with the epistemic index.

For a fixed (context, action) pair, different indices z give different
click probabilities; the spread is the network's epistemic uncertainty.
Training on repeated observations of one pair shrinks the spread there
while z = 0 always reproduces the marginal prediction.
"""

import numpy as np

from enr_bandit import make_agent

rng = np.random.default_rng(0)
agent = make_agent("enr", 8, 6, seed=0, embed_dim=16, marginal_hidden_dims=(32, 16),
                   epinet_hidden_dims=(16,), index_dim=5, learning_rate=3e-3)
net = agent.network
seen_c, seen_a = rng.normal(size=(1, 8)), rng.normal(size=(1, 6))
new_c, new_a = rng.normal(size=(1, 8)), rng.normal(size=(1, 6))
zs = rng.standard_normal((200, 5))


def spread(c, a):
    preds = np.array([net.predict(c[0], a, z)[0] for z in zs])
    return preds.mean(), preds.std()


def report(tag):
    for label, (c, a) in (("seen pair", (seen_c, seen_a)), ("unseen pair", (new_c, new_a))):
        mean, sd = spread(c, a)
        marginal = net.predict(c[0], a, np.zeros(5))[0]
        print(f"{tag:<15} {label:<12} mean p {mean:.3f}  sd over z {sd:.3f}  z=0 {marginal:.3f}")


report("before training")
for _ in range(300):
    # the seen pair always clicks
    agent.train(np.repeat(seen_c, 16, axis=0), np.repeat(seen_a, 16, axis=0), np.ones(16), rng)
report("after training")
