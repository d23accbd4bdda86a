"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a single PASS/FAIL line (printed in the terminal summary)
and fails with the measured numbers when its criterion is not met. The
experiment-backed criteria (1, 8, 9) run full-length configurations and take
most of the suite's runtime; runs shared between criteria are cached.
"""

import filecmp

import numpy as np
import pytest

from enr_bandit import cli, experiment, harness, make_agent
from enr_bandit.baselines import LinearBanditState, MlpNetwork, PriorMlpNetwork
from enr_bandit.config import load_config
from enr_bandit.enr import EnrConfig, EnrNetwork, EpinetMlpNetwork, EpinetWrapConfig
from enr_bandit.environments import SyntheticEnv, SyntheticEnvSpec
from conftest import central_difference, rel_error
from test_enr import _hand_loss

pytestmark = pytest.mark.acceptance

RESULTS = {}
_RUN_CACHE = {}


def record(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line


def _run_key(cfg):
    # everything that shapes a single run; names, seed lists and windows do not
    ex = {k: v for k, v in cfg.experiment.items() if k not in ("name", "seeds", "window")}
    return repr((sorted(ex.items()), cfg.agent_name, sorted(cfg.agent_params.items()),
                 sorted(cfg.env.items())))


def _seed_runs(cfg):
    """``{seed: RunMetrics}`` for one configuration, reusing seeds run earlier."""
    cfg = cfg.copy()
    cfg.grid = {}
    cached = _RUN_CACHE.setdefault(_run_key(cfg), {})
    todo = tuple(s for s in cfg.seeds if s not in cached)
    seeds = cfg.seeds
    if todo:
        cfg.experiment["seeds"] = todo
        for seed, (metrics, _) in experiment.run_config(cfg).items():
            cached[seed] = metrics
    return {s: cached[s] for s in seeds}


def _seeds_override(n):
    return f"seeds={n}"


def _regret(cfg):
    vals = [m.regret() for m in _seed_runs(cfg).values()]
    m, se, _ = harness.mean_stderr(vals)
    return m, se


# --- 1. toy comparison ----------------------------------------------------------

TOY_GROUPS = (("enr",), ("epinet_mlp",), ("ensemble", "neural_ts_ll", "neural_linucb"),
              ("neural_ucb_ll", "eps_greedy", "exploit"))


def test_criterion_01_toy_comparison():
    regret = {}
    for group in TOY_GROUPS:
        for name in group:
            cfg = load_config("toy_comparison", [f"agent.name={name}", _seeds_override(20)])
            regret[name] = _regret(cfg)
    enr, epi = regret["enr"][0], regret["epinet_mlp"][0]
    parts = {
        "enr<=0.07": enr <= 0.07,
        "enr~0.053": abs(enr - 0.053) <= 0.02,
        "epinet~0.064": abs(epi - 0.064) <= 0.02,
    }
    means = [[regret[n][0] for n in g] for g in TOY_GROUPS]
    parts["ordering"] = all(max(a) < min(b) for a, b in zip(means, means[1:]))
    table = " ".join(f"{n}={m:.4f}±{se:.4f}" for n, (m, se) in regret.items())
    failed = [k for k, v in parts.items() if not v]
    record(1, not failed, f"{table}; failed parts: {failed or 'none'}")


# --- 2. gradient oracle ---------------------------------------------------------


def _fd_points(make, loss, n=20):
    worst = 0.0
    rng = np.random.default_rng(2024)
    for point in range(n):
        net = make(point)
        net.params.flat[:] += 0.3 * rng.normal(size=net.params.size)
        c, a = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
        r = (rng.random(4) < 0.5).astype(float)
        analytic, numeric_f = loss(net, c, a, r, rng)
        numeric = central_difference(numeric_f, net.params.flat)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _enr_loss(net, c, a, r, rng):
    zs = rng.normal(size=(2, net.cfg.index_dim))
    _, grads = net.loss_and_grads(c, a, r, zs)
    frozen = net.params.copy() if net.cfg.stop_gradient else None
    return grads.flat, lambda: _hand_loss(net, net.params, c, a, r, zs, frozen)


def _plain_loss(net, c, a, r, rng):
    _, grads = net.loss_and_grads(c, a, r)
    return grads.flat, lambda: net.loss_and_grads(c, a, r)[0]


def test_criterion_02_gradient_oracle():
    builders = {
        "mlp": (lambda s: MlpNetwork(4, 3, hidden_dims=(5, 4), seed=s), _plain_loss),
        "enr": (lambda s: EnrNetwork(EnrConfig(4, 3, embed_dim=5, marginal_hidden_dims=(6,),
                                               epinet_hidden_dims=(4, 3), index_dim=3), seed=s),
                _enr_loss),
        "epinet": (lambda s: EpinetMlpNetwork(EpinetWrapConfig(4, 3, base_hidden_dims=(6, 5),
                                                               epinet_hidden_dims=(4,),
                                                               index_dim=3), seed=s), _enr_loss),
        "prior_member": (lambda s: PriorMlpNetwork(4, 3, hidden_dims=(5, 4), prior_scale=0.3,
                                                   seed=s), _plain_loss),
    }
    errors = {name: _fd_points(make, loss) for name, (make, loss) in builders.items()}
    ok = all(e < 1e-4 for e in errors.values())
    record(2, ok, "max relative error over 20 points: "
           + " ".join(f"{k}={v:.2e}" for k, v in errors.items()))


# --- 3. Sherman-Morrison --------------------------------------------------------


def test_criterion_03_sherman_morrison():
    errors = {}
    for dim in (5, 32, 64):
        rng = np.random.default_rng(dim)
        st = LinearBanditState(dim, lam=1.0, reinvert_every=0)
        for _ in range(1000):
            st.update(rng.normal(size=dim), rng.random())
        errors[dim] = float(np.linalg.norm(st.gamma_inv - np.linalg.inv(st.gamma)))
    record(3, all(e < 1e-8 for e in errors.values()),
           "Frobenius error after 1000 updates: "
           + " ".join(f"d={d}:{e:.2e}" for d, e in errors.items()))


# --- 4. reduction to linear bandits -----------------------------------------------


def test_criterion_04_reduction():
    rng = np.random.default_rng(4)
    dc, da = 3, 2
    kw = dict(hidden_dims=(), output_head="identity", alpha=0.8, seed=0)
    nlin = make_agent("neural_linucb", dc, da, **kw)
    nucb = make_agent("neural_ucb_ll", dc, da, width_scale=False, **kw)
    nts = make_agent("neural_ts_ll", dc, da, width_scale=False, **kw)
    lin = make_agent("linucb", dc, da, alpha=0.8, shared=True)
    lts = make_agent("linear_ts", dc, da, alpha=0.8)
    score_err = var_err = 0.0
    for _ in range(100):
        w = lin._state(0).mean()
        for ag in (nlin, nucb, nts):
            ag.network.params["f.W0"] = w[:, None]
            ag.network.params["f.b0"] = 0.0
        c, a = rng.normal(size=dc), rng.normal(size=(7, da))
        ref = lin.scores(c, a)
        score_err = max(score_err, np.max(np.abs(nlin.scores(c, a) - ref)),
                        np.max(np.abs(nucb.scores(c, a) - ref)))
        g, _ = nts.features(c, a)
        var_err = max(var_err, np.max(np.abs(nts.variance(g) - lts.state.quad(lin.joint(c, a)))))
        k = int(np.argmax(ref))
        r = float(rng.random() < 0.5)
        for ag in (nlin, nucb, nts, lin, lts):
            ag.observe(c, a[k], k, r)
    record(4, score_err <= 1e-10 and var_err <= 1e-10,
           f"max score gap {score_err:.2e}, max TS variance gap {var_err:.2e} over 100 steps")


# --- 5. full vs last-layer gradient ------------------------------------------------


def test_criterion_05_full_vs_last_layer():
    rng = np.random.default_rng(5)
    kw = dict(hidden_dims=(32, 16), seed=3, alpha=0.5)
    last = make_agent("neural_ucb_ll", 4, 3, **kw)
    full = make_agent("neural_ucb_ll", 4, 3, blocks=("f.W2",), **kw)
    size = last.network.params.size
    gap = 0.0
    for _ in range(100):
        c, a = rng.normal(size=4), rng.normal(size=(5, 3))
        g1, _ = last.features(c, a)
        g2, _ = full.features(c, a)
        gap = max(gap, np.max(np.abs(g1 - g2)),
                  np.max(np.abs(full.scores(c, a) - last.scores(c, a))))
        k = last.select(c, a, rng)
        for ag in (last, full):
            ag.observe(c, a[k], k, float(rng.random() < 0.5))
    record(5, size <= 2000 and gap <= 1e-10,
           f"{size} parameters, max feature/score gap {gap:.2e}")


# --- 6. stop-gradient and frozen priors ----------------------------------------------


def test_criterion_06_stop_gradient_and_priors():
    rng = np.random.default_rng(6)
    leaks = 0
    for net in (EnrNetwork(EnrConfig(4, 3, embed_dim=5, marginal_hidden_dims=(6,),
                                     epinet_hidden_dims=(4,), index_dim=3), seed=0),
                EpinetMlpNetwork(EpinetWrapConfig(4, 3, base_hidden_dims=(6, 5),
                                                  epinet_hidden_dims=(4,), index_dim=3), seed=0)):
        for _ in range(20):
            net.params.flat[:] += 0.3 * rng.normal(size=net.params.size)
            c, a = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
            r = (rng.random(6) < 0.5).astype(float)
            _, grads = net.loss_and_grads(c, a, r, rng.normal(size=(4, 3)),
                                          include_marginal=False)
            leaks += sum(int(np.any(grads[n] != 0.0)) for n in net.params.names
                         if not n.startswith("g."))

    changed = []
    env = harness.derive_rngs(0)["env"]
    for name, kw in (("enr", dict(embed_dim=6, marginal_hidden_dims=(8,), epinet_hidden_dims=(4,))),
                     ("epinet_mlp", dict(base_hidden_dims=(8, 6))),
                     ("ensemble", dict(hidden_dims=(8,), n_members=3))):
        agent = make_agent(name, 6, 5, seed=0, **kw)
        priors = ([m.prior for m in agent.members] if name == "ensemble"
                  else [agent.network.prior])
        before = [p.flat.tobytes() for p in priors]
        harness.run_episode(agent, SyntheticEnv(SyntheticEnvSpec(6, 5, 8), seed=env), 200)
        if [p.flat.tobytes() for p in priors] != before:
            changed.append(name)
    record(6, leaks == 0 and not changed,
           f"non-zero base gradients from the epinet branch: {leaks}; "
           f"priors changed by training: {changed or 'none'}")


# --- 7. zero index ------------------------------------------------------------------


def test_criterion_07_zero_index():
    rng = np.random.default_rng(7)
    net = EnrNetwork(EnrConfig(100, 100, embed_dim=50, marginal_hidden_dims=(200, 100),
                               epinet_hidden_dims=(50, 20), index_dim=5), seed=0)
    net.params.flat[:] += 0.1 * rng.normal(size=net.params.size)
    c, a = rng.normal(size=(1000, 100)), rng.normal(size=(1000, 100))
    gap = float(np.max(np.abs(net.logits(c, a, np.zeros(5)) - net.marginal_logits(c, a))))
    record(7, gap <= 1e-12, f"max logit gap on 1000 inputs {gap:.2e}")


# --- 8. ablation shapes -----------------------------------------------------------


def _ablation(key, value):
    overrides = [_seeds_override(10)]
    if key:
        overrides.append(f"agent.enr.{key}={value}")
    return _regret(load_config("toy_ablation", overrides))


def test_criterion_08_ablations():
    base = _ablation(None, None)
    no_ln = _ablation("layer_norm", "false")
    widths = {w: (base if w == 5 else _ablation("index_dim", w)) for w in (2, 5, 10, 30)}
    scales = {s: (base if s == 0.3 else _ablation("prior_scale", s)) for s in (0.1, 0.3, 0.5, 0.9)}

    def within_one_se(results, chosen):
        best = min(results, key=lambda k: results[k][0])
        return results[chosen][0] <= results[best][0] + results[best][1], best

    ok_w, best_w = within_one_se(widths, 5)
    ok_s, best_s = within_one_se(scales, 0.3)
    parts = {"layer_norm": base[0] < no_ln[0], "index_width": ok_w, "prior_scale": ok_s}

    def fmt(d):
        return " ".join(f"{k}:{m:.4f}±{se:.4f}" for k, (m, se) in d.items())

    failed = [k for k, v in parts.items() if not v]
    record(8, not failed,
           f"LN {base[0]:.4f}±{base[1]:.4f} vs no-LN {no_ln[0]:.4f}±{no_ln[1]:.4f}; "
           f"widths {fmt(widths)} (best {best_w}); scales {fmt(scales)} (best {best_s}); "
           f"failed parts: {failed or 'none'}")


# --- 9. generated impression log ----------------------------------------------------


def test_criterion_09_impression_log():
    runs, window = {}, None
    for name in ("enr", "eps_greedy"):
        cfg = load_config("mind_like", [f"agent.name={name}", _seeds_override(10)])
        window = cfg.experiment["window"]
        runs[name] = list(_seed_runs(cfg).values())
    final = {n: harness.mean_stderr([m.final_windowed_average(window) for m in r])[:2]
             for n, r in runs.items()}
    (e_m, e_se), (g_m, g_se) = final["enr"], final["eps_greedy"]
    separated = e_m - e_se > g_m + g_se
    steps = runs["enr"][0].steps
    reach = harness.interactions_to_reach(runs["enr"], g_m, window)
    fast = reach is not None and reach <= 0.7 * steps
    record(9, separated and fast,
           f"final windowed CTR enr {e_m:.4f}±{e_se:.4f} vs eps_greedy {g_m:.4f}±{g_se:.4f}; "
           f"enr reaches {g_m:.4f} after {reach} of {steps} interactions")


# --- 10. compute trade-offs ---------------------------------------------------------


def test_criterion_10_compute_ratios():
    cfg = load_config("toy_comparison")
    agents = ("enr", "eps_greedy", "neural_ts_ll", "neural_linucb", "ensemble")
    rows = cli.bench_rows(agents, 100, 100, 1000, 32, 30, cfg.per_agent)
    infer = {r["agent"]: r["infer_s_per_action"] for r in rows}
    train = {r["agent"]: r["train_s_per_batch"] for r in rows}
    ratios = {
        "enr/eps_greedy infer <= 2": (infer["enr"] / infer["eps_greedy"], lambda x: x <= 2),
        "neural_ts_ll/enr infer >= 5": (infer["neural_ts_ll"] / infer["enr"], lambda x: x >= 5),
        "neural_linucb/enr infer >= 2": (infer["neural_linucb"] / infer["enr"], lambda x: x >= 2),
        "ensemble/enr train >= 3": (train["ensemble"] / train["enr"], lambda x: x >= 3),
    }
    failed = [k for k, (v, test) in ratios.items() if not test(v)]
    record(10, not failed, " ".join(f"[{k}: {v:.2f}]" for k, (v, _) in ratios.items())
           + f"; failed: {failed or 'none'}")


# --- 11. determinism --------------------------------------------------------------


def test_criterion_11_determinism(tmp_path):
    mismatched = []
    for config in ("toy_comparison", "mind_like", "ratings_like"):
        for workers, sub in ((1, "a"), (1, "b"), (2, "c")):
            code = cli.main(["sweep", "--config", config, "--set", "steps=150", "--set", "seeds=2",
                             "--set", "eval_steps=0", "--out", str(tmp_path / sub),
                             "--workers", str(workers)])
            assert code == 0
        ref = tmp_path / "a"
        for path in sorted(ref.rglob("metrics.csv")):
            rel = path.relative_to(ref)
            for sub in ("b", "c"):
                if not filecmp.cmp(path, tmp_path / sub / rel, shallow=False):
                    mismatched.append(f"{sub}/{rel}")
    files = len(list((tmp_path / "a").rglob("metrics.csv")))
    record(11, files > 0 and not mismatched,
           f"{files} metrics files compared across serial, repeat and parallel runs; "
           f"mismatches: {mismatched or 'none'}")
