import io

import numpy as np
import pytest

from enr_bandit import nn
from conftest import central_difference, rel_error


def test_glorot_unit_layer_bound_and_zero_bias():
    p = nn.glorot_init(nn.MlpSpec(1, (), 1), seed=3)
    assert abs(p["W0"][0, 0]) <= np.sqrt(3.0)
    assert p["b0"][0] == 0.0


def test_glorot_deterministic():
    spec = nn.MlpSpec(7, (5, 3), 2)
    a, b = nn.glorot_init(spec, 11), nn.glorot_init(spec, 11)
    assert a.flat.tobytes() == b.flat.tobytes()


def test_glorot_bound_exact_and_variance():
    spec = nn.MlpSpec(100, (), 100)
    p = nn.glorot_init(spec, 0)
    limit = np.sqrt(6.0 / 200)
    w = p["W0"]
    assert np.all(np.abs(w) <= limit)
    # Monte-Carlo: uniform(-l, l) has variance l^2 / 3 = 2 / (fan_in + fan_out)
    assert abs(w.var() - 2.0 / 200) / (2.0 / 200) < 0.10


def test_paramset_views_alias_flat():
    spec = nn.MlpSpec(3, (4,), 2)
    p = nn.glorot_init(spec, 0)
    assert len(p) == spec.n_params() == 3 * 4 + 4 + 4 * 2 + 2
    p["W1"][0, 0] = 42.0
    assert 42.0 in p.flat
    p.flat[:] = 0.0
    assert np.all(p["W0"] == 0.0)


def test_layer_norm_constant_input_is_zero():
    out, _ = nn.layer_norm(np.full(6, 3.5), np.ones(6), np.zeros(6))
    np.testing.assert_array_equal(out, np.zeros(6))


def test_layer_norm_standardized_input_unchanged():
    out, _ = nn.layer_norm(np.array([-1.0, 1.0]), np.ones(2), np.zeros(2), eps=1e-15)
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-12)


def test_layer_norm_moments(rng):
    x = rng.normal(3.0, 7.0, size=(50, 40))
    out, _ = nn.layer_norm(x, np.ones(40), np.zeros(40), eps=1e-12)
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-6)


def test_layer_norm_shape_mismatch():
    with pytest.raises(ValueError):
        nn.layer_norm(np.ones(3), np.ones(4), np.zeros(4))


def test_layer_norm_backward_matches_finite_differences(rng):
    x = rng.normal(size=(3, 6))
    gain, bias = rng.normal(size=6), rng.normal(size=6)
    up = rng.normal(size=(3, 6))
    _, cache = nn.layer_norm(x, gain, bias)
    dx, dg, db = nn.layer_norm_backward(cache, gain, up)

    def f():
        return float((nn.layer_norm(x, gain, bias)[0] * up).sum())

    for analytic, arr in ((dx, x), (dg, gain), (db, bias)):
        numeric = central_difference(f, arr.reshape(-1))
        assert rel_error(analytic.ravel(), numeric) < 1e-6


def test_forward_identity_network():
    spec = nn.MlpSpec(4, (), 4)
    p = nn.ParamSet(spec.block_shapes())
    p["W0"] = np.eye(4)
    x = np.array([1.0, -2.0, 3.0, 0.5])
    out, _ = nn.forward(spec, p, x)
    np.testing.assert_array_equal(out, x)


def test_sigmoid_head_at_zero_logit():
    spec = nn.MlpSpec(2, (), 1, output_activation="sigmoid")
    p = nn.ParamSet(spec.block_shapes())
    out, _ = nn.forward(spec, p, np.array([0.3, -0.2]))
    assert out[0] == 0.5


def test_forward_backward_pure(rng):
    spec = nn.MlpSpec(5, (8, 4), 2)
    p = nn.glorot_init(spec, 1)
    x = rng.normal(size=(6, 5))
    up = rng.normal(size=(6, 2))
    o1, t1 = nn.forward(spec, p, x)
    o2, t2 = nn.forward(spec, p, x)
    assert o1.tobytes() == o2.tobytes()
    g1, i1 = nn.backward(t1, up)
    g2, i2 = nn.backward(t2, up)
    assert g1.flat.tobytes() == g2.flat.tobytes() and i1.tobytes() == i2.tobytes()


def test_forward_dimension_mismatch():
    spec = nn.MlpSpec(3, (), 1)
    with pytest.raises(ValueError):
        nn.forward(spec, nn.glorot_init(spec, 0), np.ones(4))


def test_linear_layer_gradient_is_outer_product(rng):
    spec = nn.MlpSpec(3, (), 2)
    p = nn.glorot_init(spec, 0)
    x, up = rng.normal(size=3), rng.normal(size=2)
    _, tape = nn.forward(spec, p, x)
    grads, dx = nn.backward(tape, up)
    np.testing.assert_allclose(grads["W0"], np.outer(x, up))
    np.testing.assert_allclose(dx, p["W0"] @ up)


def test_relu_blocks_gradient_for_negative_preactivation():
    spec = nn.MlpSpec(1, (1,), 1)
    p = nn.ParamSet(spec.block_shapes())
    p["W0"] = -1.0
    p["W1"] = 1.0
    _, tape = nn.forward(spec, p, np.array([2.0]))
    grads, dx = nn.backward(tape, np.array([1.0]))
    assert grads["W0"][0, 0] == 0.0 and dx[0] == 0.0


def test_stale_tape_rejected():
    spec = nn.MlpSpec(2, (), 1)
    p = nn.glorot_init(spec, 0)
    _, tape = nn.forward(spec, p, np.ones(2))
    nn.Adam(p).step(p, p.zeros_like())
    with pytest.raises(RuntimeError):
        nn.backward(tape, np.ones(1))


@pytest.mark.parametrize("head", ["identity", "sigmoid"])
@pytest.mark.parametrize("hidden", [(), (6,), (7, 5)])
def test_mlp_gradients_match_finite_differences(hidden, head):
    rng = np.random.default_rng(len(hidden))
    spec = nn.MlpSpec(4, hidden, 2, output_activation=head)
    for point in range(20):
        p = nn.glorot_init(spec, rng)
        p.flat[:] += 0.1 * rng.normal(size=p.size)
        x = rng.normal(size=(3, 4))
        up = rng.normal(size=(3, 2))
        _, tape = nn.forward(spec, p, x)
        grads, dx = nn.backward(tape, up)

        def f():
            return float((nn.forward(spec, p, x)[0] * up).sum())

        assert rel_error(grads.flat, central_difference(f, p.flat)) < 1e-4
        assert rel_error(dx.ravel(), central_difference(f, x.reshape(-1))) < 1e-4


def test_loss_values():
    assert nn.loss("mse", 2.0, 2.0) == (0.0, 0.0)
    value, grad = nn.loss("bce", 0.5, 1)
    assert value == pytest.approx(np.log(2.0), abs=1e-12)
    assert grad == pytest.approx(-2.0, abs=1e-12)


def test_bce_gradient_finite_difference():
    h = 1e-6
    _, grad = nn.loss("bce", 0.3, 0)
    numeric = (nn.loss("bce", 0.3 + h, 0)[0] - nn.loss("bce", 0.3 - h, 0)[0]) / (2 * h)
    assert abs(grad - numeric) / abs(numeric) < 1e-6


def test_bce_rejects_bad_target():
    with pytest.raises(ValueError):
        nn.loss("bce", 0.5, 2)


def test_bce_with_logits_stable_for_large_logits():
    v, d = nn.bce_with_logits(np.array([800.0, -800.0]), np.array([0.0, 1.0]))
    np.testing.assert_allclose(v, [800.0, 800.0])
    np.testing.assert_allclose(d, [1.0, -1.0])


def test_adam_zero_gradient_keeps_params():
    spec = nn.MlpSpec(3, (2,), 1)
    p = nn.glorot_init(spec, 0)
    before = p.flat.copy()
    nn.Adam(p).step(p, p.zeros_like())
    np.testing.assert_array_equal(p.flat, before)


def test_adam_constant_gradient_step_tends_to_learning_rate():
    p = nn.ParamSet([("w", (3,))])
    opt = nn.Adam(p, learning_rate=0.01)
    g = p.zeros_like()
    g.flat[:] = [0.5, -2.0, 1e-3]
    for _ in range(5000):
        prev = p.flat.copy()
        opt.step(p, g)
    np.testing.assert_allclose(p.flat - prev, -0.01 * np.sign(g.flat), rtol=1e-3)


def test_adam_single_step_matches_hand_computation():
    p = nn.ParamSet([("w", (2,))], np.array([1.0, -1.0]))
    opt = nn.Adam(p, learning_rate=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    opt.m[:] = [0.2, -0.1]
    opt.v[:] = [0.04, 0.01]
    opt.step_count = 4
    g = np.array([0.3, 0.5])
    opt.step(p, g)
    m = 0.9 * np.array([0.2, -0.1]) + 0.1 * g
    v = 0.999 * np.array([0.04, 0.01]) + 0.001 * g ** 2
    m_hat, v_hat = m / (1 - 0.9 ** 5), v / (1 - 0.999 ** 5)
    expected = np.array([1.0, -1.0]) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p.flat, expected, rtol=0, atol=1e-14)
    np.testing.assert_allclose(opt.m, m)


def test_adam_shape_mismatch():
    p = nn.ParamSet([("w", (2,))])
    with pytest.raises(ValueError):
        nn.Adam(p).step(p, np.zeros(3))


def test_paramset_round_trip(tmp_path):
    spec = nn.MlpSpec(4, (3,), 2)
    p = nn.glorot_init(spec, 5, prefix="f.")
    path = tmp_path / "p.bin"
    nn.save_params(p, path)
    q = nn.load_params(path)
    assert q.shapes == p.shapes
    assert q.flat.tobytes() == p.flat.tobytes()
    buf = io.BytesIO()
    nn.save_params(p, buf)
    assert buf.getvalue() == path.read_bytes()
    assert buf.getvalue().startswith(b"PARAMSET v1\n")


def test_invalid_spec():
    with pytest.raises(ValueError):
        nn.MlpSpec(0, (), 1)
    with pytest.raises(ValueError):
        nn.MlpSpec(2, (), 1, output_activation="tanh")
