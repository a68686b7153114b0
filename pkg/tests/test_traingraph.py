import numpy as np
import pytest

from intquant.traingraph.engine import backward, bn_update_stats, forward
from intquant.traingraph.gradcheck import check_gradients
from intquant.traingraph.graph import GraphBuilder, GraphError, infer_shapes, set_bits
from intquant.quantcore import quantize_weight, WtQuantizer
from intquant.traingraph.train import (
    Dataset,
    TrainConfig,
    TrainingError,
    evaluate,
    init_quantized_from_fp,
    sgd_step,
    train,
)
from intquant.traingraph.zoo import linear_classifier, residual_block_net, two_conv_net


def _identity_conv_net(shape=(1, 4, 4)):
    b = GraphBuilder(shape, np.random.default_rng(0))
    x = b.conv(0, "c", 1, k=1)
    x = b.relu(b.bn(x, "bn"))
    g = b.build([x])
    g.params["c.w"][...] = 1.0
    eps = g.nodes[2].attrs["eps"]
    g.state["bn.var"][...] = 1.0 - eps
    return g


def test_identity_conv_is_relu():
    g = _identity_conv_net()
    x = np.random.default_rng(1).normal(size=(3, 1, 4, 4))
    _, (out,) = forward(g, x)
    np.testing.assert_allclose(out, np.maximum(x, 0), atol=1e-15)


def test_zero_weight_conv_outputs_zero():
    g = _identity_conv_net()
    g.params["c.w"][...] = 0.0
    g.state["bn.var"][...] = 1.0
    x = np.random.default_rng(1).normal(size=(2, 1, 4, 4))
    cache, _ = forward(g, x)
    assert not cache.values[1].any()


def test_forward_deterministic_and_eval_pure():
    g = two_conv_net(seed=3)
    x = np.random.default_rng(0).uniform(size=(5, 1, 8, 8))
    _, a = forward(g, x)
    _, b = forward(g, x)
    np.testing.assert_array_equal(a[0], b[0])
    g2 = two_conv_net(seed=3)
    _, c = forward(g2, x)
    np.testing.assert_array_equal(a[0], c[0])


def test_forward_shape_and_level_errors():
    g = two_conv_net()
    with pytest.raises(GraphError, match="input shape"):
        forward(g, np.zeros((1, 1, 4, 4)))
    with pytest.raises(GraphError, match="level"):
        forward(g, np.zeros((1, 1, 8, 8)), level=3)


def test_backward_requires_cache():
    with pytest.raises(GraphError, match="cache"):
        backward(two_conv_net(), None, [None])


def test_eval_bn_matches_direct_formula():
    g = two_conv_net(seed=1)
    rng = np.random.default_rng(4)
    for k in ("bn1", "bn2"):
        c = g.params[k + ".gamma"].shape[0]
        g.params[k + ".gamma"] = rng.uniform(0.5, 2, c)
        g.params[k + ".beta"] = rng.normal(size=c)
        g.state[k + ".mean"] = rng.normal(size=c)
        g.state[k + ".var"] = rng.uniform(0.1, 3, c)
    x = rng.uniform(size=(4, 1, 8, 8))
    cache, _ = forward(g, x)
    bn_idx = next(i for i, n in enumerate(g.nodes) if n.name == "bn1")
    xin = cache.values[bn_idx - 1]
    p = lambda s: s[None, :, None, None]
    direct = (xin - p(g.state["bn1.mean"])) / np.sqrt(p(g.state["bn1.var"]) + 1e-5) * p(
        g.params["bn1.gamma"]
    ) + p(g.params["bn1.beta"])
    np.testing.assert_allclose(cache.values[bn_idx], direct, rtol=1e-14, atol=1e-14)


def test_linear_quadratic_loss_gradient():
    g = linear_classifier(3, 1, seed=0)
    x = np.array([[0.5, -1.0, 2.0]])
    y = 0.7
    w = g.params["fc.w"][0]
    cache, (out,) = forward(g, x[:, :, None, None])
    pred = out[0, 0, 0, 0]
    grads = backward(g, cache, [np.full_like(out, 2 * (pred - y))])
    np.testing.assert_allclose(grads["fc.w"][0], 2 * (w @ x[0] - y) * x[0], atol=1e-6)


def test_clipped_high_activation_gets_zero_gradient():
    b = GraphBuilder((1, 1, 1), np.random.default_rng(0))
    g = b.build([b.act_quant(0, "q")])
    set_bits(g, 2)
    g.params["nu.q"] = np.array(1.0)
    x = np.array([[[[1.7]]], [[[0.4]]]])
    cache, (out,) = forward(g, x)
    grads = backward(g, cache, [np.ones_like(out)], nu_grad_scale=False)
    # hand check: d/dnu = 1 (clipped) + (1/3 - 0.4) (in range)
    assert grads["nu.q"] == pytest.approx(1 + 1 / 3 - 0.4)


def _gradcheck_batch(seed=0, n=6):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n, 1, 8, 8)), rng.integers(0, 3, n)


@pytest.mark.parametrize("quant", [False, True])
def test_two_conv_gradients_match_finite_differences(quant):
    g = two_conv_net(seed=5)
    x, y = _gradcheck_batch()
    if quant:
        g = init_quantized_from_fp(g, 2, x)
    res = check_gradients(g, x, y, per_key=6, seed=1)
    assert res.pass_rate >= 0.99, list(zip(res.keys, res.analytic, res.numeric))


def test_residual_net_gradients_match_finite_differences():
    g = residual_block_net(seed=2)
    x, y = _gradcheck_batch(3)
    g = init_quantized_from_fp(g, 3, x)
    res = check_gradients(g, x, y, per_key=4, seed=2)
    assert res.pass_rate >= 0.99, list(zip(res.keys, res.analytic, res.numeric))


def test_sgd_step_examples():
    p = {"a.w": np.array([1.0])}
    out, v = sgd_step(p, {"a.w": np.array([0.0])}, {}, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert out["a.w"][0] == 1.0 and v["a.w"][0] == 0.0
    out, _ = sgd_step(p, {"a.w": np.array([1.0])}, {}, lr=0.1, momentum=0.0)
    assert out["a.w"][0] == pytest.approx(0.9)
    p1, v1 = sgd_step(p, {"a.w": np.array([1.0])}, {}, lr=0.1, momentum=0.9)
    p2, _ = sgd_step(p1, {"a.w": np.array([1.0])}, v1, lr=0.1, momentum=0.9)
    assert p2["a.w"][0] - p1["a.w"][0] == pytest.approx(-0.1 * 1.9)


def test_sgd_clamps_gamma_and_rejects_nan():
    p = {"bn.gamma": np.array([0.01])}
    out, _ = sgd_step(p, {"bn.gamma": np.array([10.0])}, {}, lr=1.0, momentum=0.0)
    assert out["bn.gamma"][0] == 1e-3
    with pytest.raises(TrainingError, match="non-finite"):
        sgd_step(p, {"bn.gamma": np.array([np.nan])}, {}, lr=1.0)


def test_bn_update_stats_examples():
    m, v = bn_update_stats(np.array([0.0]), np.array([1.0]), np.array([2.0]), np.array([3.0]), 1.0)
    assert (m[0], v[0]) == (2.0, 3.0)
    m, v = bn_update_stats(np.array([0.5]), np.array([1.0]), np.array([2.0]), np.array([3.0]), 0.0)
    assert (m[0], v[0]) == (0.5, 1.0)
    m, _ = bn_update_stats(np.array([0.0]), np.array([1.0]), np.array([2.0]), np.array([1.0]), 0.1)
    assert m[0] == pytest.approx(0.2)
    with pytest.raises(GraphError):
        bn_update_stats(np.array([]), np.array([]), np.array([]), np.array([]), 0.1)


def _mlbn_pair(levels):
    """Two graphs, one with a shared BN and one with an L-level MultiLevelBN."""
    out = []
    for kind in ("shared", "multi"):
        b = GraphBuilder((1, 4, 4), np.random.default_rng(0))
        x = b.conv(0, "c", 2)
        x = b.bn(x, "bn") if kind == "shared" else b.mlbn(x, [f"bn.l{i}" for i in range(levels)])
        out.append(b.build([b.relu(x)], pyramid_levels=levels))
    return out


def test_mlbn_single_level_equals_shared_bn():
    shared, multi = _mlbn_pair(1)
    x = np.random.default_rng(0).normal(size=(4, 1, 4, 4))
    _, a = forward(shared, x, training=True)
    _, b = forward(multi, x, training=True)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(shared.state["bn.mean"], multi.state["bn.l0.mean"])
    np.testing.assert_array_equal(shared.state["bn.var"], multi.state["bn.l0.var"])


def test_mlbn_updates_only_active_level():
    _, multi = _mlbn_pair(3)
    x = np.random.default_rng(0).normal(size=(4, 1, 4, 4)) + 1.0
    forward(multi, x, training=True, level=1)
    assert np.any(multi.state["bn.l1.mean"] != 0)
    assert not np.any(multi.state["bn.l0.mean"]) and not np.any(multi.state["bn.l2.mean"])


def _separable(seed=0, n=200):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = (x @ np.array([1.0, -2.0]) > 0).astype(np.int64)
    x = x + np.where(y[:, None] == 1, 1, -1) * np.array([0.5, -1.0]) * 0.3
    return Dataset(x[:, :, None, None], y)


def test_lr_zero_leaves_params_unchanged():
    g = linear_classifier(2, 2)
    trained, _ = train(g, _separable(), TrainConfig(lr=0.0, epochs=2, weight_decay=0.0))
    for k in g.params:
        np.testing.assert_array_equal(trained.params[k], g.params[k])


def test_linear_separable_reaches_full_accuracy():
    data = _separable()
    trained, hist = train(linear_classifier(2, 2), data, TrainConfig(lr=0.5, epochs=30, batch_size=32))
    assert evaluate(trained, data)[1] == 1.0
    assert set(hist[0]) == {"epoch", "split", "loss", "accuracy"}


def test_training_is_bit_deterministic():
    rng = np.random.default_rng(0)
    data = Dataset(rng.uniform(size=(32, 1, 8, 8)), rng.integers(0, 3, 32))
    cfg = TrainConfig(lr=0.05, epochs=2, batch_size=8, seed=11)
    a, ha = train(two_conv_net(seed=1), data, cfg)
    b, hb = train(two_conv_net(seed=1), data, cfg)
    assert ha == hb
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    for k in a.state:
        assert a.state[k].tobytes() == b.state[k].tobytes()


def test_init_quantized_round_trip_within_one_step():
    fp = two_conv_net(seed=4)
    x = np.random.default_rng(0).uniform(size=(8, 1, 8, 8))
    q = init_quantized_from_fp(fp, 2, x)
    for n in q.nodes:
        if n.op == "conv":
            w = fp.params[n.attrs["weight"]]
            wq = WtQuantizer(float(q.params[n.attrs["nu"]]), n.attrs["bits"])
            _, wbar = quantize_weight(w, wq)
            inside = np.abs(w) <= wq.nu
            assert np.all(np.abs(wbar - w)[inside] <= wq.step / 2 + 1e-12)


def test_init_quantized_rejects_mismatched_checkpoint():
    fp = residual_block_net()
    with pytest.raises(GraphError, match="mismatch"):
        init_quantized_from_fp(fp, 2, np.zeros((1, 1, 8, 8)), template=two_conv_net())


def test_eight_bit_init_close_to_fp():
    rng = np.random.default_rng(0)
    fp = two_conv_net(seed=6)
    x = rng.uniform(size=(32, 1, 8, 8))
    # settle running stats to the calibration data so eval outputs are O(1)
    for _ in range(30):
        forward(fp, x, training=True)
    q = init_quantized_from_fp(fp, 8, x)
    _, (a,) = forward(fp, x)
    _, (b,) = forward(q, x)
    assert np.linalg.norm(b - a) / np.linalg.norm(a) < 0.01


def test_infer_shapes_rejects_bad_graphs():
    g = two_conv_net()
    g.nodes[2].inputs = (5,)
    with pytest.raises(GraphError):
        infer_shapes(g)
    b = GraphBuilder((1, 4, 4), np.random.default_rng(0))
    x = b.conv(0, "c", 2)
    with pytest.raises(GraphError, match="normalization"):
        b.build([b.relu(x)])


def test_non_finite_loss_aborts():
    g = linear_classifier(2, 2)
    data = _separable()
    data.x[0, 0] = np.nan
    with pytest.raises((TrainingError, ValueError)):
        train(g, data, TrainConfig(lr=0.1, epochs=1))


def _two_level_shared_bn(stats):
    b = GraphBuilder((1, 4, 4), np.random.default_rng(0))
    x = b.input_quant(0)
    c = [b.conv(x, f"c{i}", 2, weight="w") for i in range(2)]
    n = [b.bn(c[i], "bn", name=f"bn.l{i}", stats=stats) for i in range(2)]
    return b.build([b.output(b.maxpool(n[i], 4), name=f"o{i}") for i in range(2)], pyramid_levels=2)


def test_per_call_bn_normalizes_each_call_and_updates_running_stats_in_turn():
    g = _two_level_shared_bn("per_call")
    x = np.random.default_rng(1).uniform(size=(5, 1, 4, 4))
    cache, _ = forward(g, x, training=True)
    i0, i1 = [i for i, n in enumerate(g.nodes) if n.op == "bn"]
    for i in (i0, i1):
        np.testing.assert_allclose(cache.aux[i]["xhat"].mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    # two sequential EMA updates of the same key from mean 0
    m = cache.values[g.nodes[i0].inputs[0]].mean(axis=(0, 2, 3))
    np.testing.assert_allclose(g.state["bn.mean"], 0.9 * 0.1 * m + 0.1 * m)


def test_per_call_bn_gradients_match_finite_differences():
    g = _two_level_shared_bn("per_call")
    rng = np.random.default_rng(2)
    x, y = rng.uniform(size=(6, 1, 4, 4)), rng.integers(0, 2, 6)
    res = check_gradients(g, x, y, levels=np.arange(6) % 2, per_key=6, seed=3)
    assert res.pass_rate >= 0.99, list(zip(res.keys, res.analytic, res.numeric))


def test_bn_stats_mode_is_validated():
    b = GraphBuilder((1, 4, 4), np.random.default_rng(0))
    with pytest.raises(GraphError):
        b.bn(b.conv(0, "c", 2), "bn", stats="sync")
