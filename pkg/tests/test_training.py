import numpy as np
import pytest

from weightstego.builder import GraphBuilder
from weightstego.engine import forward
from weightstego.errors import DivergedLoss, NonDifferentiableNode, ShapeMismatch
from weightstego.mtar import GraphNode
from weightstego.training import (
    SIGMOID_BCE,
    SOFTMAX_CE,
    TrainConfig,
    backprop,
    gradients,
    predict_top1,
    train,
)


def f64_loss(m, x, y, loss):
    """Independent f64 loss evaluation used by the finite-difference oracle."""
    trace = forward(m, x, np.float64)
    out = trace[m.output].astype(np.float64)
    if loss == SOFTMAX_CE:
        picked = out[np.arange(len(x)), np.asarray(y).astype(int)]
        return float(-np.log(picked).mean())
    y = np.asarray(y, dtype=np.float64).reshape(out.shape)
    return float(-(y * np.log(out) + (1 - y) * np.log(1 - out)).mean())


def finite_difference_check(m, x, y, loss, h=1e-3, tol=1e-4):
    """Central differences in f64 with the actually-applied f32 step."""
    _, grads = backprop(m, x, y, loss, dtype=np.float64)
    assert grads, "no gradients produced"
    for tname, analytic in grads.items():
        vals = m.tensor_values(tname).copy().reshape(-1)
        fd = np.zeros(vals.size)
        for i in range(vals.size):
            up, down = vals.copy(), vals.copy()
            up[i] = np.float32(vals[i] + h)
            down[i] = np.float32(vals[i] - h)
            shape = m.tensor(tname).shape
            lp = f64_loss(m.replace_tensor_values({tname: up.reshape(shape)}), x, y, loss)
            lm = f64_loss(m.replace_tensor_values({tname: down.reshape(shape)}), x, y, loss)
            fd[i] = (lp - lm) / (float(up[i]) - float(down[i]))
        ga = analytic.reshape(-1)
        rel = np.linalg.norm(ga - fd) / (np.linalg.norm(ga) + np.linalg.norm(fd) + 1e-12)
        assert rel < tol, f"{tname}: relative error {rel}"


def small_conv_net(seed):
    g = GraphBuilder(seed=seed)
    x = g.input((6, 6, 2))
    x = g.conv2d(x, 2, 3, 3, stride=2, padding="same")
    x = g.relu(x)
    x = g.maxpool(x, 2)
    x = g.flatten(x)
    x = g.dense(x, 3, 3)
    x = g.softmax(x)
    return g.build(x)


def small_detector_net(seed):
    g = GraphBuilder(seed=seed)
    x = g.input((7, 7, 1))
    x = g.conv2d(x, 1, 4, 3, padding="valid")
    x = g.relu(x)
    x = g.global_maxpool(x)
    x = g.dense(x, 4, 1)
    x = g.sigmoid(x)
    return g.build(x)


def hidden_sigmoid_net(seed):
    g = GraphBuilder(seed=seed)
    x = g.input((5,))
    x = g.dense(x, 5, 6)
    x = g.sigmoid(x)
    x = g.dense(x, 6, 3)
    x = g.softmax(x)
    return g.build(x)


def test_gradients_match_finite_differences_conv_pool_dense():
    rng = np.random.default_rng(0)
    m = small_conv_net(3)
    finite_difference_check(m, rng.random((4, 6, 6, 2)), rng.integers(0, 3, 4),
                            SOFTMAX_CE)


def test_gradients_match_finite_differences_gmp_sigmoid():
    rng = np.random.default_rng(1)
    m = small_detector_net(5)
    finite_difference_check(m, rng.random((5, 7, 7, 1)), rng.integers(0, 2, 5),
                            SIGMOID_BCE)


def test_gradients_match_finite_differences_hidden_sigmoid():
    rng = np.random.default_rng(2)
    m = hidden_sigmoid_net(7)
    finite_difference_check(m, rng.random((6, 5)), rng.integers(0, 3, 6),
                            SOFTMAX_CE)


def test_zero_weight_dense_bias_gradient_closed_form():
    # softmax of zero logits is uniform; bias grad = mean(uniform - onehot)
    k, batch = 4, 8
    g = GraphBuilder(seed=0)
    x = g.input((5,))
    x = g.dense(x, 5, k, name="fc", weights=np.zeros((k, 5), np.float32))
    x = g.softmax(x)
    m = g.build(x)
    rng = np.random.default_rng(3)
    xb = rng.random((batch, 5)).astype(np.float32)
    yb = np.array([0, 1, 2, 3] * 2)
    grads = gradients(m, xb, yb)
    onehot = np.zeros((batch, k))
    onehot[np.arange(batch), yb] = 1.0
    expected = (np.full((batch, k), 1.0 / k) - onehot).mean(axis=0)
    assert np.allclose(grads["fc.b"], expected, atol=1e-7)


def test_duplicated_sample_doubles_its_contribution():
    m = hidden_sigmoid_net(9)
    rng = np.random.default_rng(4)
    xb = rng.random((3, 5)).astype(np.float32)
    yb = np.array([0, 1, 2])
    xdup = np.concatenate([xb, xb[:1]])
    ydup = np.concatenate([yb, yb[:1]])
    g_all = gradients(m, xb, yb, dtype=np.float64)
    g_dup = gradients(m, xdup, ydup, dtype=np.float64)
    per_sample = [gradients(m, xb[i:i + 1], yb[i:i + 1], dtype=np.float64)
                  for i in range(3)]
    for name in g_all:
        manual = (2 * per_sample[0][name] + per_sample[1][name]
                  + per_sample[2][name]) / 4.0
        assert np.allclose(g_dup[name], manual, atol=1e-10)


def test_train_linearly_separable_points():
    rng = np.random.default_rng(5)
    n = 100
    x = np.concatenate([rng.normal((-1, -1), 0.3, (n, 2)),
                        rng.normal((1, 1), 0.3, (n, 2))]).astype(np.float32)
    y = np.array([0] * n + [1] * n)
    g = GraphBuilder(seed=1)
    h = g.input((2,))
    h = g.dense(h, 2, 1)
    h = g.sigmoid(h)
    m = g.build(h)
    trained = train(m, x, y, TrainConfig(0.5, 200, 32, seed=2, loss=SIGMOID_BCE))
    scores = forward(trained, x)[trained.output].reshape(-1)
    assert ((scores > 0.5).astype(int) == y).mean() >= 0.99


def test_zero_learning_rate_is_bit_identical():
    m = hidden_sigmoid_net(11)
    rng = np.random.default_rng(6)
    x = rng.random((20, 5)).astype(np.float32)
    y = rng.integers(0, 3, 20)
    out = train(m, x, y, TrainConfig(0.0, 3, 10, seed=0))
    assert out.data == m.data


def test_same_seed_trains_bit_identically():
    m = small_conv_net(13)
    rng = np.random.default_rng(7)
    x = rng.random((30, 6, 6, 2)).astype(np.float32)
    y = rng.integers(0, 3, 30)
    cfg = TrainConfig(0.1, 3, 8, seed=42)
    assert train(m, x, y, cfg).data == train(m, x, y, cfg).data


def test_batch_size_larger_than_dataset_rejected():
    m = hidden_sigmoid_net(1)
    x = np.zeros((4, 5), dtype=np.float32)
    with pytest.raises(ValueError):
        train(m, x, np.zeros(4, dtype=int), TrainConfig(0.1, 1, 8, seed=0))


def test_nondifferentiable_node_rejected():
    g = GraphBuilder(seed=0)
    x = g.input((3,))
    g.add_node(GraphNode("gt", "GreaterConst", ("input",), attrs={"threshold": 0.0}))
    g.add_node(GraphNode("cast", "CastF32", ("gt",)))
    d = g.dense("cast", 3, 2)
    s = g.softmax(d)
    m = g.build(s)
    with pytest.raises(NonDifferentiableNode):
        gradients(m, np.zeros((2, 3), np.float32), np.array([0, 1]))


def test_diverged_loss_raises():
    # lr large enough that weights overflow f32 and the loss goes NaN
    m = hidden_sigmoid_net(15)
    rng = np.random.default_rng(8)
    x = (rng.random((16, 5)) * 1e3).astype(np.float32)
    y = rng.integers(0, 3, 16)
    with pytest.raises(DivergedLoss):
        train(m, x, y, TrainConfig(1e38, 30, 8, seed=0))


# --- predict_top1 -----------------------------------------------------------

def constant_onehot_model(k=3, hot=0):
    g = GraphBuilder(seed=0)
    x = g.input((2,))
    w = np.zeros((k, 2), np.float32)
    b = np.full(k, -10.0, np.float32)
    b[hot] = 10.0
    x = g.dense(x, 2, k, weights=w, bias=b)
    x = g.softmax(x)
    return g.build(x)


def test_predict_top1_constant_predictor():
    m = constant_onehot_model(hot=0)
    x = np.random.default_rng(0).random((10, 2)).astype(np.float32)
    assert predict_top1(m, x, np.zeros(10, dtype=int)) == 1.0
    assert predict_top1(m, x, np.ones(10, dtype=int)) == 0.0


def test_predict_top1_matches_per_sample_argmax_loop():
    m = hidden_sigmoid_net(21)
    rng = np.random.default_rng(9)
    x = rng.random((10, 5)).astype(np.float32)
    y = rng.integers(0, 3, 10)
    hits = 0
    for i in range(10):  # brute-force per-sample oracle
        out = forward(m, x[i:i + 1])[m.output][0]
        best, best_v = 0, out[0]
        for j in range(1, len(out)):
            if out[j] > best_v:
                best, best_v = j, out[j]
        hits += int(best == y[i])
    assert predict_top1(m, x, y) == hits / 10


def test_predict_top1_rejects_out_of_range_labels():
    m = constant_onehot_model()
    x = np.zeros((4, 2), dtype=np.float32)
    with pytest.raises(ShapeMismatch):
        predict_top1(m, x, np.array([0, 1, 2, 3]))
