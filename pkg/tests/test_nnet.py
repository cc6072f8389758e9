import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxengage import nnet
from ctxengage.nnet import ArrayData, Network, NetworkSpec


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def _net64(spec, in_dim, seed=0):
    return Network(spec, in_dim, dtype=np.float64, seed=seed)


# ---------------------------------------------------------------- forward


def test_zero_params_predict_output_bias(rng):
    for kind in ("recurrent", "dense"):
        net = _net64(NetworkSpec(kind=kind, layer_dims=(4, 3), top_dim=2), 5)
        for p in net.params:
            p[...] = 0
        net.out.b[...] = 0.7
        x = rng.normal(size=(6, 3, 5)) if kind == "recurrent" else rng.normal(size=(6, 5))
        np.testing.assert_array_equal(net.predict(x), np.full(6, 0.7))


def test_scalar_lstm_reference():
    layer = nnet.LSTMLayer(1, 1, np.random.default_rng(0), dtype=np.float64)
    layer.W[...] = 0.5
    layer.U[...] = 0.5
    layer.b[...] = 0.0
    h, _ = layer.forward(np.ones((1, 1, 1)), np.ones((1, 1)))
    # hand arithmetic: every gate pre-activation is 0.5*x + 0.5*h0 = 0.5
    i = f = o = _sig(0.5)
    g = math.tanh(0.5)
    c1 = f * 0.0 + i * g
    h1 = o * math.tanh(c1)
    assert abs(h[0, 0] - h1) < 1e-12


def test_fully_masked_equals_empty_history(rng):
    net = _net64(NetworkSpec(layer_dims=(6, 4), top_dim=3), 3)
    x = rng.normal(size=(4, 7, 3))
    masked = net.predict(x, np.zeros((4, 7)))
    empty = net.predict(np.zeros((4, 0, 3)), np.zeros((4, 0)))
    np.testing.assert_allclose(masked, empty, atol=1e-12)


@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 2**16))
def test_mask_invariance_padding(n_front, n_back, seed):
    r = np.random.default_rng(seed)
    net = _net64(NetworkSpec(layer_dims=(5, 3), top_dim=4), 3, seed=seed % 7)
    x = r.normal(size=(3, 4, 3))
    m = np.ones((3, 4))
    base = net.predict(x, m)
    xp = np.concatenate([r.normal(size=(3, n_front, 3)), x, r.normal(size=(3, n_back, 3))], axis=1)
    mp = np.concatenate([np.zeros((3, n_front)), m, np.zeros((3, n_back))], axis=1)
    np.testing.assert_allclose(net.predict(xp, mp), base, atol=1e-12, rtol=0)


def test_shape_error_names_shapes():
    net = Network(NetworkSpec(), 5)
    with pytest.raises(nnet.ShapeError, match=r"5.*\(2, 3, 4\)"):
        net.predict(np.zeros((2, 3, 4), dtype=np.float32))
    dense = Network(NetworkSpec(kind="dense"), 5)
    with pytest.raises(nnet.ShapeError):
        dense.predict(np.zeros((2, 4), dtype=np.float32))


def test_dropout_off_at_evaluation(rng):
    net = Network(NetworkSpec(layer_dims=(8,), dropout=0.5, recurrent_dropout=0.5), 4)
    x = rng.normal(size=(5, 6, 4)).astype(np.float32)
    np.testing.assert_array_equal(net.predict(x), net.predict(x))
    masks = net.sample_masks(5, rng)
    train_pred, _ = net.forward(x, None, masks)
    assert not np.allclose(train_pred, net.predict(x))


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(layer_dims=(32, 64))
    with pytest.raises(ValueError):
        NetworkSpec(dropout=1.0)
    with pytest.raises(ValueError):
        NetworkSpec(kind="conv")
    s = NetworkSpec(layer_dims=[64, 32])
    assert NetworkSpec.from_dict(s.to_dict()) == s


# ---------------------------------------------------------------- backward


def test_dead_input_has_zero_gradient(rng):
    net = _net64(NetworkSpec(kind="dense", layer_dims=(4,), top_dim=3), 3)
    x = rng.normal(size=(8, 3))
    x[:, 1] = 0.0
    pred, caches = net.forward(x)
    grads = net.backward(nnet.mse_loss(pred, rng.normal(size=8))[1], caches)
    assert (grads[0][1] == 0).all()


def test_masked_steps_contribute_nothing(rng):
    net = _net64(NetworkSpec(layer_dims=(4,), top_dim=3), 2)
    x = rng.normal(size=(3, 5, 2))
    m = np.ones((3, 5))
    m[:, :2] = 0
    y = rng.normal(size=3)
    pred, caches = net.forward(x, m)
    g1 = net.backward(nnet.mse_loss(pred, y)[1], caches)
    x2 = x.copy()
    x2[:, :2] = rng.normal(size=(3, 2, 2)) * 10
    pred2, caches2 = net.forward(x2, m)
    g2 = net.backward(nnet.mse_loss(pred2, y)[1], caches2)
    np.testing.assert_allclose(pred, pred2, atol=1e-12)
    for a, b in zip(g1[1:], g2[1:]):  # input weights see the padded values, everything else must agree
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_loss_scale_linearity(rng):
    net = _net64(NetworkSpec(layer_dims=(5, 3), top_dim=4), 3)
    x = rng.normal(size=(4, 6, 3))
    pred, caches = net.forward(x)
    dy = rng.normal(size=4)
    g1 = net.backward(dy, caches)
    g2 = net.backward(2 * dy, caches)
    for a, b in zip(g1, g2):
        np.testing.assert_array_equal(b, 2 * a)


@pytest.mark.parametrize("spec", [
    NetworkSpec(kind="dense", layer_dims=(6, 4), top_dim=3),
    NetworkSpec(kind="dense", layer_dims=(5,), top_dim=3, dropout=0.3),
    NetworkSpec(kind="recurrent", layer_dims=(4,), top_dim=3),
    NetworkSpec(kind="recurrent", layer_dims=(5, 3), top_dim=4),
    NetworkSpec(kind="recurrent", layer_dims=(4, 4), top_dim=2, dropout=0.3),
    NetworkSpec(kind="recurrent", layer_dims=(6, 3), top_dim=3, recurrent_dropout=0.4),
    NetworkSpec(kind="recurrent", layer_dims=(5, 4), top_dim=3, dropout=0.2, recurrent_dropout=0.5),
])
def test_gradient_check_passes(spec):
    rep = nnet.gradient_check(spec, seed=3)
    assert rep.n_probed >= 100 or rep.n_probed == sum(p.size for p in Network(spec, 4).params)
    assert rep.passed, rep


def test_gradient_check_catches_corrupted_gate():
    spec = NetworkSpec(layer_dims=(3,), top_dim=2)

    def corrupt(grads):
        H = 3
        grads[0][:, H:2 * H] *= 1.5  # input weights of the forget gate

    assert nnet.gradient_check(spec, seed=1, in_dim=2).passed
    rep = nnet.gradient_check(spec, seed=1, in_dim=2, grad_hook=corrupt)
    assert not rep.passed and rep.max_rel_error > 1e-2


# ---------------------------------------------------------------- metrics


def test_metric_hand_values():
    y, yh = [0.0, 1.0, 2.0], [0.0, 1.0, 1.0]
    assert abs(nnet.r2_score(y, yh) - 0.5) < 1e-12
    assert abs(nnet.rmse(y, yh) - math.sqrt(1 / 3)) < 1e-12
    m = nnet.metrics(np.array(y), np.array(yh))
    assert m.n == 3


def test_metric_perfect_and_mean(rng):
    y = rng.normal(size=50)
    assert nnet.r2_score(y, y) == 1.0 and nnet.rmse(y, y) == 0.0
    assert abs(nnet.r2_score(y, np.full(50, y.mean()))) < 1e-12


def test_r2_undefined():
    with pytest.raises(nnet.UndefinedR2Error):
        nnet.r2_score([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        nnet.metrics(np.array([]), np.array([]))


@given(st.floats(-5, 5).filter(lambda a: abs(a) > 0.05), st.floats(-10, 10), st.integers(0, 2**16))
def test_r2_affine_invariance_linear_probe(a, b, seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(60, 3))
    y = X @ np.array([1.0, -0.5, 0.2]) + r.normal(size=60)
    r2 = nnet.r2_score(y, nnet.fit_linear_probe(X, y)(X))
    y2 = a * y + b
    r2b = nnet.r2_score(y2, nnet.fit_linear_probe(X, y2)(X))
    assert abs(r2 - r2b) < 1e-9


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.integers(0, 1000))
def test_metric_ranges(vals, seed):
    y = np.array(vals)
    if np.ptp(y) < 1e-6:
        return
    yh = y + np.random.default_rng(seed).normal(size=len(y))
    assert nnet.r2_score(y, yh) <= 1.0
    assert nnet.rmse(y, yh) >= 0.0


# ---------------------------------------------------------------- training


def _linear_data(n, seed, seq=False):
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, size=(n, 4))
    y = x @ np.array([0.5, -0.3, 0.2, 0.1])
    return ArrayData(x[:, None, :] if seq else x, y)


def test_linear_task_learned():
    spec = NetworkSpec(kind="dense", layer_dims=(64,), top_dim=32, learning_rate=3e-3, batch_size=32,
                       max_epochs=50, patience=5, seed=1)
    model = nnet.train(spec, _linear_data(3000, 0), _linear_data(500, 1))
    assert nnet.evaluate(model, _linear_data(500, 1)).rmse < 0.01


def test_learning_rate_zero_keeps_params():
    spec = NetworkSpec(layer_dims=(4,), top_dim=3, learning_rate=0.0, max_epochs=3, batch_size=16, patience=5)
    data = _linear_data(64, 0, seq=True)
    init = Network(spec, 4).get_params()
    model = nnet.train(spec, data, data)
    for a, b in zip(init, model.network.params):
        np.testing.assert_array_equal(a, b)
    vals = [r["val_rmse"] for r in model.trace]
    assert len(vals) == 3 and len(set(vals)) == 1


def test_training_seed_deterministic():
    spec = NetworkSpec(layer_dims=(6,), top_dim=4, dropout=0.2, recurrent_dropout=0.2, max_epochs=3, batch_size=16)
    data = _linear_data(100, 0, seq=True)
    a = nnet.train(spec, data, data)
    b = nnet.train(spec, data, data)
    for p, q in zip(a.network.params, b.network.params):
        np.testing.assert_array_equal(p, q)
    c = nnet.train(NetworkSpec(**{**spec.to_dict(), "seed": 9}), data, data)
    assert not np.array_equal(a.network.params[0], c.network.params[0])


class ScriptedTrainer(nnet.Trainer):
    """Validation RMSE improves for ``k`` epochs, then worsens monotonically."""

    def __init__(self, spec, k):
        super().__init__(spec)
        self.k = k
        self.snapshots = {}
        self._net = None

    def validation_rmse(self, net, val, epoch):
        self._net = net
        return 1.0 - 0.1 * epoch if epoch <= self.k else 1.0 - 0.1 * self.k + 0.05 * (epoch - self.k)

    def on_epoch_end(self, record):
        self.snapshots[record["epoch"]] = self._net.get_params()


@pytest.mark.parametrize("k", [1, 3, 6])
def test_early_stopping_patience(k):
    spec = NetworkSpec(layer_dims=(4,), top_dim=3, max_epochs=50, patience=5, batch_size=16)
    tr = ScriptedTrainer(spec, k)
    data = _linear_data(64, 0, seq=True)
    model = tr.fit(data, data)
    assert len(model.trace) == k + 5
    assert model.best_epoch == k
    for a, b in zip(tr.snapshots[k], model.network.params):
        np.testing.assert_array_equal(a, b)
    assert not np.array_equal(tr.snapshots[k + 5][0], model.network.params[0])


def test_divergence_error():
    spec = NetworkSpec(kind="dense", layer_dims=(4,), top_dim=3, max_epochs=2, batch_size=8)
    bad = ArrayData(np.ones((16, 3)), np.full(16, np.inf))
    with pytest.raises(nnet.DivergenceError) as ei:
        nnet.train(spec, bad, bad)
    assert ei.value.epoch == 1 and ei.value.batch == 0


def test_empty_split_rejected():
    spec = NetworkSpec(kind="dense")
    data = _linear_data(10, 0)
    with pytest.raises(ValueError):
        nnet.train(spec, data, ArrayData(np.zeros((0, 4)), np.zeros(0)))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path, rng):
    spec = NetworkSpec(layer_dims=(5, 3), top_dim=4, max_epochs=2, batch_size=8)
    data = _linear_data(32, 0, seq=True)
    model = nnet.train(spec, data, data, fingerprint="abc")
    p = tmp_path / "m.ckpt"
    nnet.save_checkpoint(model, p)
    back = nnet.load_checkpoint(p)
    assert back.spec == spec and back.best_epoch == model.best_epoch and back.fingerprint == "abc"
    x = rng.normal(size=(3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(back.network.predict(x), model.network.predict(x))


def test_checkpoint_gate_order(tmp_path):
    spec = NetworkSpec(layer_dims=(2,), top_dim=2, max_epochs=0)
    net = Network(spec, 3)
    layer = net.body[0]
    for k, gate in enumerate(layer.MEMORY_ORDER):
        layer.W[:, layer.gate_slice(gate)] = 10 + k
    p = tmp_path / "g.ckpt"
    nnet.save_checkpoint(nnet.TrainedModel(spec, net), p)
    raw = p.read_bytes()
    n = struct.unpack("<Q", raw[4:12])[0]
    blob = np.frombuffer(raw[12 + n:], dtype="<f4")
    block = 3 * 2 + 2 * 2 + 2  # W, U, b of one gate
    firsts = [blob[i * block] for i in range(4)]
    expect = [10 + layer.MEMORY_ORDER.index(g) for g in nnet.GATES]
    assert firsts == expect
    assert list(nnet.GATES) == ["input", "forget", "candidate", "output"]
