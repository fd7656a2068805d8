import numpy as np
import pytest

from kpiforecast import forecaster as fc
from kpiforecast.errors import AlignmentError, DivergenceError, NumericalError, ShapeError
from kpiforecast.windowing import FeatureSelector, WindowSpec, make_windows
from oracles import naive_mse, scalar_lstm

MICRO = dict(d=2, T=5, u=4, h=4, C=1)


def micro_state(seed=0, **kw):
    return fc.init_model(fc.ModelConfig(**{**MICRO, "seed": seed, **kw}))


def micro_batch(seed=1, B=2, w_lbl=1):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(B, 5, 2)), rng.uniform(0, 1, size=(B, w_lbl, 1))


# -- initialisation and shapes ---------------------------------------------------

def test_init_deterministic():
    a, b = micro_state(3), micro_state(3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = micro_state(4)
    assert not np.array_equal(a.params["lstm0.W"], c.params["lstm0.W"])


def test_gate_shapes():
    s = micro_state()
    for gate in fc.GATES:
        W, U, b = fc.gate_params(s, 0, gate)
        assert W.shape == (2, 4) and U.shape == (4, 4) and b.shape == (4,)
    assert fc.gate_params(s, 0, "forget")[2].tolist() == [1.0] * 4
    assert fc.gate_params(s, 1, "input")[0].shape == (4, 4)


def test_param_count():
    cfg = fc.ModelConfig(d=1, T=12, u=32, h=16)
    shapes = fc.param_shapes(cfg)
    assert shapes["fc0.W"] == (32, 64) and shapes["fc2.W"] == (32, 16) and shapes["out.W"] == (16, 1)
    assert fc.init_model(cfg).n_params == sum(int(np.prod(s)) for s in shapes.values())


def test_forward_shapes():
    s = micro_state()
    X, _ = micro_batch(B=3)
    assert fc.forward(s, X[0]).shape == (5, 1)
    assert fc.forward(s, X).shape == (3, 5, 1)
    with pytest.raises(ShapeError):
        fc.forward(s, np.zeros((4, 2)))


def test_zero_model_zero_output():
    s = micro_state()
    for p in s.params.values():
        p[...] = 0.0
    assert np.array_equal(fc.forward(s, np.zeros((5, 2))), np.zeros((5, 1)))


def test_single_cell_hand_recursion():
    rng = np.random.default_rng(7)
    wx = dict(zip(fc.GATES, rng.normal(size=4)))
    wh = dict(zip(fc.GATES, rng.normal(size=4)))
    b = dict(zip(fc.GATES, rng.normal(size=4)))
    W = np.array([[wx[g] for g in fc.GATES]])
    U = np.array([[wh[g] for g in fc.GATES]])
    bias = np.array([b[g] for g in fc.GATES])
    xs = [0.3, -1.2]
    H = fc.lstm_layer_forward(np.array(xs).reshape(1, 2, 1), W, U, bias)
    np.testing.assert_allclose(H[0, :, 0], scalar_lstm(xs, wx, wh, b), rtol=0, atol=1e-14)


def test_single_cell_by_hand_values():
    # all weights 0.5, biases 0, inputs (1, 0)
    W = np.full((1, 4), 0.5)
    U = np.full((1, 4), 0.5)
    H = fc.lstm_layer_forward(np.array([[[1.0], [0.0]]]), W, U, np.zeros(4))
    s = 1 / (1 + np.exp(-0.5))
    c1 = s * np.tanh(0.5)
    h1 = s * np.tanh(c1)
    z2 = 0.5 * h1
    s2 = 1 / (1 + np.exp(-z2))
    c2 = s2 * c1 + s2 * np.tanh(z2)
    h2 = s2 * np.tanh(c2)
    np.testing.assert_allclose(H[0, :, 0], [h1, h2], rtol=1e-15)


# -- alignment and loss ------------------------------------------------------------

def test_label_align():
    y = np.arange(5.0).reshape(5, 1)
    assert fc.label_align(y, 1).ravel().tolist() == [4.0]
    assert fc.label_align(y, 3).ravel().tolist() == [2.0, 3.0, 4.0]
    assert np.array_equal(fc.label_align(y, 5), y)
    with pytest.raises(AlignmentError):
        fc.label_align(y, 6)


def test_mse():
    rng = np.random.default_rng(2)
    p, t = rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3, 2))
    assert fc.mse_loss(p, p) == 0.0
    assert fc.mse_loss(t + 0.5, t) == pytest.approx(0.25, abs=1e-15)
    assert fc.mse_loss(p, t) == pytest.approx(naive_mse(p, t), rel=1e-13)
    with pytest.raises(ShapeError):
        fc.mse_loss(p, t[:, :2])


# -- gradients --------------------------------------------------------------------

@pytest.mark.parametrize("w_lbl", [1, 3])
def test_gradient_check(w_lbl):
    s = micro_state()
    X, Y = micro_batch(w_lbl=w_lbl)
    _, analytic = fc.loss_and_grad(s, X, Y)
    numeric = fc.numerical_gradient(s, X, Y, eps=1e-5)
    errs = fc.relative_errors(analytic, numeric)
    assert max(errs.values()) < 1e-4, errs


def test_zero_residual_zero_gradient():
    s = micro_state()
    X, _ = micro_batch()
    Y = fc.label_align(fc.forward(s, X), 1)
    loss, grads = fc.loss_and_grad(s, X, Y)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_output_bias_gradient_is_mean_residual():
    s = micro_state()
    X, Y = micro_batch(B=2)
    resid = fc.label_align(fc.forward(s, X), 1) - Y
    grads = fc.backward(s, X, Y)
    assert grads["out.b"][0] == pytest.approx(2 * resid.mean(), rel=1e-12)


@pytest.mark.parametrize("w_lbl", [1, 3, 5])
def test_loss_uses_label_aligned_output(w_lbl):
    s = micro_state()
    X, Y = micro_batch(w_lbl=w_lbl)
    loss, _ = fc.loss_and_grad(s, X, Y)
    assert loss == pytest.approx(naive_mse(fc.label_align(fc.forward(s, X), w_lbl), Y), rel=1e-13)


# -- sgd_step ---------------------------------------------------------------------

def test_sgd_scalar_rule():
    s = micro_state()
    before = s.copy()
    g = {k: np.full_like(v, 0.25) for k, v in s.params.items()}
    fc.sgd_step(s, g, 0.1)
    assert np.allclose(s.params["out.b"], before.params["out.b"] - 0.025, rtol=0, atol=1e-15)
    fc.sgd_step(s, g, 0.1)
    assert np.allclose(s.params["out.W"], before.params["out.W"] - 0.05, rtol=0, atol=1e-15)


def test_sgd_zero_eta():
    s = micro_state()
    before = s.copy()
    fc.sgd_step(s, {k: np.ones_like(v) for k, v in s.params.items()}, 0.0)
    assert all(np.array_equal(s.params[k], before.params[k]) for k in s.params)


def test_sgd_non_finite():
    s = micro_state()
    before = s.copy()
    g = {k: np.zeros_like(v) for k, v in s.params.items()}
    g["fc1.b"][0] = np.inf
    with pytest.raises(NumericalError):
        fc.sgd_step(s, g, 1.0)
    # nothing was partially applied
    assert all(np.array_equal(s.params[k], before.params[k]) for k in s.params)


def test_descent_direction_lowers_loss():
    s = micro_state()
    X, Y = micro_batch(B=8)
    loss0, g = fc.loss_and_grad(s, X, Y)
    fc.sgd_step(s, g, 1e-2)
    assert fc.loss_and_grad(s, X, Y)[0] < loss0


# -- training -----------------------------------------------------------------------

def windows_from(series, w_in=5):
    return make_windows(series, WindowSpec(w_in, 1, 1), FeatureSelector((0,)))


def test_zero_epochs_is_noop():
    s = micro_state(epochs=0)
    before = s.copy()
    ws = windows_from(np.random.default_rng(0).uniform(size=(30, 2)))
    s, hist = fc.train(s, ws, ws)
    assert len(hist) == 0
    assert all(np.array_equal(s.params[k], before.params[k]) for k in s.params)


def test_constant_series_fits():
    series = np.full((40, 2), 0.6)
    ws = windows_from(series)
    s = micro_state(epochs=200, eta=0.05, batch_size=4)
    s, hist = fc.train(s, ws, ws)
    assert min(hist.train_loss) < 1e-6


def test_training_deterministic():
    series = np.random.default_rng(3).uniform(size=(60, 2))
    ws = windows_from(series)
    a, ha = fc.train(micro_state(epochs=3, batch_size=4), ws, ws)
    b, hb = fc.train(micro_state(epochs=3, batch_size=4), ws, ws)
    assert ha.train_loss == hb.train_loss
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_history_matches_rescoring():
    series = np.random.default_rng(4).uniform(size=(60, 2))
    ws = windows_from(series)
    s, hist = fc.train(micro_state(epochs=2, batch_size=4), ws, ws)
    assert fc.evaluate_loss(s, ws) == hist.train_loss[-1]
    assert np.array_equal(fc.predict(s, ws), fc.predict(s, ws))


def test_divergence_detected():
    series = np.random.default_rng(5).uniform(size=(60, 2)) * 1e4
    ws = windows_from(series)
    with pytest.raises((DivergenceError, NumericalError)):
        fc.train(micro_state(epochs=5, eta=10.0), ws, ws)


# -- checkpoints --------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    from kpiforecast.preprocess import ScalerParams
    s = micro_state(5)
    s.scaler = ScalerParams(np.array([0.0, 1.0]), np.array([2.0, 3.0]))
    s.epochs_done = 7
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    fc.save_checkpoint(s, p1)
    back = fc.load_checkpoint(p1)
    assert back.config == s.config and back.epochs_done == 7
    assert all(np.array_equal(back.params[k], s.params[k]) for k in s.params)
    assert np.array_equal(back.scaler.x_max, s.scaler.x_max)
    fc.save_checkpoint(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(Exception):
        fc.load_checkpoint(p)
