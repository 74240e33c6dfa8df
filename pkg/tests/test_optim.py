import math

import numpy as np
import pytest

from vapipe.errors import ConfigError, DataError, NumericalError
from vapipe.optim import EarlyStopping, TrainConfig, TrainLog, sgd_step, train


def _cfg(**kw):
    base = dict(lr=0.01, momentum=0.0, weight_decay=0.0)
    base.update(kw)
    return TrainConfig(**base)


def test_sgd_examples():
    w = {"w": np.array([1.0])}
    v = {"w": np.array([2.0])}
    sgd_step(w, {"w": np.array([0.0])}, v, _cfg(momentum=0.9))
    assert w["w"][0] == pytest.approx(1 - 0.01 * 1.8) and v["w"][0] == pytest.approx(1.8)
    w, v = {"w": np.array([1.0])}, {}
    sgd_step(w, {"w": np.array([0.5])}, v, _cfg())
    assert w["w"][0] == pytest.approx(0.995)
    w, v = {"w": np.array([0.0])}, {}
    for _ in range(2):
        sgd_step(w, {"w": np.array([1.0])}, v, _cfg(momentum=0.9))
    assert v["w"][0] == pytest.approx(1.9) and w["w"][0] == pytest.approx(-0.029)


def test_sgd_zero_gradient_keeps_weights():
    w = {"w": np.array([0.7, -0.2])}
    v = {"w": np.array([0.0, 0.0])}
    sgd_step(w, {"w": np.zeros(2)}, v, _cfg(momentum=0.9))
    np.testing.assert_array_equal(w["w"], [0.7, -0.2])


def test_weight_decay_geometric():
    w0 = np.array([1.5, -3.0])
    w, v = {"w": w0.copy()}, {}
    cfg = _cfg(lr=0.1, weight_decay=0.05)
    for _ in range(50):
        sgd_step(w, {"w": np.zeros(2)}, v, cfg)
    np.testing.assert_allclose(w["w"], w0 * (1 - 0.1 * 0.05) ** 50, atol=1e-12)


def test_no_decay_names_skip_decay():
    w, v = {"g": np.array([1.0]), "w": np.array([1.0])}, {}
    sgd_step(w, {"g": np.zeros(1), "w": np.zeros(1)}, v, _cfg(lr=0.1, weight_decay=0.5), no_decay={"g"})
    assert w["g"][0] == 1.0 and w["w"][0] == pytest.approx(0.95)


def test_quadratic_descends_monotonically():
    w, v = {"w": np.array([5.0])}, {}
    cfg = _cfg(lr=0.3)
    losses = []
    for _ in range(30):
        losses.append(2.0 * w["w"][0] ** 2)
        sgd_step(w, {"w": 4.0 * w["w"]}, v, cfg)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_config_validation():
    for bad in (dict(lr=0), dict(momentum=1.0), dict(early_stop_patience=0), dict(loss="l1"), dict(batch_size=1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_early_stopping_rule():
    es = EarlyStopping(2)
    stopped_at = None
    for epoch, val in enumerate([1.0, 0.9, 0.95, 0.96, 0.5], start=1):
        es.update(val)
        if es.stop:
            stopped_at = epoch
            break
    assert stopped_at == 4 and es.best_epoch == 2


class Linear:
    """y = w x + b, scalar output duplicated into both columns for MSE tests."""

    def __init__(self, w=0.0, b=0.0):
        self.params = {"w": np.array([w]), "b": np.array([b])}
        self._x = None

    trainable = ("w", "b")
    no_decay = set()

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x * self.params["w"] + self.params["b"]

    def backward(self, g):
        return {"w": np.array([(g * self._x).sum()]), "b": np.array([g.sum()])}

    def predict(self, x):
        return self.forward(x)


def _line_data(n=64, seed=0):
    x = np.random.default_rng(seed).uniform(-1, 1, size=(n, 1))
    return np.repeat(x, 2, axis=1), np.repeat(2 * x, 2, axis=1)


def test_linear_regression_converges():
    X, Y = _line_data()
    m = Linear()
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.0, max_epochs=100, batch_size=8,
                      early_stop_patience=100, loss="mse")
    _, log = train(m, (X, Y), (X, Y), cfg)
    assert m.params["w"][0] == pytest.approx(2.0, abs=1e-2)
    assert log.epochs_run == 100


def test_train_keeps_best_epoch_and_is_deterministic(tmp_path):
    X, Y = _line_data()
    Xv, Yv = _line_data(seed=1)
    cfg = TrainConfig(lr=0.5, momentum=0.9, weight_decay=0.0, max_epochs=30, batch_size=16,
                      early_stop_patience=3, loss="mse", seed=4)
    runs = []
    for _ in range(2):
        m = Linear()
        best, log = train(m, (X, Y), (Xv, Yv), cfg)
        runs.append((log.rows, best["w"].tobytes()))
    assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    losses = [r["val_loss"] for r in log.rows]
    assert log.best_epoch == int(np.argmin(losses)) + 1 <= log.epochs_run
    # returned parameters reproduce the logged best validation loss
    pred = m.predict(Xv)
    assert np.mean((pred - Yv) ** 2) == pytest.approx(min(losses))
    log.to_csv(tmp_path / "log.csv")
    back = TrainLog.from_csv(tmp_path / "log.csv")
    assert back.best_epoch == log.best_epoch and len(back.rows) == len(log.rows)
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == \
        "epoch,train_loss,val_loss,val_ccc_v,val_ccc_a,val_accuracy"


def test_single_epoch():
    X, Y = _line_data()
    _, log = train(Linear(), (X, Y), (X, Y), TrainConfig(max_epochs=1, loss="mse"))
    assert log.epochs_run == 1 and log.best_epoch == 1


def test_train_errors():
    X, Y = _line_data()
    with pytest.raises(DataError):
        train(Linear(), (X[:1], Y[:1]), (X, Y), TrainConfig(loss="mse"))
    with pytest.raises(NumericalError) as exc:
        train(Linear(w=1e300), (X * 1e10, Y), (X, Y), TrainConfig(lr=1.0, loss="mse"))
    assert exc.value.epoch == 1
