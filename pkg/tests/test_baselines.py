import itertools

import numpy as np
import pytest

from drmd.baselines import (LinearSvm, LinearSvmModel, MlpBaselineConfig, MlpClassifier, chronological_split,
                            svm_predict, svm_uncertainty, train_linear_svm, train_mlp_baseline)
from drmd.errors import ConfigurationError, TrainingError
from drmd.mdp import Sample, as_matrix
from drmd.metrics import f1

from conftest import make_sample, tiny_stream


def pts(rows):
    return [Sample(f"p{i}", 0, label, tuple(feats)) for i, (feats, label) in enumerate(rows)]


def best_linear_accuracy(x, y):
    """Best accuracy of any sign(w.x + b) over a dense grid; an oracle for tiny point sets."""
    grid = np.linspace(-2, 2, 21)
    best = 0.0
    for w0, w1, b in itertools.product(grid, grid, grid):
        pred = (x @ np.array([w0, w1]) + b > 0).astype(int)
        best = max(best, float(np.mean(pred == y)))
    return best


class TestSvm:
    def test_separable_pair(self):
        data = pts([((0,), 1), ((1,), 0)])
        model = train_linear_svm(data, 2)
        x = as_matrix(data, 2, np.float64)
        assert svm_predict(model, x).tolist() == [1, 0]
        assert np.all(model.decision(x) * np.array([1, -1]) > 0)

    def test_xor_not_separable(self):
        data = pts([((), 0), ((0, 1), 0), ((0,), 1), ((1,), 1)])
        x = as_matrix(data, 2, np.float64)
        y = np.array([s.label for s in data])
        assert best_linear_accuracy(x, y) == 0.75
        model = train_linear_svm(data, 2)
        assert np.mean(svm_predict(model, x) == y) <= 0.75

    def test_small_c_gives_majority(self):
        stream = tiny_stream()
        model = train_linear_svm(stream, 30, c_param=1e-6)
        assert np.linalg.norm(model.weights) < 1e-3
        assert np.all(svm_predict(model, as_matrix(stream, 30, np.float64)) == 0)

    def test_single_class(self):
        with pytest.raises(TrainingError):
            train_linear_svm(pts([((0,), 1), ((1,), 1)]), 2)

    def test_converges_with_small_gap(self):
        model = train_linear_svm(tiny_stream(), 30)
        assert model.duality_gap >= -1e-9
        assert model.iterations < model.max_iterations
        assert np.all(np.isfinite(model.weights)) and model.weights.shape == (30,)

    def test_deterministic(self):
        stream = tiny_stream()
        np.testing.assert_array_equal(train_linear_svm(stream, 30).weights, train_linear_svm(stream, 30).weights)

    def test_affine_decision(self):
        model = LinearSvmModel(np.zeros(4), 0.37)
        assert model.decision(np.zeros(4))[0] == 0.37

    def test_uncertainty_range(self):
        model = train_linear_svm(tiny_stream(), 30)
        u = svm_uncertainty(model, as_matrix(tiny_stream(), 30, np.float64))
        assert np.all((u > 0) & (u <= 1))
        assert svm_uncertainty(LinearSvmModel(np.zeros(2), 0.0), np.zeros(2))[0] == 1.0

    def test_update_retrains_on_everything(self):
        stream = tiny_stream()
        svm = LinearSvm(30).fit(stream[:300])
        svm.update(stream[300:400])
        assert len(svm.labelled) == 400
        expected = train_linear_svm(stream[:400], 30)
        np.testing.assert_array_equal(svm.model.weights, expected.weights)


class TestMlp:
    def test_presets(self):
        dd, sl = MlpBaselineConfig.deep_drebin(), MlpBaselineConfig.sl_drmd()
        assert (dd.hidden_layers, dd.layer_size, dd.epochs, dd.batch_size) == (1, 200, 10, 64)
        assert (sl.hidden_layers, sl.layer_size, sl.epochs, sl.batch_size) == (3, 512, 5, 256)
        for cfg in (dd, sl):
            assert (cfg.learning_rate, cfg.dropout, cfg.train_fraction, cfg.seed) == (0.05, 0.5, 0.66, 0x10C0FFEE)

    def test_deep_drebin_architecture(self):
        model = MlpClassifier(30).fit(tiny_stream())
        hidden = [l.out_dim for l in model.net.layers[:-1]]
        assert hidden == [200] and model.net.output_dim == 2

    def test_zero_learning_rate_keeps_initialisation(self):
        stream = tiny_stream()
        cfg = MlpBaselineConfig.deep_drebin(epochs=1, learning_rate=0.0)
        net, _ = train_mlp_baseline(cfg, stream, 30)
        from drmd.nn import Activation, build_network
        from drmd.seeding import substream
        init = build_network(30, [200], 2, substream(cfg.seed, "init"), Activation.RELU, Activation.SOFTMAX, 0.5)
        for p, q in zip(net.parameters(), init.parameters()):
            np.testing.assert_array_equal(p, q)

    @pytest.mark.parametrize("preset", ["deep_drebin", "sl_drmd"])
    def test_separable_holdout(self, separable, preset):
        train, holdout = separable
        model = MlpClassifier(50, getattr(MlpBaselineConfig, preset)()).fit(train)
        preds, _ = model.decide(model.features(holdout))
        assert f1(preds, [s.label for s in holdout]) >= 0.95

    def test_keeps_best_validation_epoch(self):
        stream = tiny_stream()
        model = MlpClassifier(30, MlpBaselineConfig.deep_drebin(epochs=4)).fit(stream)
        _, val = chronological_split(stream, 0.66)
        preds, _ = model.decide(model.features(val))
        assert f1(preds, [s.label for s in val]) == pytest.approx(max(model.history))

    def test_chronological_split(self):
        stream = tiny_stream()
        train, val = chronological_split(stream[::-1], 0.66)
        assert max(s.month for s in train) <= min(s.month for s in val)
        assert len(train) == round(0.66 * len(stream))

    def test_uncertainty(self):
        model = MlpClassifier(30).fit(tiny_stream())
        u = model.uncertainty(model.features(tiny_stream()))
        assert np.all((u >= 0) & (u <= 0.5))

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            MlpBaselineConfig(epochs=0)

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            train_mlp_baseline(MlpBaselineConfig(), [], 3)


def test_shared_interface():
    for model in (LinearSvm(30), MlpClassifier(30)):
        for name in ("fit", "update", "decide", "uncertainty", "features"):
            assert callable(getattr(model, name))
        assert model.can_reject is False and model.input_dim == 30


def test_retrain_window_keeps_newest_samples():
    from drmd.baselines import _retrain_set
    old = [make_sample(month=i % 3, label=i % 2, sid=f"o{i}") for i in range(6)]
    new = [make_sample(month=5, label=i % 2, sid=f"n{i}") for i in range(3)]
    kept = _retrain_set(old, new, 5)
    assert [s.id for s in kept] == ["o2", "o5", "n0", "n1", "n2"]
    assert _retrain_set(old, new, None) == old + new


def test_windowed_svm_retrains_on_window_only():
    stream = tiny_stream(months=3, per_month=60)
    svm = LinearSvm(30, retrain_window=50).fit([s for s in stream if s.month == 0])
    svm.update([s for s in stream if s.month == 2])
    assert len(svm.labelled) == 50
    assert all(s.month == 2 for s in svm.labelled)
    with pytest.raises(ConfigurationError):
        LinearSvm(30, retrain_window=0)
