import json

import numpy as np
import pytest

from meshpool import training
from meshpool.autodiff import Value
from meshpool.errors import ArgumentError, NumericalError
from meshpool.mesh import gen_labeled_dataset
from meshpool.model import ModelConfig
from meshpool.training import (
    AdamState, MetricsReport, TrainConfig, adam_step, evaluate, mean_ami, prepare_dataset, train,
)


@pytest.fixture(scope="module")
def small_data():
    manifest = gen_labeled_dataset("two_region_class", 12, (60, 80), 0)
    return manifest, prepare_dataset(manifest)


def small_config(manifest, **kw):
    kw.setdefault("kernel", {"kind": "bspline", "grid": [3, 3, 3]})
    return ModelConfig(field_names=manifest.field_names, n_outputs=manifest.n_outputs, **kw)


def test_adam_first_step_matches_formula():
    p = Value(np.array([1.0, -2.0]), True)
    g = np.array([0.5, -4.0])
    st = AdamState.zeros_like([p])
    adam_step([p], [g], st, lr=0.1)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [1.0 - 0.1 * 0.5 / (0.5 + 1e-8),
                                        -2.0 + 0.1 * 4.0 / (4.0 + 1e-8)], atol=1e-15)
    assert st.t == 1


def test_adam_reference_trajectory():
    p = Value(np.array([3.0]), True)
    st = AdamState.zeros_like([p])
    m = v = 0.0
    x = 3.0
    for t in range(1, 6):
        g = 2 * p.data.copy()
        adam_step([p], [g], st, lr=0.05)
        gs = 2 * x
        m = 0.9 * m + 0.1 * gs
        v = 0.999 * v + 0.001 * gs * gs
        x -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data[0] == pytest.approx(x, abs=1e-14)


def test_adam_treats_missing_grad_as_zero():
    p = Value(np.array([1.0]), True)
    adam_step([p], [None], AdamState.zeros_like([p]), lr=0.1)
    assert p.data[0] == 1.0


def test_train_config_validation():
    with pytest.raises(ArgumentError):
        TrainConfig(split_ratios=(0.5, 0.5, 0.5))
    with pytest.raises(ArgumentError):
        TrainConfig(epochs=-1)
    with pytest.raises(ArgumentError):
        TrainConfig(adam_beta1=1.0)
    with pytest.raises(ArgumentError):
        TrainConfig.from_dict({"epoch": 3})
    tc = TrainConfig(seed=4)
    assert TrainConfig.from_dict(tc.to_dict()) == tc


def test_prepare_dataset_splits(small_data):
    manifest, data = small_data
    assert {k: len(v) for k, v in data.splits.items()} == {"train": 8, "val": 1, "test": 3}
    first = next(e for e in manifest.entries if e.split == "train")
    assert data.residuals[first.path] == pytest.approx(0.0, abs=1e-12)
    assert data.mode == "classify"


def test_training_reduces_loss_and_is_deterministic(small_data):
    manifest, data = small_data
    tc = TrainConfig(epochs=8, learning_rate=3e-3, seed=1)
    s1, r1 = train(data, small_config(manifest), tc)
    s2, r2 = train(data, small_config(manifest), tc)
    assert r1.train_loss[-1] < r1.train_loss[0]
    assert r1.to_json() == r2.to_json()
    for n in s1.names():
        assert np.array_equal(s1[n].data, s2[n].data)
    assert len(r1.predictions) == 3
    assert r1.test_metric == evaluate(s1, data.splits["test"])


def test_best_state_is_lowest_validation_loss(small_data):
    manifest, data = small_data
    tc = TrainConfig(epochs=6, learning_rate=1e-2, seed=2)
    state, rep = train(data, small_config(manifest), tc)
    best = int(np.argmin(rep.val_loss))
    assert rep.best_epoch == rep.val_epochs[best]
    assert rep.best_val_loss == rep.val_loss[best]
    assert training.mean_loss(state, data.splits["val"]) == pytest.approx(rep.best_val_loss,
                                                                          rel=1e-12)


def test_early_stopping(small_data):
    manifest, data = small_data
    tc = TrainConfig(epochs=50, learning_rate=0.0, seed=0, early_stop_patience=2)
    _, rep = train(data, small_config(manifest), tc)
    assert rep.stopped_early and rep.epochs_run == 3


def test_alpha_from_training_config(small_data, monkeypatch):
    manifest, data = small_data
    seen = []
    real = training.loss

    def spy(result, target, S1, graph, config):
        seen.append(config.alpha)
        return real(result, target, S1, graph, config)

    monkeypatch.setattr(training, "loss", spy)
    train(data, small_config(manifest, alpha=0.5), TrainConfig(epochs=1, alpha=0.25))
    assert set(seen) == {0.25}


def test_ami_trace_recorded(small_data):
    manifest, data = small_data
    _, rep = train(data, small_config(manifest), TrainConfig(epochs=4, ami_every=2))
    assert [e for e, _ in rep.ami_trace] == [0, 2, 4]
    assert all(-1.0 <= a <= 1.0 for _, a in rep.ami_trace)


@pytest.mark.parametrize("mode", ["global_average", "fixed_parcellation", "spectral_kmeans"])
def test_baseline_modes_train(small_data, mode):
    manifest, data = small_data
    _, rep = train(data, small_config(manifest, pooling_mode=mode), TrainConfig(epochs=2))
    assert rep.ami_trace == [] and np.isfinite(rep.train_loss).all()


def test_non_finite_loss_raises_with_checkpoint(small_data, monkeypatch, tmp_path):
    manifest, data = small_data
    real = training.loss
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        value = real(*args)
        if calls["n"] > 10:
            value.data = np.array(np.nan)
        return value

    monkeypatch.setattr(training, "loss", flaky)
    with pytest.raises(NumericalError) as exc:
        train(data, small_config(manifest), TrainConfig(epochs=3), checkpoint_dir=tmp_path)
    assert (tmp_path / "last_good.ckpt").exists()
    assert "epoch 2" in str(exc.value)


def test_regression_training():
    manifest = gen_labeled_dataset("parcel_size_reg", 10, (60, 70), 1)
    data = prepare_dataset(manifest)
    cfg = small_config(manifest, task="regress")
    state, rep = train(data, cfg, TrainConfig(epochs=2, ami_every=1))
    assert rep.metric_name == "mae" and rep.test_metric >= 0
    assert np.isfinite(mean_ami(state, data.splits["train"]))


def test_report_serialization():
    rep = MetricsReport(task="classify", metric_name="accuracy", train_loss=[1.0, 0.5])
    d = json.loads(rep.to_json())
    assert d["format_version"] == training.REPORT_VERSION
    assert d["train_loss"] == [1.0, 0.5]


def test_empty_splits():
    with pytest.raises(ArgumentError):
        evaluate(None, [])
