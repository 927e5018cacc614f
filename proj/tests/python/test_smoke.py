"""Smoke tests for the Python bindings: end-to-end surface checks only;
the C++ suites carry the detailed verification."""

import math

import numpy as np
import pytest

import caw


@pytest.fixture(scope="module")
def dataset():
    return caw.generate_dataset(
        num_classes=3, input_dim=6, samples_per_class=20, embed_dim=5,
        center_scale=0.6, noise_sigma=0.05, seed=1,
    )


@pytest.fixture(scope="module")
def model(dataset):
    return caw.model_for_dataset(dataset, hidden_dims=[8], seed=2)


def test_dataset_shapes(dataset):
    assert dataset.x.shape == (60, 6)
    assert dataset.y.shape == (60,)
    assert dataset.prototypes.shape == (3, 5)
    assert len(dataset) == 60
    assert dataset.x.min() >= 0.0 and dataset.x.max() <= 1.0


def test_dataset_roundtrip(dataset, tmp_path):
    path = str(tmp_path / "data.caw")
    dataset.save(path)
    loaded = caw.Dataset.load(path)
    np.testing.assert_array_equal(loaded.x, dataset.x)
    np.testing.assert_array_equal(loaded.y, dataset.y)


def test_predict_and_encode(model, dataset):
    labels = model.predict(dataset.x)
    assert labels.shape == (60,)
    assert labels.min() >= 0 and labels.max() < 3
    features = model.encode(dataset.x)
    assert features.shape == (60, 5)
    # Frozen path starts as an exact copy of the tuned one.
    np.testing.assert_array_equal(features, model.encode(dataset.x, use_frozen=True))


def test_softmax_and_kl():
    probs = caw.softmax(np.array([[1000.0, 0.0], [0.0, 0.0]]))
    assert np.all(np.isfinite(probs))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    kl = caw.kl_divergence(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]))
    assert kl[0] == pytest.approx(math.log(2.0), abs=1e-12)


def test_attack_containment(model, dataset):
    result = caw.attack(model, dataset.x, dataset.y, kind="pgd", epsilon=0.05, steps=3)
    delta = np.abs(result["x_adv"] - dataset.x)
    assert delta.max() <= 0.05 + 1e-9
    assert result["x_adv"].min() >= 0.0 and result["x_adv"].max() <= 1.0
    assert len(result["success"]) == 60
    assert len(result["loss_trace"]) == 4


def test_loss_identity(model, dataset):
    x_adv = caw.attack(model, dataset.x, dataset.y, epsilon=0.05, steps=2)["x_adv"]
    breakdown = caw.total_loss(model, dataset.x, x_adv, dataset.y, alpha=6.0, beta=3.0)
    expected = breakdown["ce"] + 6.0 * breakdown["ca"] + 3.0 * breakdown["reg"]
    assert breakdown["total"] == pytest.approx(expected, abs=1e-10)
    assert 0.0 <= breakdown["mean_weight"] <= 1.0


def test_training_is_deterministic_and_learns(dataset):
    def run():
        m = caw.model_for_dataset(dataset, hidden_dims=[8], seed=3)
        caw.clean_pretrain(m, dataset, epochs=3, learning_rate=0.05, batch_size=16, seed=4)
        m.snapshot_frozen()
        records = caw.fit(
            m, dataset, alpha=6.0, beta=3.0, learning_rate=0.01, batch_size=16,
            epochs=3, seed=4, epsilon=0.03, attack_steps=2,
        )
        return m, records

    model_a, records_a = run()
    model_b, records_b = run()
    assert model_a.parameter_hash() == model_b.parameter_hash()
    assert records_a[-1]["loss"]["total"] == records_b[-1]["loss"]["total"]
    # The fine-tuning loop must leave the frozen reference untouched.
    assert model_a.frozen_parameter_hash() == model_b.frozen_parameter_hash()


def test_evaluate_report(model, dataset):
    report = caw.evaluate(
        model, dataset,
        attacks=[{"kind": "pgd", "epsilon": 0.03, "steps": 3}],
        seed=5,
    )
    assert 0.0 <= report["clean_accuracy"] <= 1.0
    assert report["robust"][0]["attack"] == "pgd-3@0.03"
    assert 0.0 <= report["robust"][0]["accuracy"] <= 1.0


def test_gradcheck_passes():
    report = caw.run_gradcheck(states=3)
    assert report["passed"]
    assert report["max_rel_error"] < 1e-4
    assert len(report["components"]) == 7


def test_typed_errors_cross_the_boundary():
    with pytest.raises(ValueError):
        caw.generate_dataset(num_classes=0)
    with pytest.raises(OSError):
        caw.Dataset.load("/tmp/caw_missing_file.caw")
