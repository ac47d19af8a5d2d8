"""Training engine tests: protocol defaults, loss and Adam against closed
forms and a hand-rolled reference, run records, and full protocol runs on
small synthetic tasks."""

import json
import math

import numpy as np
import pytest

from zachvit.data import MODE_HISTOGRAM, make_synthetic
from zachvit.model import ConfigError, ModelConfig, baseline_config, count_params, init_params
from zachvit.rng import Rng
from zachvit.tensor import NumericError, Tape, Tensor, backward
from zachvit.train import (
    DEFAULT_SEEDS,
    AdamState,
    RunRecord,
    TrainProtocol,
    adam_step,
    config_id,
    cross_entropy,
    evaluate,
    generalization_gap,
    run_protocol,
)


def toy(**overrides):
    base = dict(
        input_size=8,
        channels=3,
        patch_size=4,
        unit_dims=(8, 4),
        mlp_dims=(8, 4),
        heads=2,
        num_classes=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


FAST = TrainProtocol(shots_per_class=4, batch_size=4, epochs=2, seed=3)


# ---------------------------------------------------------------------------
# protocol


def test_protocol_defaults():
    p = TrainProtocol()
    assert p.shots_per_class == 50
    assert p.batch_size == 16
    assert p.learning_rate == 1e-4
    assert p.epochs == 23
    assert (p.beta1, p.beta2, p.eps) == (0.9, 0.999, 1e-8)


def test_default_seed_set():
    assert DEFAULT_SEEDS == (3, 5, 7, 11, 13)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"shots_per_class": 0},
        {"batch_size": 0},
        {"learning_rate": 0.0},
        {"epochs": -1},
        {"beta1": 1.0},
        {"beta2": -0.1},
        {"eps": 0.0},
    ],
)
def test_protocol_validation(kwargs):
    with pytest.raises(ValueError):
        TrainProtocol(**kwargs)


def test_protocol_json_roundtrip_and_with_seed():
    p = TrainProtocol(epochs=5).with_seed(11)
    assert p.seed == 11 and p.epochs == 5
    assert TrainProtocol.from_json_dict(p.to_json_dict()) == p


# ---------------------------------------------------------------------------
# config id


def test_config_id_is_short_stable_hash():
    cid = config_id(toy())
    assert len(cid) == 12
    assert all(c in "0123456789abcdef" for c in cid)
    assert cid == config_id(toy())
    assert cid != config_id(toy(heads=1))


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((1, 2))), [0])
    assert loss.item() == pytest.approx(math.log(2.0))
    loss4 = cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert loss4.item() == pytest.approx(math.log(4.0))


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = Tensor(np.array([[1.0, -2.0, 0.5], [0.0, 0.0, 3.0]]), requires_grad=True)
    with Tape() as tape:
        loss = cross_entropy(logits, [2, 0])
    backward(loss, tape)
    e = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    expected = p.copy()
    expected[0, 2] -= 1.0
    expected[1, 0] -= 1.0
    np.testing.assert_allclose(logits.grad, expected / 2.0, atol=1e-12)


def test_cross_entropy_validation():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros(3)), [0])
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0])
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_is_signed_learning_rate():
    # with corr-adjusted moments, step 1 gives exactly lr * g / (|g| + eps)
    cfg = toy()
    params = init_params(cfg, Rng(0))
    state = AdamState(params)
    protocol = TrainProtocol(learning_rate=0.01)
    before = params.patch_bias.data.copy()
    grad = np.linspace(-1.0, 1.0, before.size).reshape(before.shape)
    params.patch_bias.grad = grad.copy()
    adam_step(params, state, protocol)
    expected = before - 0.01 * grad / (np.abs(grad) + protocol.eps)
    np.testing.assert_allclose(params.patch_bias.data, expected, atol=1e-12)
    assert state.t == 1


def test_adam_leaves_gradfree_tensors_at_rest():
    cfg = toy()
    params = init_params(cfg, Rng(1))
    state = AdamState(params)
    before = params.head_weight.data.copy()
    params.patch_bias.grad = np.ones_like(params.patch_bias.data)
    adam_step(params, state, TrainProtocol())
    np.testing.assert_array_equal(params.head_weight.data, before)


def test_adam_matches_reference_over_steps():
    """Five steps with fresh gradients each step, against an independent
    textbook implementation (explicit m-hat / v-hat)."""
    cfg = toy(unit_dims=(4,), mlp_dims=(4,), heads=1)
    params = init_params(cfg, Rng(2))
    state = AdamState(params)
    protocol = TrainProtocol(learning_rate=3e-3)
    name, tensor = "patch.weight", params.patch_weight

    ref = tensor.data.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    grad_rng = np.random.default_rng(0)
    for t in range(1, 6):
        g = grad_rng.normal(size=ref.shape)
        for other, tens in params.named_tensors():
            tens.grad = g.copy() if other == name else None
        adam_step(params, state, protocol)
        m = protocol.beta1 * m + (1 - protocol.beta1) * g
        v = protocol.beta2 * v + (1 - protocol.beta2) * g * g
        m_hat = m / (1 - protocol.beta1**t)
        v_hat = v / (1 - protocol.beta2**t)
        ref -= protocol.learning_rate * m_hat / (np.sqrt(v_hat) + protocol.eps)
        np.testing.assert_allclose(tensor.data, ref, atol=1e-12)


def test_adam_rejects_foreign_state():
    plain = init_params(toy(), Rng(3))
    state = AdamState(plain)
    richer = init_params(toy(use_positional=True), Rng(3))
    with pytest.raises(ValueError, match="missing"):
        adam_step(richer, state, TrainProtocol())


def test_adam_flags_nonfinite_update():
    # an absurd learning rate overflows the very first update; the step
    # must refuse rather than leave NaN/Inf weights behind
    params = init_params(toy(), Rng(4))
    state = AdamState(params)
    big = TrainProtocol(learning_rate=1e308)
    params.patch_bias.grad = np.ones_like(params.patch_bias.data)
    with np.errstate(invalid="ignore"), pytest.raises(NumericError):
        adam_step(params, state, big)


# ---------------------------------------------------------------------------
# records


def demo_record(task_kind="binary"):
    metrics = {"accuracy": 0.9, "macro_f1": 0.8}
    if task_kind == "binary":
        metrics = dict(metrics, auc=0.95, threshold_accuracy=0.85)
    test = {k: v - 0.1 for k, v in metrics.items()}
    return RunRecord(
        config=toy(),
        dataset_id="demo",
        seed=3,
        protocol=TrainProtocol(),
        epoch_losses=[0.7, 0.5],
        train_metrics=metrics,
        test_metrics=test,
        param_count=count_params(toy()),
        wall_seconds=1.25,
        task_kind=task_kind,
    )


def test_record_roundtrip():
    rec = demo_record()
    blob = json.dumps(rec.to_json_dict())
    again = RunRecord.from_json_dict(json.loads(blob))
    assert again.config == rec.config
    assert again.protocol == rec.protocol
    assert again.test_metrics == rec.test_metrics
    assert again.epoch_losses == rec.epoch_losses


def test_record_schema_guard():
    raw = demo_record().to_json_dict()
    raw["schema_version"] = 99
    with pytest.raises(ValueError, match="schema"):
        RunRecord.from_json_dict(raw)


def test_primary_metric_by_task():
    assert demo_record("binary").primary_metric == "auc"
    assert demo_record("multiclass").primary_metric == "macro_f1"


def test_generalization_gap():
    rec = demo_record()
    assert generalization_gap(rec) == pytest.approx(0.1)


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_accepts_lazy_iterables():
    cfg = toy()
    params = init_params(cfg, Rng(5))
    labels = np.array([0, 1, 0])
    images = (np.full((8, 8, 3), 0.1 * (i + 1)) for i in range(3))
    out = evaluate(params, cfg, images, labels, "binary")
    assert set(out) == {"accuracy", "macro_f1", "auc", "threshold_accuracy"}


def test_evaluate_counts_images():
    cfg = toy()
    params = init_params(cfg, Rng(5))
    too_few = (np.zeros((8, 8, 3)) for _ in range(2))
    with pytest.raises(ValueError, match="expected 3 images"):
        evaluate(params, cfg, too_few, np.array([0, 1, 0]), "binary")


def test_evaluate_multiclass_skips_binary_metrics():
    cfg = toy(num_classes=3)
    params = init_params(cfg, Rng(6))
    images = [np.zeros((8, 8, 3))] * 3
    out = evaluate(params, cfg, images, np.array([0, 1, 2]), "multiclass")
    assert set(out) == {"accuracy", "macro_f1"}


# ---------------------------------------------------------------------------
# full runs


@pytest.fixture(scope="module")
def tiny_task():
    train = make_synthetic(2, 8, 8, MODE_HISTOGRAM, seed=100)
    test = make_synthetic(2, 6, 8, MODE_HISTOGRAM, seed=200)
    return train, test


def test_run_protocol_is_bitwise_deterministic(tiny_task):
    train, test = tiny_task
    a = run_protocol(train, test, toy(), FAST, "t")
    b = run_protocol(train, test, toy(), FAST, "t")
    assert a.epoch_losses == b.epoch_losses
    assert a.train_metrics == b.train_metrics
    assert a.test_metrics == b.test_metrics


def test_run_protocol_seed_matters(tiny_task):
    train, test = tiny_task
    a = run_protocol(train, test, toy(), FAST, "t")
    c = run_protocol(train, test, toy(), FAST.with_seed(5), "t")
    assert a.epoch_losses != c.epoch_losses


def test_run_protocol_record_contents(tiny_task):
    train, test = tiny_task
    rec = run_protocol(train, test, toy(), FAST, "demo")
    assert rec.dataset_id == "demo"
    assert rec.param_count == count_params(toy())
    assert rec.task_kind == "binary"
    assert len(rec.epoch_losses) == FAST.epochs
    assert rec.wall_seconds > 0
    assert set(rec.test_metrics) == {"accuracy", "macro_f1", "auc", "threshold_accuracy"}
    assert all(np.isfinite(v) for v in rec.test_metrics.values())


def test_run_protocol_zero_epochs_still_evaluates(tiny_task):
    train, test = tiny_task
    rec = run_protocol(train, test, toy(), TrainProtocol(shots_per_class=2, epochs=0), "t")
    assert rec.epoch_losses == []
    assert "accuracy" in rec.test_metrics


def test_run_protocol_trains_final_partial_batch(tiny_task):
    # 2 classes x 3 shots = 6 images with batch 4: the 2-image remainder
    # must also step the optimiser, which shows up in the epoch loss
    train, test = tiny_task
    proto = TrainProtocol(shots_per_class=3, batch_size=4, epochs=1, seed=3)
    rec = run_protocol(train, test, toy(), proto, "t")
    assert len(rec.epoch_losses) == 1
    assert np.isfinite(rec.epoch_losses[0])


def test_run_protocol_rejects_incompatible_splits(tiny_task):
    train, test = tiny_task
    with pytest.raises(ConfigError, match="channels"):
        run_protocol(train, test, toy(channels=1), FAST, "t")
    with pytest.raises(ConfigError, match="classes"):
        run_protocol(train, test, toy(num_classes=3), FAST, "t")


def test_run_protocol_shots_capped_by_availability(tiny_task):
    train, test = tiny_task  # 8 per class available
    rec = run_protocol(
        train, test, toy(), TrainProtocol(shots_per_class=50, epochs=1, seed=3), "t"
    )
    assert len(rec.epoch_losses) == 1


def test_run_protocol_learns_the_easy_task(tiny_task):
    train, test = tiny_task
    proto = TrainProtocol(shots_per_class=8, epochs=10, seed=3)
    rec = run_protocol(train, test, toy(unit_dims=(16, 8), mlp_dims=(16, 8)), proto, "t")
    assert rec.train_metrics["accuracy"] >= 0.9


def test_baseline_param_count_in_expected_band():
    assert 190_000 <= count_params(baseline_config(8)) <= 310_000
