"""Tests for Adam, the retraining loop and evaluation."""

import numpy as np
import pytest

from poison_lab import optim
from poison_lab.data import Dataset, LabeledImage
from poison_lab.errors import ConfigError, InvalidArgumentError, ShapeError, TrainingDivergedError
from poison_lab.model import LayerSpec, build, build_profile
from poison_lab.optim import (
    AdamState,
    FreezeMode,
    InitMode,
    TrainConfig,
    adam_step,
    end_to_end_profile,
    evaluate,
    scaled_batch_size,
    train,
    transfer_profile,
)
from poison_lab.tensor import Tensor


def point_dataset(per_class=10, seed=0):
    """Two well separated clusters of 2-pixel images."""
    rng = np.random.default_rng(seed)
    images = []
    for i in range(per_class):
        a = [rng.uniform(0, 60), rng.uniform(180, 255)]
        b = [rng.uniform(180, 255), rng.uniform(0, 60)]
        images.append(LabeledImage(Tensor(a), 0, f"p0:{i}"))
        images.append(LabeledImage(Tensor(b), 1, f"p1:{i}"))
    return Dataset(images, ["left", "right"], "train")


def linear_model(seed=0):
    return build([LayerSpec.scale(1.0 / 255.0), LayerSpec.flatten(), LayerSpec.dense(2)], (2,), seed)


def hidden_model(seed=0):
    return build([LayerSpec.scale(1.0 / 255.0), LayerSpec.flatten(), LayerSpec.dense(4),
                  LayerSpec.relu(), LayerSpec.dense(2)], (2,), seed)


def test_profiles():
    """Test the two retraining profiles carry their documented settings."""
    transfer = transfer_profile()
    assert (transfer.epochs, transfer.batch_size, transfer.lr) == (100, 1, 0.01)
    assert transfer.freeze == FreezeMode.FINAL_LAYER
    assert transfer.init == InitMode.COLD

    end2end = end_to_end_profile()
    assert (end2end.epochs, end2end.batch_size, end2end.lr) == (10, 128, 1.85e-5)
    assert end2end.freeze == FreezeMode.ALL_LAYERS
    assert end2end.init == InitMode.WARM

    assert transfer_profile(epochs=3).epochs == 3


def test_train_config_validation():
    """Test nonsensical training settings are refused."""
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="sgd")
    assert TrainConfig(freeze="all", init="warm").freeze == FreezeMode.ALL_LAYERS


def test_adam_first_step():
    """Test the first bias-corrected Adam step moves by lr against the gradient sign."""
    params = {"w": Tensor([1.0, -2.0])}
    state = AdamState.for_params(params, lr=0.1)
    updated, state = adam_step(state, params, {"w": Tensor([0.5, -3.0])})
    assert np.allclose(updated["w"].data, [0.9, -1.9], atol=1e-6)
    assert state.step == 1
    assert np.array_equal(params["w"].data, [1.0, -2.0])


def test_adam_zero_gradient_keeps_parameters():
    """Test a zero gradient leaves parameters in place."""
    params = {"w": Tensor([3.0])}
    state = AdamState.for_params(params, lr=0.5)
    updated, _ = adam_step(state, params, {"w": Tensor([0.0])})
    assert updated["w"].data.tolist() == [3.0]


def test_adam_gradient_mismatch():
    """Test missing and mis-shaped gradients are reported."""
    params = {"w": Tensor([1.0, 2.0])}
    state = AdamState.for_params(params, lr=0.1)
    with pytest.raises(ShapeError):
        adam_step(state, params, {})
    with pytest.raises(ShapeError):
        adam_step(state, params, {"w": Tensor([1.0])})


def test_train_separates_clusters():
    """Test training a linear head drives loss down to full accuracy."""
    dataset = point_dataset()
    config = TrainConfig(epochs=60, batch_size=4, lr=0.05, freeze="all", init="cold")
    result = train(linear_model(), dataset, config)
    assert len(result.history) == 60
    assert result.final_loss < result.losses[0]
    assert result.final_accuracy == 1.0
    assert evaluate(result.model, dataset).accuracy == 1.0


def test_train_is_deterministic():
    """Test identical seeds reproduce the loss curve and weights exactly."""
    dataset = point_dataset()
    config = TrainConfig(epochs=5, batch_size=3, lr=0.01, freeze="all", init="cold", shuffle_seed=4)
    first = train(hidden_model(), dataset, config)
    second = train(hidden_model(), dataset, config)
    assert first.losses == second.losses
    for name in first.model.params:
        assert np.array_equal(first.model.params[name].data, second.model.params[name].data)


def test_train_leaves_input_model_untouched():
    """Test train works on a copy of the model."""
    model = hidden_model()
    before = {name: t.data.copy() for name, t in model.params.items()}
    train(model, point_dataset(), TrainConfig(epochs=2, batch_size=4, freeze="all", init="warm"))
    for name, value in before.items():
        assert np.array_equal(model.params[name].data, value)
    assert all(model.trainable.values())


def test_final_layer_freeze():
    """Test only the final layer moves when everything else is frozen."""
    model = hidden_model(seed=1)
    config = TrainConfig(epochs=3, batch_size=4, lr=0.05, freeze="final", init="warm")
    result = train(model, point_dataset(), config)
    assert np.array_equal(result.model.params["layer2.weight"].data, model.params["layer2.weight"].data)
    assert np.array_equal(result.model.params["layer2.bias"].data, model.params["layer2.bias"].data)
    assert not np.array_equal(result.model.final_bias.data, model.final_bias.data)


def test_head_path_matches_full_path():
    """Test training the head on cached features equals backprop through the frozen stack."""
    model = hidden_model(seed=2)
    dataset = point_dataset()
    config = TrainConfig(epochs=4, batch_size=5, lr=0.02, freeze="final", init="cold", init_seed=3)
    cached = train(model, dataset, config)

    frozen = model.clone().freeze_all_but_final()
    frozen.reinitialize(frozen.trainable_names(), config.init_seed)
    pixels, labels = dataset.arrays()
    state = AdamState.for_params({n: frozen.params[n] for n in frozen.trainable_names()}, config.lr)
    rng = np.random.default_rng(config.shuffle_seed)
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), config.batch_size):
            batch = order[start:start + config.batch_size]
            _, _, grads = optim._full_step(frozen, pixels[batch], labels[batch])
            updated, state = adam_step(state, {n: frozen.params[n] for n in grads}, grads)
            frozen.update(updated)

    assert np.allclose(cached.model.final_weights.data, frozen.final_weights.data, atol=1e-8)
    assert np.allclose(cached.model.final_bias.data, frozen.final_bias.data, atol=1e-8)


def test_cold_start_reinitializes():
    """Test cold start redraws trainable weights from init_seed."""
    model = hidden_model()
    config = TrainConfig(epochs=1, batch_size=20, lr=1e-9, freeze="final", init="cold", init_seed=8)
    result = train(model, point_dataset(), config)
    assert not np.allclose(result.model.final_weights.data, model.final_weights.data, atol=1e-3)


def test_on_epoch_callback():
    """Test the epoch hook sees every epoch with the current model."""
    seen = []
    train(linear_model(), point_dataset(), TrainConfig(epochs=3, batch_size=8, freeze="all"),
          on_epoch=lambda epoch, model, stats: seen.append((epoch, stats.epoch, model.feature_dim)))
    assert seen == [(1, 1, 2), (2, 2, 2), (3, 3, 2)]


def test_divergence_detected(monkeypatch):
    """Test a non-finite epoch loss stops training."""
    def exploding(model, features, labels):
        grads = {name: Tensor.zeros(model.params[name].shape) for name in model.final_parameter_names()}
        return float("nan"), np.zeros((len(labels), 2)), grads

    monkeypatch.setattr(optim, "_head_step", exploding)
    with pytest.raises(TrainingDivergedError) as info:
        train(linear_model(), point_dataset(), TrainConfig(epochs=3, freeze="final"))
    assert info.value.epoch == 1


def test_train_input_checks():
    """Test empty datasets, unknown labels and wrong shapes are refused."""
    empty = Dataset([], ["a", "b"], "train")
    with pytest.raises(InvalidArgumentError):
        train(linear_model(), empty, TrainConfig())

    three = Dataset([LabeledImage(Tensor([1.0, 2.0]), 2, "x")], ["a", "b", "c"], "train")
    with pytest.raises(InvalidArgumentError):
        train(linear_model(), three, TrainConfig())

    with pytest.raises(ShapeError):
        train(build_profile("tiny", 2, seed=0), point_dataset(), TrainConfig())


def test_evaluate():
    """Test accuracy and confidence on a hand-built head."""
    model = linear_model()
    model.update({
        "layer2.weight": Tensor([[-10.0, 10.0], [10.0, -10.0]]),
        "layer2.bias": Tensor([0.0, 0.0]),
    })
    result = evaluate(model, point_dataset(per_class=5))
    assert result.accuracy == 1.0
    assert 0.5 < result.mean_confidence <= 1.0
    assert len(result.predictions) == 10
    assert abs(sum(result.predictions[0].probabilities) - 1.0) < 1e-12

    empty = evaluate(model, Dataset([], ["a", "b"], "test"))
    assert empty.accuracy == 0.0
    assert empty.predictions == []


def test_scaled_batch_size():
    """Test batch sizes shrink in proportion to small training sets."""
    assert scaled_batch_size(128, 50000, 50000) == 128
    assert scaled_batch_size(128, 60000, 50000) == 128
    assert scaled_batch_size(128, 200, 50000) == 1
    assert scaled_batch_size(128, 5000, 50000) == 13
    assert scaled_batch_size(16, 25000, 50000) == 8
