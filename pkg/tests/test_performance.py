"""Performance tests for gradients, crafting and binary formats."""

import time

import numpy as np

from poison_lab import checkpoint
from poison_lab.data import CIFAR_RECORD_BYTES, CIFAR10_CLASSES, Dataset, parse_cifar10, serialize_cifar10
from poison_lab.model import LayerSpec, build, build_profile, profile_specs
from poison_lab.poison import PoisonConfig, craft_poison
from tests.gradcheck import max_gradient_error


def test_feature_gradient_check_speed():
    """Test a finite-difference check of the poison gradient finishes quickly."""
    model = build_profile("tiny", 2, seed=0, input_shape=(1, 8, 8))
    rng = np.random.default_rng(0)
    x = rng.uniform(0.0, 255.0, size=(1, 1, 8, 8))
    goal = model.features(rng.uniform(0.0, 255.0, size=(1, 1, 8, 8))).data

    def build_loss(graph, ids):
        nodes = model.forward(graph, ids[0], with_logits=False)
        return graph.l2sq_distance(nodes.features, graph.constant(goal))

    start_time = time.time()
    error = max_gradient_error(build_loss, [x])
    elapsed = time.time() - start_time

    assert error < 1e-5
    assert elapsed < 30.0


def test_fixed_point_speed():
    """Test a thousand crafting iterations on a scalar problem take under a second."""
    model = build([LayerSpec.flatten()], (1,), seed=0)
    cfg = PoisonConfig(lam=0.1, beta_override=0.5, max_iters=1000)

    start_time = time.time()
    result = craft_poison(model, np.array([200.0]), np.array([40.0]), cfg)
    elapsed = time.time() - start_time

    assert result.iterations == 1000
    assert elapsed < 1.0, f"Crafting took {elapsed:.2f}s"


def test_checkpoint_speed():
    """Test saving and loading the largest profile is fast."""
    model = build_profile("table1", 10, seed=0)
    specs, shape = profile_specs("table1", 10)

    start_time = time.time()
    restored = checkpoint.load(checkpoint.save(model), specs, shape)
    elapsed = time.time() - start_time

    assert restored.final_weights.shape == (10, 192)
    assert elapsed < 10.0


def test_cifar_record_speed():
    """Test encoding and decoding a thousand CIFAR-10 records is fast."""
    rng = np.random.default_rng(1)
    records = rng.integers(0, 256, size=(1000, CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] %= 10
    raw = records.tobytes()

    start_time = time.time()
    dataset = Dataset(parse_cifar10(raw), CIFAR10_CLASSES, "train")
    encoded = serialize_cifar10(dataset)
    elapsed = time.time() - start_time

    assert encoded == raw
    assert elapsed < 10.0
