"""Tests for feature-collision poison crafting."""

import itertools

import numpy as np
import pytest
from PIL import Image

from poison_lab.data import Dataset, LabeledImage
from poison_lab.errors import ConfigError, InvalidArgumentError, ShapeError
from poison_lab.model import LayerSpec, build, build_profile
from poison_lab.poison import (
    Metric,
    PoisonConfig,
    StopReason,
    compute_beta,
    compute_stop_threshold,
    craft,
    craft_poison,
    craft_poison_linf,
    craft_poison_set,
    load_poison_blob,
    resolve_beta,
    save_poison_blob,
    save_poison_png,
    stop_threshold_from_features,
    watermark_blend,
)
from poison_lab.tensor import Tensor


def identity_model(shape=(1,)):
    """Model whose feature map is the flattened input."""
    return build([LayerSpec.flatten()], shape, seed=0)


def tiny_pair(seed=0):
    rng = np.random.default_rng(seed)
    target = rng.integers(0, 256, size=(1, 16, 16)).astype(float)
    base = rng.integers(0, 256, size=(1, 16, 16)).astype(float)
    return target, base


@pytest.mark.parametrize("lam", [0.05, 0.1, 0.25])
@pytest.mark.parametrize("target, base, beta", [(1.0, 0.0, 2.0), (200.0, 40.0, 0.5)])
def test_scalar_fixed_point(lam, target, base, beta):
    """Test the L2 iteration settles at (2t + beta*b) / (2 + beta) within 200 steps on an identity feature map."""
    model = identity_model()
    cfg = PoisonConfig(lam=lam, beta_override=beta, max_iters=200)
    result = craft_poison(model, np.array([target]), np.array([base]), cfg)
    expected = (2 * target + beta * base) / (2 + beta)
    assert abs(result.poison.data[0] - expected) < 1e-9
    assert result.stop_reason == StopReason.MAX_ITERS
    assert result.beta == beta


def test_target_equal_to_base():
    """Test crafting toward the base itself stops at once with zero distance."""
    model = build_profile("tiny", 2, seed=0)
    _, base = tiny_pair()
    result = craft_poison(model, base, base, PoisonConfig(max_iters=50))
    assert result.stop_reason == StopReason.THRESHOLD
    assert result.iterations == 1
    assert result.feature_distance == 0.0
    assert np.array_equal(result.poison.data, base)


def test_threshold_stop_on_identity_features():
    """Test the run ends early once the feature distance drops below the threshold."""
    model = identity_model((2,))
    cfg = PoisonConfig(lam=0.25, beta_override=0.0, max_iters=500, stop_threshold=1e-2)
    result = craft_poison(model, np.array([30.0, 220.0]), np.array([220.0, 30.0]), cfg)
    assert result.stop_reason == StopReason.THRESHOLD
    assert result.iterations < 500
    assert result.feature_distance < 1e-2


def test_crafting_never_worsens_distance():
    """Test the returned poison is at least as close as the base in feature space."""
    model = build_profile("tiny", 2, seed=3)
    target, base = tiny_pair(1)
    start = np.linalg.norm(model.features(base).data - model.features(target).data)
    result = craft_poison(model, target, base, PoisonConfig(lam=50.0, max_iters=20))
    assert result.feature_distance <= start
    assert result.stop_reason == StopReason.MAX_ITERS
    assert result.iterations == 20
    pixels = result.poison.data
    assert pixels.min() >= 0.0 and pixels.max() <= 255.0
    assert result.l2_to_base == pytest.approx(np.linalg.norm(pixels - base))


def test_linf_box_is_exact():
    """Test every Linf poison pixel stays within eps of its base."""
    model = build_profile("tiny", 2, seed=0)
    target, base = tiny_pair(2)
    base = base * 0.99 + 0.1
    base[0, 0, 0] = 0.3
    cfg = PoisonConfig(lam=500.0, max_iters=10, metric="linf", eps_inf=2.0)
    result = craft_poison_linf(model, target, base, cfg)
    assert np.max(np.abs(result.poison.data - base)) <= 2.0
    assert result.linf_to_base <= 2.0
    assert result.poison.data.min() >= 0.0


def test_linf_zero_budget_returns_base():
    """Test eps = 0 leaves the base untouched."""
    model = build_profile("tiny", 2, seed=0)
    target, base = tiny_pair(3)
    result = craft(model, target, base, PoisonConfig(metric="linf", eps_inf=0.0, max_iters=5))
    assert np.array_equal(result.poison.data, base)
    assert result.linf_to_base == 0.0


def test_unbounded_linf_matches_unregularised_l2():
    """Test an infinite Linf box behaves like L2 crafting with beta = 0."""
    model = build_profile("tiny", 2, seed=1)
    target, base = tiny_pair(4)
    l2 = craft_poison(model, target, base, PoisonConfig(lam=20.0, beta_override=0.0, max_iters=8))
    linf = craft_poison_linf(model, target, base,
                             PoisonConfig(lam=20.0, max_iters=8, metric="linf", eps_inf=float("inf")))
    assert np.array_equal(l2.poison.data, linf.poison.data)
    assert l2.feature_distance == linf.feature_distance


def test_step_size_decay():
    """Test the step size shrinks after each stretch without progress."""
    model = build_profile("tiny", 2, seed=0)
    target, base = tiny_pair(5)
    cfg = PoisonConfig(lam=1.0, max_iters=6, metric="linf", eps_inf=0.0, decay=0.5, decay_patience=2)
    result = craft(model, target, base, cfg)
    assert result.final_lam == pytest.approx(0.125)


def test_input_checks():
    """Test mis-shaped and out-of-range images are refused."""
    model = build_profile("tiny", 2, seed=0)
    target, base = tiny_pair()
    with pytest.raises(ShapeError):
        craft_poison(model, target, np.zeros((1, 8, 8)), PoisonConfig())
    with pytest.raises(InvalidArgumentError):
        craft_poison(model, target + 300.0, base, PoisonConfig())


def test_poison_config_validation():
    """Test invalid crafting settings raise ConfigError."""
    with pytest.raises(ConfigError):
        PoisonConfig(lam=0.0)
    with pytest.raises(ConfigError):
        PoisonConfig(max_iters=0)
    with pytest.raises(ConfigError):
        PoisonConfig(eps_inf=-1.0)
    with pytest.raises(ConfigError):
        PoisonConfig(decay=1.5)
    with pytest.raises(ValueError):
        PoisonConfig(metric="l1")
    assert PoisonConfig(metric="linf").metric == Metric.LINF


def test_compute_beta():
    """Test beta scales with the squared feature-to-input ratio."""
    assert compute_beta(0.25, 192, 3072) == 0.25 / 256
    assert compute_beta(0.25, 64, 256) == 0.015625
    with pytest.raises(InvalidArgumentError):
        compute_beta(0.25, 0, 256)


def test_resolve_beta_in_pixel_units():
    """Test the dimension rule is rescaled to raw pixels and overrides pass through."""
    tiny = build_profile("tiny", 2, seed=0)
    assert resolve_beta(tiny, PoisonConfig(beta0=0.25)) == pytest.approx(0.015625 / 255.0 ** 2)
    assert resolve_beta(identity_model((4,)), PoisonConfig(beta0=0.25)) == pytest.approx(0.25)
    assert resolve_beta(tiny, PoisonConfig(beta_override=0.1)) == 0.1


def test_stop_threshold_matches_brute_force():
    """Test the threshold is the smallest pairwise row distance."""
    rows = np.random.default_rng(0).normal(size=(12, 5))
    brute = min(np.linalg.norm(a - b) for a, b in itertools.combinations(rows, 2))
    assert stop_threshold_from_features(rows) == pytest.approx(brute, abs=1e-12)

    with pytest.raises(InvalidArgumentError):
        stop_threshold_from_features(rows[:1])


def test_compute_stop_threshold_on_dataset():
    """Test the dataset threshold is measured in feature space."""
    images = [LabeledImage(Tensor([v, 0.0]), 0, str(v)) for v in (0.0, 10.0, 13.0, 40.0)]
    dataset = Dataset(images, ["a"], "train")
    assert compute_stop_threshold(identity_model((2,)), dataset) == pytest.approx(3.0)


def test_watermark_blend():
    """Test the blend weights and its exact endpoints."""
    base = np.full((1, 2, 2), 100.0)
    target = np.full((1, 2, 2), 200.0)
    assert np.allclose(watermark_blend(base, target, 0.3).data, 130.0)
    assert np.array_equal(watermark_blend(base, target, 0.0).data, base)
    assert np.array_equal(watermark_blend(base, target, 1.0).data, target)
    with pytest.raises(InvalidArgumentError):
        watermark_blend(base, target, 1.5)
    with pytest.raises(ShapeError):
        watermark_blend(base, np.zeros((1, 3, 3)), 0.5)


def test_poison_set_order_independent_of_parallelism():
    """Test threaded crafting returns the same poisons in base order."""
    model = build_profile("tiny", 2, seed=2)
    rng = np.random.default_rng(7)
    target = rng.integers(0, 256, size=(1, 16, 16)).astype(float)
    bases = [LabeledImage(Tensor(rng.integers(0, 256, size=(1, 16, 16)).astype(float)), 0, f"b{i}")
             for i in range(4)]
    cfg = PoisonConfig(lam=10.0, max_iters=5)
    serial = craft_poison_set(model, target, bases, cfg, gamma=0.3, parallelism=1)
    threaded = craft_poison_set(model, target, bases, cfg, gamma=0.3, parallelism=4)
    assert len(serial) == 4
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.poison.data, b.poison.data)
        assert a.iterations == b.iterations


def test_poison_set_flags_failures():
    """Test one failing base is flagged while the others still craft."""
    model = build_profile("tiny", 2, seed=0)
    target, base = tiny_pair(6)
    broken = base.copy()
    broken[0, 3, 3] = np.nan
    results = craft_poison_set(model, target, [base, broken], PoisonConfig(max_iters=2), gamma=0.0)
    assert not results[0].failed
    assert results[1].failed
    assert results[1].stop_reason == StopReason.FAILED
    assert "non-finite" in results[1].error

    with pytest.raises(InvalidArgumentError):
        craft_poison_set(model, target, [], PoisonConfig(), gamma=0.0)


def test_png_export(tmp_path):
    """Test grey and colour poisons export as 8-bit PNGs."""
    grey = np.arange(16, dtype=float).reshape(1, 4, 4) * 10.4
    save_poison_png(grey, tmp_path / "grey.png")
    with Image.open(tmp_path / "grey.png") as image:
        assert image.mode == "L"
        assert image.size == (4, 4)
        assert image.getpixel((1, 0)) == 10

    colour = np.zeros((3, 2, 5))
    colour[0, 1, 4] = 255.0
    colour[2, 1, 4] = 7.6
    save_poison_png(colour, tmp_path / "sub" / "colour.png")
    with Image.open(tmp_path / "sub" / "colour.png") as image:
        assert image.mode == "RGB"
        assert image.size == (5, 2)
        assert image.getpixel((4, 1)) == (255, 0, 8)

    with pytest.raises(ShapeError):
        save_poison_png(np.zeros((2, 4, 4)), tmp_path / "bad.png")


def test_blob_is_lossless(tmp_path):
    """Test the blob keeps every float64 bit of every poison."""
    model = identity_model((2,))
    result = craft_poison(model, np.array([1.0, 2.0]), np.array([100.0 / 3.0, 5.0]), PoisonConfig(max_iters=3))
    raw = np.array([0.1, 254.999999])
    save_poison_blob([result, raw], tmp_path / "poisons.pfck")
    loaded = load_poison_blob(tmp_path / "poisons.pfck")
    assert loaded[0].data.tobytes() == result.poison.data.tobytes()
    assert loaded[1].data.tobytes() == raw.tobytes()
