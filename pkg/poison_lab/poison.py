"""Feature-collision poison crafting by forward-backward splitting.

The poison starts at the base image ``b``. Each iteration takes a gradient
step on ``Lp(x) = ||f(x) - f(t)||^2`` and then either a proximal step that
pulls the image back toward ``b`` (L2 metric) or a per-pixel clip into the
box ``[b - eps, b + eps]`` (Linf metric).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .checkpoint import decode_tensors, encode_tensors
from .data import PIXEL_MAX, PIXEL_MIN, Dataset
from .errors import ConfigError, InvalidArgumentError, PoisonCraftingError, PoisonLabError, ShapeError
from .model import Model
from .tensor import Graph, Tensor, as_array, backward

logger = logging.getLogger(__name__)

TRANSFER_MAX_ITERS = 1000
# Raw-pixel step for models that scale inputs by 1/255: about 1.5e-3 in their own units.
TRANSFER_LAM = 100.0
DEFAULT_DECAY = 0.5
END_TO_END_MAX_ITERS = 12000
END_TO_END_BETA = 0.1


class Metric(Enum):
    """How the poison is kept close to its base in input space."""
    L2 = "l2"
    LINF = "linf"


class StopReason(Enum):
    THRESHOLD = "threshold"
    MAX_ITERS = "max_iters"
    FAILED = "failed"


@dataclass
class PoisonConfig:
    """Crafting hyperparameters; ``lam`` is the forward step size."""

    beta0: float = 0.25
    beta_override: Optional[float] = None
    lam: float = 0.01
    max_iters: int = TRANSFER_MAX_ITERS
    metric: Metric = Metric.L2
    eps_inf: float = 2.0
    stop_threshold: Optional[float] = None
    decay: Optional[float] = None
    decay_patience: int = 50

    def __post_init__(self):
        self.metric = Metric(self.metric)
        if not self.lam > 0:
            raise ConfigError(f"lam must be > 0, got {self.lam}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.eps_inf >= 0:
            raise ConfigError(f"eps_inf must be >= 0, got {self.eps_inf}")
        if self.beta_override is not None and self.beta_override < 0:
            raise ConfigError(f"beta_override must be >= 0, got {self.beta_override}")
        if self.decay is not None and not 0 < self.decay < 1:
            raise ConfigError(f"decay must lie in (0, 1), got {self.decay}")
        if self.decay_patience < 1:
            raise ConfigError(f"decay_patience must be >= 1, got {self.decay_patience}")


@dataclass
class PoisonResult:
    """A crafted poison and how it got there."""

    poison: Tensor
    iterations: int
    feature_distance: float
    l2_to_base: float
    linf_to_base: float
    stop_reason: StopReason
    beta: float
    final_lam: float
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def compute_beta(beta0: float, feature_dim: int, base_input_dim: int) -> float:
    """Scale beta0 by (feature_dim / base_input_dim) squared."""
    if feature_dim < 1 or base_input_dim < 1:
        raise InvalidArgumentError(
            f"dimensions must be >= 1, got feature_dim={feature_dim}, base_input_dim={base_input_dim}"
        )
    return beta0 * feature_dim ** 2 / base_input_dim ** 2


def stop_threshold_from_features(features) -> float:
    """Smallest L2 distance between any two distinct rows."""
    rows = as_array(features)
    rows = rows.reshape(rows.shape[0], -1) if rows.ndim else rows
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise InvalidArgumentError("need at least two feature vectors for a stop threshold")
    best = math.inf
    for i in range(rows.shape[0] - 1):
        gaps = np.sqrt(np.sum((rows[i + 1:] - rows[i]) ** 2, axis=1))
        best = min(best, float(gaps.min()))
    return best


def compute_stop_threshold(model: Model, training: Union[Dataset, Tensor, np.ndarray]) -> float:
    """Minimum pairwise feature-space distance over a training set."""
    pixels = training.arrays()[0] if isinstance(training, Dataset) else as_array(training)
    return stop_threshold_from_features(model.features(pixels))


def resolve_beta(model: Model, cfg: PoisonConfig) -> float:
    """Beta the iteration uses on raw pixels.

    The dimension rule weighs ``||x - b||^2`` in the network's own input units,
    so it is carried over to raw pixels by the square of ``model.input_scale``.
    An explicit ``beta_override`` is used as given.
    """
    if cfg.beta_override is not None:
        return cfg.beta_override
    return compute_beta(cfg.beta0, model.feature_dim, model.input_dim) * model.input_scale ** 2


def watermark_blend(base, target, gamma: float) -> Tensor:
    """``gamma * target + (1 - gamma) * base``, clipped to the pixel range."""
    if not 0.0 <= gamma <= 1.0:
        raise InvalidArgumentError(f"gamma must lie in [0, 1], got {gamma}")
    b, t = as_array(base), as_array(target)
    if b.shape != t.shape:
        raise ShapeError(f"watermark shapes differ: base {b.shape}, target {t.shape}")
    if gamma == 0.0:
        return Tensor(b)
    if gamma == 1.0:
        return Tensor(t)
    return Tensor.wrap(np.clip(gamma * t + (1.0 - gamma) * b, PIXEL_MIN, PIXEL_MAX))


def _feature_loss(model: Model, x: np.ndarray, target_features: np.ndarray):
    """``Lp(x)`` and its gradient with respect to the image."""
    graph = Graph()
    image = graph.input(x[None])
    nodes = model.forward(graph, image, with_logits=False)
    loss = graph.l2sq_distance(nodes.features, graph.constant(target_features))
    grads = backward(graph, loss)
    return float(graph.array(loss)), grads[image].data[0]


def _check_images(model: Model, target: np.ndarray, base: np.ndarray):
    for name, image in (("target", target), ("base", base)):
        if image.shape != model.input_shape:
            raise ShapeError(f"{name} shape {image.shape} does not match model input {model.input_shape}")
        if not np.all(np.isfinite(image)):
            raise InvalidArgumentError(f"{name} has non-finite pixels")
        if image.min() < PIXEL_MIN or image.max() > PIXEL_MAX:
            raise InvalidArgumentError(f"{name} pixels leave [0, 255]")


def _l2_backward_step(lam: float, beta: float, base: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    weight = lam * beta / (1.0 + lam * beta)

    def step(x_hat: np.ndarray) -> np.ndarray:
        # equals (x_hat + lam*beta*b) / (1 + lam*beta); a no-op when x_hat == b
        return np.clip(x_hat + weight * (base - x_hat), PIXEL_MIN, PIXEL_MAX)

    return step


def _box_clip(base: np.ndarray, eps: float) -> Callable[[np.ndarray], np.ndarray]:
    low = np.maximum(base - eps, PIXEL_MIN)
    high = np.minimum(base + eps, PIXEL_MAX)

    def step(x_hat: np.ndarray) -> np.ndarray:
        x = np.clip(x_hat, low, high)
        # rounding in base +- eps may overshoot by an ulp
        over = np.abs(x - base) > eps
        while np.any(over):
            x[over] = np.nextafter(x[over], base[over])
            over = np.abs(x - base) > eps
        return x

    return step


def _split(model: Model, target, base, cfg: PoisonConfig, beta: float, metric: Metric) -> PoisonResult:
    """Shared forward-backward loop; returns the best iterate by ``Lp``."""
    t, b = as_array(target), as_array(base)
    _check_images(model, t, b)
    target_features = model.features(t).data
    lam = cfg.lam
    project = _box_clip(b, cfg.eps_inf) if metric == Metric.LINF else _l2_backward_step(lam, beta, b)

    x = b.copy()
    loss, grad = _feature_loss(model, x, target_features)
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise PoisonCraftingError("non-finite feature loss or gradient", 0)
    best_x, best_loss = x, loss
    stale = 0
    iterations = 0
    reason = StopReason.MAX_ITERS
    for iteration in range(1, cfg.max_iters + 1):
        iterations = iteration
        x = project(x - lam * grad)
        loss, grad = _feature_loss(model, x, target_features)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise PoisonCraftingError("non-finite feature loss or gradient", iteration)
        if loss < best_loss:
            best_x, best_loss = x, loss
            stale = 0
        else:
            stale += 1
        distance = math.sqrt(loss)
        if loss == 0.0 or (cfg.stop_threshold is not None and distance < cfg.stop_threshold):
            reason = StopReason.THRESHOLD
            break
        if cfg.decay is not None and stale >= cfg.decay_patience:
            lam *= cfg.decay
            stale = 0
            if metric == Metric.L2:
                project = _l2_backward_step(lam, beta, b)
            logger.debug("no progress for %d iterations, step size now %.3g", cfg.decay_patience, lam)

    diff = best_x - b
    result = PoisonResult(
        poison=Tensor.wrap(best_x),
        iterations=iterations,
        feature_distance=math.sqrt(best_loss),
        l2_to_base=float(np.sqrt(np.sum(diff * diff))),
        linf_to_base=float(np.max(np.abs(diff))) if diff.size else 0.0,
        stop_reason=reason,
        beta=beta,
        final_lam=lam,
    )
    logger.debug("crafted poison in %d iterations, feature distance %.4g (%s)",
                 iterations, result.feature_distance, reason.value)
    return result


def craft_poison(model: Model, target, base, cfg: PoisonConfig) -> PoisonResult:
    """L2 variant: gradient step, proximal pull toward ``base``, pixel clip."""
    return _split(model, target, base, cfg, resolve_beta(model, cfg), Metric.L2)


def craft_poison_linf(model: Model, target, base, cfg: PoisonConfig) -> PoisonResult:
    """Linf variant: gradient step, then clip every pixel to within ``eps_inf`` of ``base``."""
    return _split(model, target, base, cfg, resolve_beta(model, cfg), Metric.LINF)


def craft(model: Model, target, base, cfg: PoisonConfig) -> PoisonResult:
    """Dispatch on ``cfg.metric``."""
    if cfg.metric == Metric.LINF:
        return craft_poison_linf(model, target, base, cfg)
    return craft_poison(model, target, base, cfg)


def _failed_result(base: Tensor, beta: float, cfg: PoisonConfig, error: Exception) -> PoisonResult:
    return PoisonResult(
        poison=base,
        iterations=getattr(error, "iteration", 0),
        feature_distance=0.0,
        l2_to_base=0.0,
        linf_to_base=0.0,
        stop_reason=StopReason.FAILED,
        beta=beta,
        final_lam=cfg.lam,
        error=str(error),
    )


def craft_poison_set(model: Model, target, bases: Sequence, cfg: PoisonConfig,
                     gamma: float, parallelism: int = 1) -> List[PoisonResult]:
    """Watermark every base with the target, then craft each poison independently.

    Results come back in base order whatever ``parallelism`` is. A poison
    whose crafting fails is returned flagged instead of aborting the rest.
    """
    if not bases:
        raise InvalidArgumentError("craft_poison_set needs at least one base")
    if parallelism < 1:
        raise InvalidArgumentError(f"parallelism must be >= 1, got {parallelism}")
    beta = resolve_beta(model, cfg)
    marked = [watermark_blend(getattr(b, "pixels", b), target, gamma) for b in bases]

    def one(index: int) -> PoisonResult:
        try:
            return craft(model, target, marked[index], cfg)
        except PoisonLabError as exc:
            logger.warning("poison %d failed: %s", index, exc)
            return _failed_result(marked[index], beta, cfg, exc)

    if parallelism == 1:
        return [one(i) for i in range(len(marked))]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, range(len(marked))))


def save_poison_png(poison, path: Union[str, Path]):
    """8-bit PNG for inspection; pixels are rounded, so this is lossy."""
    pixels = as_array(poison)
    if pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
        raise ShapeError(f"PNG export needs a 1- or 3-channel C x H x W image, got {pixels.shape}")
    raster = np.clip(np.rint(pixels), PIXEL_MIN, PIXEL_MAX).astype(np.uint8)
    if raster.shape[0] == 1:
        image = Image.fromarray(raster[0], mode="L")
    else:
        image = Image.fromarray(np.transpose(raster, (1, 2, 0)), mode="RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    image.save(str(path), format="PNG")


def save_poison_blob(poisons: Sequence, path: Union[str, Path]):
    """Lossless float64 dump of poisons in the checkpoint tensor format."""
    tensors = {f"poison{i}": Tensor(as_array(getattr(p, "poison", p))) for i, p in enumerate(poisons)}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_tensors(tensors))


def load_poison_blob(path: Union[str, Path]) -> List[Tensor]:
    tensors = decode_tensors(Path(path).read_bytes())
    return [tensors[f"poison{i}"] for i in range(len(tensors))]
