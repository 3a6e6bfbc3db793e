"""Adam, the retraining loop for both attack scenarios, and evaluation."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .data import Dataset
from .errors import ConfigError, InvalidArgumentError, ShapeError, TrainingDivergedError
from .model import Model
from .tensor import Graph, Tensor, backward

logger = logging.getLogger(__name__)


class FreezeMode(Enum):
    """Which parameters a retraining run may move."""
    FINAL_LAYER = "final"
    ALL_LAYERS = "all"


class InitMode(Enum):
    """Where trainable weights start."""
    COLD = "cold"
    WARM = "warm"


@dataclass
class TrainConfig:
    """Knobs of one training run."""

    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.01
    optimizer: str = "adam"
    shuffle_seed: int = 0
    freeze: FreezeMode = FreezeMode.FINAL_LAYER
    init: InitMode = InitMode.COLD
    init_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.freeze = FreezeMode(self.freeze)
        self.init = InitMode(self.init)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.optimizer != "adam":
            raise ConfigError(f"only the 'adam' optimizer is supported, got '{self.optimizer}'")


def transfer_profile(**overrides) -> TrainConfig:
    """Final layer only, cold start, Adam at 0.01 for 100 epochs of single-example steps."""
    settings = dict(epochs=100, batch_size=1, lr=0.01,
                    freeze=FreezeMode.FINAL_LAYER, init=InitMode.COLD)
    settings.update(overrides)
    return TrainConfig(**settings)


def end_to_end_profile(**overrides) -> TrainConfig:
    """All layers, warm start, Adam at 1.85e-5 for 10 epochs of batch 128."""
    settings = dict(epochs=10, batch_size=128, lr=1.85e-5,
                    freeze=FreezeMode.ALL_LAYERS, init=InitMode.WARM)
    settings.update(overrides)
    return TrainConfig(**settings)


@dataclass
class AdamState:
    """Bias-corrected Adam moments, one pair per parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Dict[str, Tensor], lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
            first={name: np.zeros(t.shape) for name, t in params.items()},
            second={name: np.zeros(t.shape) for name, t in params.items()},
        )


def adam_step(state: AdamState, params: Dict[str, Tensor],
              grads: Dict[str, Tensor]) -> Tuple[Dict[str, Tensor], AdamState]:
    """One Adam update; returns new parameters and a new state."""
    step = state.step + 1
    first: Dict[str, np.ndarray] = {}
    second: Dict[str, np.ndarray] = {}
    updated: Dict[str, Tensor] = {}
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step
    for name, param in params.items():
        if name not in grads:
            raise ShapeError(f"no gradient for parameter '{name}'")
        grad = grads[name].data
        if grad.shape != param.shape:
            raise ShapeError(f"gradient for '{name}' has shape {grad.shape}, parameter {param.shape}")
        m = state.first.get(name, np.zeros(param.shape))
        v = state.second.get(name, np.zeros(param.shape))
        if m.shape != param.shape:
            raise ShapeError(f"moment for '{name}' has shape {m.shape}, parameter {param.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        updated[name] = Tensor.wrap(param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        first[name], second[name] = m, v
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, step, first, second)
    return updated, new_state


@dataclass
class EpochStats:
    """Mean loss and accuracy over one epoch's minibatches."""

    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    """Loss curve and the trained model."""

    model: Model
    history: List[EpochStats]

    @property
    def losses(self) -> List[float]:
        return [s.loss for s in self.history]

    @property
    def final_loss(self) -> float:
        return self.history[-1].loss

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].accuracy


EpochCallback = Callable[[int, Model, EpochStats], None]


def _check_dataset(model: Model, dataset: Dataset):
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot train on an empty dataset")
    _, labels = dataset.arrays()
    if labels.max() >= model.num_classes:
        raise InvalidArgumentError(
            f"label {labels.max()} exceeds the model's {model.num_classes} classes"
        )
    if dataset.image_shape != model.input_shape:
        raise ShapeError(f"dataset images {dataset.image_shape} vs model input {model.input_shape}")


def _head_step(model: Model, features: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray, Dict[str, Tensor]]:
    """Loss, logits and gradients of the final dense layer on cached features."""
    weight_name, bias_name = model.final_parameter_names()
    graph = Graph()
    x = graph.constant(features)
    w = graph.input(model.params[weight_name])
    b = graph.input(model.params[bias_name])
    logits = graph.dense(x, w, b)
    loss = graph.softmax_cross_entropy(logits, labels)
    grads = backward(graph, loss)
    return float(graph.array(loss)), graph.array(logits), {weight_name: grads[w], bias_name: grads[b]}


def _full_step(model: Model, pixels: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray, Dict[str, Tensor]]:
    """Loss, logits and gradients of every trainable parameter."""
    graph = Graph()
    nodes = model.forward(graph, graph.constant(pixels), trainable_roots=True)
    loss = graph.softmax_cross_entropy(nodes.logits, labels)
    grads = backward(graph, loss)
    trainable = {name: grads[node] for name, node in nodes.params.items() if model.trainable[name]}
    return float(graph.array(loss)), graph.array(nodes.logits), trainable


def train(model: Model, dataset: Dataset, config: TrainConfig,
          on_epoch: Optional[EpochCallback] = None) -> TrainResult:
    """Retrain a copy of ``model`` on ``dataset``; the input model is untouched.

    When only the final layer trains, features are computed once through the
    frozen stack and the loop optimises the head alone.
    """
    _check_dataset(model, dataset)
    model = model.clone()
    if config.freeze == FreezeMode.FINAL_LAYER:
        model.freeze_all_but_final()
    else:
        model.unfreeze_all()
    names = model.trainable_names()
    if config.init == InitMode.COLD:
        model.reinitialize(names, config.init_seed)

    pixels, labels = dataset.arrays()
    head_only = model.only_final_trainable()
    inputs = model.features(pixels).data if head_only else pixels
    step_fn = _head_step if head_only else _full_step

    state = AdamState.for_params({n: model.params[n] for n in names}, config.lr,
                                 config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.shuffle_seed)
    count = len(dataset)
    history: List[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(count)
        loss_sum = 0.0
        correct = 0
        for start in range(0, count, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, logits, grads = step_fn(model, inputs[batch], labels[batch])
            loss_sum += loss * batch.size
            correct += int(np.sum(logits.argmax(axis=1) == labels[batch]))
            updated, state = adam_step(state, {n: model.params[n] for n in names}, grads)
            model.update(updated)
        stats = EpochStats(epoch, loss_sum / count, correct / count)
        if not math.isfinite(stats.loss):
            raise TrainingDivergedError(epoch, stats.loss)
        logger.debug("epoch %d/%d loss %.6g accuracy %.4f", epoch, config.epochs, stats.loss, stats.accuracy)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(epoch, model, stats)
    return TrainResult(model=model, history=history)


@dataclass
class Prediction:
    predicted: int
    probabilities: List[float]


@dataclass
class EvaluationResult:
    """Accuracy, mean predicted-class confidence and per-example outputs."""

    accuracy: float
    mean_confidence: float
    predictions: List[Prediction]


def evaluate(model: Model, dataset: Dataset) -> EvaluationResult:
    """Score ``model`` on ``dataset`` by argmax of the logits."""
    if len(dataset) == 0:
        return EvaluationResult(accuracy=0.0, mean_confidence=0.0, predictions=[])
    pixels, labels = dataset.arrays()
    predicted, probs = model.predict(pixels)
    confidence = probs[np.arange(len(predicted)), predicted]
    return EvaluationResult(
        accuracy=float(np.mean(predicted == labels)),
        mean_confidence=float(np.mean(confidence)),
        predictions=[Prediction(int(c), p.tolist()) for c, p in zip(predicted, probs)],
    )


def scaled_batch_size(batch_size: int, train_size: int, reference_size: int) -> int:
    """Shrink a batch size in proportion to a smaller-than-reference train set."""
    if train_size >= reference_size:
        return batch_size
    return max(1, min(batch_size, math.ceil(batch_size * train_size / reference_size)))
