"""Layer-stack classifiers with an exposed penultimate feature map."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .tensor import LRN_ALPHA, LRN_BETA, LRN_BIAS, LRN_RADIUS, Graph, Tensor, as_array, softmax

logger = logging.getLogger(__name__)

# Rows per forward chunk; keeps im2col buffers small for the table1 profile.
FORWARD_CHUNK = 64


class LayerKind(Enum):
    """Kinds of layer a model can stack."""
    SCALE = "scale"
    CONV = "conv"
    MAXPOOL = "maxpool"
    LRN = "lrn"
    DENSE = "dense"
    RELU = "relu"
    FLATTEN = "flatten"


@dataclass(frozen=True)
class LayerSpec:
    """Hyperparameters of one layer; fields unused by a kind are ignored."""

    kind: LayerKind
    size: int = 0           # output channels (conv) or units (dense)
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    factor: float = 1.0
    radius: int = LRN_RADIUS
    bias: float = LRN_BIAS
    alpha: float = LRN_ALPHA
    beta_lrn: float = LRN_BETA
    identity: bool = False  # LRN switched off for ablation

    @classmethod
    def conv(cls, size: int, kernel: int, stride: int = 1, padding: Optional[int] = None) -> "LayerSpec":
        return cls(LayerKind.CONV, size=size, kernel=kernel, stride=stride,
                   padding=kernel // 2 if padding is None else padding)

    @classmethod
    def maxpool(cls, window: int, stride: int) -> "LayerSpec":
        return cls(LayerKind.MAXPOOL, window=window, stride=stride)

    @classmethod
    def lrn(cls, enabled: bool = True) -> "LayerSpec":
        return cls(LayerKind.LRN, identity=not enabled)

    @classmethod
    def dense(cls, size: int) -> "LayerSpec":
        return cls(LayerKind.DENSE, size=size)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(LayerKind.RELU)

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls(LayerKind.FLATTEN)

    @classmethod
    def scale(cls, factor: float) -> "LayerSpec":
        return cls(LayerKind.SCALE, factor=factor)


def table1_specs(num_classes: int = 10, lrn_enabled: bool = True) -> List[LayerSpec]:
    """The scaled-down AlexNet used for the CIFAR-10 end-to-end attacks."""
    return [
        LayerSpec.scale(1.0 / 255.0),
        LayerSpec.conv(64, 5),
        LayerSpec.relu(),
        LayerSpec.maxpool(3, 2),
        LayerSpec.lrn(lrn_enabled),
        LayerSpec.conv(64, 5),
        LayerSpec.relu(),
        LayerSpec.maxpool(3, 2),
        LayerSpec.lrn(lrn_enabled),
        LayerSpec.flatten(),
        LayerSpec.dense(384),
        LayerSpec.relu(),
        LayerSpec.dense(192),
        LayerSpec.relu(),
        LayerSpec.dense(num_classes),
    ]


def tiny_specs(num_classes: int = 2, lrn_enabled: bool = True) -> List[LayerSpec]:
    """Single-conv profile for fast desk runs: 16x16 input gives 64 features.

    It has no LRN layer, so ``lrn_enabled`` leaves it unchanged.
    """
    return [
        LayerSpec.scale(1.0 / 255.0),
        LayerSpec.conv(8, 5),
        LayerSpec.relu(),
        LayerSpec.maxpool(3, 2),
        LayerSpec.flatten(),
        LayerSpec.dense(64),
        LayerSpec.relu(),
        LayerSpec.dense(num_classes),
    ]


PROFILES = {
    "table1": (table1_specs, (3, 32, 32)),
    "tiny": (tiny_specs, (1, 16, 16)),
}


def profile_specs(profile: str, num_classes: int, lrn_enabled: bool = True) -> Tuple[List[LayerSpec], Tuple[int, ...]]:
    """Specs and default input shape for a named architecture profile."""
    if profile not in PROFILES:
        raise InvalidArgumentError(f"unknown model profile '{profile}', choose from {sorted(PROFILES)}")
    factory, input_shape = PROFILES[profile]
    return factory(num_classes, lrn_enabled), input_shape


@dataclass
class _LayerPlan:
    """Per-layer shape bookkeeping derived from a spec chain."""

    output_shapes: List[Tuple[int, ...]] = field(default_factory=list)
    param_shapes: Dict[str, Tuple[int, ...]] = field(default_factory=dict)


def _plan(specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> _LayerPlan:
    """Walk the spec chain, rejecting the first shape-incompatible layer."""
    plan = _LayerPlan()
    shape = tuple(int(d) for d in input_shape)
    for index, spec in enumerate(specs):
        prefix = f"layer{index}"
        kind = spec.kind
        if kind in (LayerKind.SCALE, LayerKind.RELU):
            pass
        elif kind == LayerKind.LRN:
            if len(shape) < 1:
                raise ShapeError(f"layer {index} (lrn) needs a channel axis, got {shape}")
        elif kind == LayerKind.FLATTEN:
            shape = (int(np.prod(shape)),)
        elif kind == LayerKind.CONV:
            if len(shape) != 3 or spec.size < 1 or spec.kernel < 1:
                raise ShapeError(f"layer {index} (conv) cannot follow shape {shape}")
            channels, height, width = shape
            out_h = (height + 2 * spec.padding - spec.kernel) // spec.stride + 1
            out_w = (width + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if out_h < 1 or out_w < 1:
                raise ShapeError(f"layer {index} (conv) kernel {spec.kernel} too large for {shape}")
            plan.param_shapes[f"{prefix}.weight"] = (spec.size, channels, spec.kernel, spec.kernel)
            plan.param_shapes[f"{prefix}.bias"] = (spec.size,)
            shape = (spec.size, out_h, out_w)
        elif kind == LayerKind.MAXPOOL:
            if len(shape) != 3 or spec.window < 1 or spec.stride < 1:
                raise ShapeError(f"layer {index} (maxpool) cannot follow shape {shape}")
            channels, height, width = shape
            out_h = -(-height // spec.stride)
            out_w = -(-width // spec.stride)
            padded_h = max((out_h - 1) * spec.stride + spec.window, height)
            padded_w = max((out_w - 1) * spec.stride + spec.window, width)
            if spec.window > padded_h or spec.window > padded_w:
                raise ShapeError(f"layer {index} (maxpool) window exceeds {shape}")
            shape = (channels, out_h, out_w)
        elif kind == LayerKind.DENSE:
            if len(shape) != 1 or spec.size < 1:
                raise ShapeError(f"layer {index} (dense) needs a flat input, got {shape}")
            plan.param_shapes[f"{prefix}.weight"] = (spec.size, shape[0])
            plan.param_shapes[f"{prefix}.bias"] = (spec.size,)
            shape = (spec.size,)
        plan.output_shapes.append(shape)
    return plan


@dataclass
class ForwardNodes:
    """Graph node ids produced by one forward pass."""

    features: int
    logits: Optional[int]
    params: Dict[str, int]


class Model:
    """An instantiated layer stack with named parameters and a trainable mask."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int], params: Dict[str, Tensor]):
        self.specs = list(specs)
        self.input_shape = tuple(int(d) for d in input_shape)
        plan = _plan(self.specs, self.input_shape)
        self._output_shapes = plan.output_shapes
        self.params: Dict[str, Tensor] = {}
        for name, expected in plan.param_shapes.items():
            if name not in params:
                raise ShapeError(f"missing parameter tensor '{name}'")
            if tuple(params[name].shape) != expected:
                raise ShapeError(
                    f"parameter '{name}' has shape {tuple(params[name].shape)}, expected {expected}"
                )
            self.params[name] = params[name]
        self.trainable: Dict[str, bool] = {name: True for name in self.params}

        dense_layers = [i for i, s in enumerate(self.specs) if s.kind == LayerKind.DENSE]
        if self.specs and self.specs[-1].kind == LayerKind.DENSE:
            self.final_layer_index: Optional[int] = len(self.specs) - 1
            self.feature_layer_index = len(self.specs) - 2
        else:
            self.final_layer_index = None
            self.feature_layer_index = len(self.specs) - 1
        self._dense_layers = dense_layers

    # --- shape facts -----------------------------------------------------

    @property
    def feature_dim(self) -> int:
        """Width n_d of the feature map f(x)."""
        if self.feature_layer_index < 0:
            return int(np.prod(self.input_shape))
        return int(np.prod(self._output_shapes[self.feature_layer_index]))

    @property
    def num_classes(self) -> int:
        if self.final_layer_index is None:
            raise InvalidArgumentError("model has no final dense layer")
        return self.specs[self.final_layer_index].size

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def input_scale(self) -> float:
        """Product of the leading scale layers: raw pixels to the network's own input units."""
        factor = 1.0
        for spec in self.specs:
            if spec.kind != LayerKind.SCALE:
                break
            factor *= spec.factor
        return factor

    @property
    def final_weights(self) -> Tensor:
        """Final dense weights, one row per class."""
        return self.params[f"layer{self._final_index()}.weight"]

    @property
    def final_bias(self) -> Tensor:
        return self.params[f"layer{self._final_index()}.bias"]

    def _final_index(self) -> int:
        if self.final_layer_index is None:
            raise InvalidArgumentError("model has no final dense layer")
        return self.final_layer_index

    def final_parameter_names(self) -> List[str]:
        if self.final_layer_index is None:
            return []
        return [f"layer{self.final_layer_index}.weight", f"layer{self.final_layer_index}.bias"]

    # --- trainability ----------------------------------------------------

    def freeze_all_but_final(self) -> "Model":
        """Mark only the final dense layer's weights and bias as trainable."""
        if not self._dense_layers:
            raise InvalidArgumentError("model has no dense layer to leave trainable")
        final = set(self.final_parameter_names())
        self.trainable = {name: name in final for name in self.params}
        return self

    def unfreeze_all(self) -> "Model":
        self.trainable = {name: True for name in self.params}
        return self

    def trainable_names(self) -> List[str]:
        return [name for name, flag in self.trainable.items() if flag]

    def trainable_parameter_count(self) -> int:
        return sum(self.params[name].size for name in self.trainable_names())

    def only_final_trainable(self) -> bool:
        names = set(self.trainable_names())
        return bool(names) and names <= set(self.final_parameter_names())

    # --- parameters ------------------------------------------------------

    def clone(self) -> "Model":
        """Independent copy; tensors are immutable so they are shared."""
        twin = Model(self.specs, self.input_shape, dict(self.params))
        twin.trainable = dict(self.trainable)
        return twin

    def reinitialize(self, names: Sequence[str], seed: int) -> "Model":
        """Cold-start the named parameters from a fresh seeded draw."""
        shapes = {name: tuple(self.params[name].shape) for name in names}
        self.update(_initial_values(shapes, seed))
        return self

    def update(self, params: Dict[str, Tensor]):
        """Replace named parameters in place, keeping their shapes."""
        for name, value in params.items():
            if name not in self.params:
                raise ShapeError(f"unknown parameter '{name}'")
            if tuple(value.shape) != tuple(self.params[name].shape):
                raise ShapeError(
                    f"parameter '{name}' update has shape {tuple(value.shape)}, "
                    f"expected {tuple(self.params[name].shape)}"
                )
            self.params[name] = value

    # --- forward ---------------------------------------------------------

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        if batch.shape == self.input_shape:
            batch = batch[None]
        if batch.shape[1:] != self.input_shape:
            raise ShapeError(f"batch shape {batch.shape} does not match model input {self.input_shape}")
        return batch

    def forward(self, graph: Graph, x: int, trainable_roots: bool = False,
                with_logits: bool = True) -> ForwardNodes:
        """Record a forward pass on ``graph`` starting from node ``x``.

        With ``trainable_roots`` the trainable parameters become graph roots
        so ``backward`` returns their gradients; frozen ones stay constants.
        """
        param_nodes: Dict[str, int] = {}

        def param(name: str) -> int:
            if trainable_roots and self.trainable[name]:
                node = graph.input(self.params[name])
            else:
                node = graph.constant(self.params[name])
            param_nodes[name] = node
            return node

        batch = graph.array(x).shape[0]
        node = x
        features = x if self.feature_layer_index < 0 else None
        last = len(self.specs) if with_logits else self.feature_layer_index + 1
        for index in range(last):
            spec = self.specs[index]
            prefix = f"layer{index}"
            kind = spec.kind
            if kind == LayerKind.SCALE:
                node = graph.scale(node, spec.factor)
            elif kind == LayerKind.CONV:
                node = graph.conv2d(node, param(f"{prefix}.weight"), spec.stride, spec.padding)
                node = graph.channel_bias(node, param(f"{prefix}.bias"))
            elif kind == LayerKind.RELU:
                node = graph.relu(node)
            elif kind == LayerKind.MAXPOOL:
                node = graph.maxpool2d(node, spec.window, spec.stride)
            elif kind == LayerKind.LRN:
                if not spec.identity:
                    node = graph.lrn(node, spec.radius, spec.bias, spec.alpha, spec.beta_lrn)
            elif kind == LayerKind.FLATTEN:
                node = graph.reshape(node, (batch, -1))
            elif kind == LayerKind.DENSE:
                node = graph.dense(node, param(f"{prefix}.weight"), param(f"{prefix}.bias"))
            if index == self.feature_layer_index:
                features = node
        if features is not None and graph.array(features).ndim != 2:
            features = graph.reshape(features, (batch, -1))
        logits = node if with_logits and self.final_layer_index is not None else None
        return ForwardNodes(features=features, logits=logits, params=param_nodes)

    def _run(self, batch, want_logits: bool) -> np.ndarray:
        data = self._check_batch(as_array(batch))
        chunks = []
        for start in range(0, data.shape[0], FORWARD_CHUNK):
            graph = Graph()
            nodes = self.forward(graph, graph.constant(data[start:start + FORWARD_CHUNK]),
                                 with_logits=want_logits)
            chunks.append(graph.array(nodes.logits if want_logits else nodes.features))
        if not chunks:
            width = self.num_classes if want_logits else self.feature_dim
            return np.zeros((0, width))
        return np.concatenate(chunks, axis=0)

    def features(self, batch) -> Tensor:
        """Penultimate activations f(x), shape batch x n_d."""
        return Tensor.wrap(self._run(batch, want_logits=False))

    def logits(self, batch) -> Tensor:
        """Class scores before the softmax, shape batch x C."""
        if self.final_layer_index is None:
            raise InvalidArgumentError("model has no final dense layer, so no logits")
        return Tensor.wrap(self._run(batch, want_logits=True))

    def predict(self, batch) -> Tuple[np.ndarray, np.ndarray]:
        """Argmax classes and softmax probabilities; the one place argmax is taken."""
        probs = softmax(self.logits(batch).data)
        return probs.argmax(axis=1), probs


def _initial_values(shapes: Dict[str, Tuple[int, ...]], seed: int) -> Dict[str, Tensor]:
    """He-uniform weights (fan-in = product of trailing dims) and zero biases."""
    rng = np.random.default_rng(seed)
    values: Dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name.endswith(".weight"):
            limit = np.sqrt(6.0 / int(np.prod(shape[1:])))
            values[name] = Tensor.wrap(rng.uniform(-limit, limit, size=shape))
        else:
            values[name] = Tensor.zeros(shape)
    return values


def build(specs: Sequence[LayerSpec], input_shape: Sequence[int], seed: int) -> Model:
    """Instantiate a spec chain with seeded He-uniform weights and zero biases."""
    plan = _plan(specs, input_shape)
    params = _initial_values(plan.param_shapes, seed)
    model = Model(specs, input_shape, params)
    logger.debug("built model with %d parameters, feature width %d",
                 sum(t.size for t in params.values()), model.feature_dim)
    return model


def build_profile(profile: str, num_classes: int, seed: int,
                  input_shape: Optional[Sequence[int]] = None, lrn_enabled: bool = True) -> Model:
    """Build a named profile, optionally overriding its input shape."""
    specs, default_shape = profile_specs(profile, num_classes, lrn_enabled)
    return build(specs, input_shape or default_shape, seed)
