"""Decides whether an attack worked and how far the decision boundary turned."""

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from poison_lab.errors import InvalidArgumentError, ShapeError
from poison_lab.model import Model
from poison_lab.tensor import as_array


@dataclass
class AttackOutcome:
    """Verdict on one target after retraining."""

    success: bool
    predicted_class: int
    confidence: float
    probabilities: List[float]


def attack_success(model: Model, target, base_class: int) -> AttackOutcome:
    """Success means the target lands in the base class, not merely any wrong class."""
    if not 0 <= base_class < model.num_classes:
        raise InvalidArgumentError(f"base class {base_class} outside 0..{model.num_classes - 1}")
    predicted, probs = model.predict(as_array(target))
    label = int(predicted[0])
    return AttackOutcome(
        success=label == base_class,
        predicted_class=label,
        confidence=float(probs[0, label]),
        probabilities=probs[0].tolist(),
    )


def decision_normal(model: Model, target_class: int, base_class: int) -> np.ndarray:
    """Base row minus target row of the final-layer weights."""
    classes = model.num_classes
    for name, value in (("target", target_class), ("base", base_class)):
        if not 0 <= value < classes:
            raise InvalidArgumentError(f"{name} class {value} outside 0..{classes - 1}")
    weights = model.final_weights.data
    return weights[base_class] - weights[target_class]


def angular_deviation(w_clean, w_poisoned) -> float:
    """Angle in degrees between two boundary normals."""
    a = as_array(w_clean).reshape(-1)
    b = as_array(w_poisoned).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"normals differ in size: {a.size} vs {b.size}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise InvalidArgumentError("angular deviation is undefined for a zero vector")
    cosine = float(np.dot(a, b)) / (norm_a * norm_b)
    return math.degrees(math.acos(min(1.0, max(-1.0, cosine))))
