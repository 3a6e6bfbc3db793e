"""Tracks decision-boundary rotation over the epochs of a retraining run."""

from typing import List, Tuple

import numpy as np

from poison_lab.model import Model

from .adjudication import angular_deviation, decision_normal


class DeviationHistory:
    """Angular deviation from the clean boundary, recorded after each epoch."""

    def __init__(self, clean_normal: np.ndarray, target_class: int, base_class: int):
        """Initialize with the clean model's boundary normal."""
        self.clean_normal = np.asarray(clean_normal)
        self.target_class = target_class
        self.base_class = base_class
        self.history: List[Tuple[int, float]] = []  # (epoch, degrees)

    def record(self, epoch: int, model: Model, *_):
        """Epoch callback for ``optim.train``."""
        normal = decision_normal(model, self.target_class, self.base_class)
        self.add_deviation(epoch, angular_deviation(self.clean_normal, normal))

    def add_deviation(self, epoch: int, degrees: float):
        self.history.append((epoch, degrees))

    def get_deviations(self) -> List[float]:
        return [degrees for _, degrees in self.history]

    def get_final_deviation(self) -> float:
        if not self.history:
            return 0.0
        return self.history[-1][1]

    def get_first_epoch_share(self) -> float:
        """Fraction of the final deviation already present after the first epoch."""
        final = self.get_final_deviation()
        if not self.history or final == 0.0:
            return 0.0
        return self.history[0][1] / final

    def get_deviation_trend(self) -> str:
        """Get a simple trend description of the rotation."""
        if len(self.history) < 2:
            return "Insufficient data"
        if self.get_final_deviation() < 1.0:
            return "Boundary barely moved"
        share = self.get_first_epoch_share()
        if share >= 0.5:
            return "Most rotation happened in the first epoch"
        return "Rotation accumulated gradually"
