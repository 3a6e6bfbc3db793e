"""Two-dimensional views of feature space for inspecting poison placement."""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from poison_lab.data import Dataset, LabeledImage
from poison_lab.errors import DegenerateBasisError, InvalidArgumentError
from poison_lab.model import Model
from poison_lab.tensor import as_array

from .adjudication import decision_normal

SCENE_COLUMNS = ["tag", "class", "x", "y"]

# Residual norms below this fraction of the input norm count as zero.
DEGENERACY_TOLERANCE = 1e-12


@dataclass
class ProjectionBasis:
    """Orthonormal axes: centroid direction and the in-plane boundary normal."""

    e1: np.ndarray
    e2: np.ndarray
    mu_base: np.ndarray
    mu_target: np.ndarray
    theta: np.ndarray

    def project(self, features) -> np.ndarray:
        """Coordinates (x . e1, x . e2) for one vector or a batch of rows."""
        rows = np.atleast_2d(as_array(features))
        return np.stack([rows @ self.e1, rows @ self.e2], axis=1)


@dataclass
class SceneRow:
    tag: str
    label: int
    x: float
    y: float


def projection_basis(model: Model, features, labels: Sequence[int],
                     target_class: int, base_class: int) -> ProjectionBasis:
    """Axes from the base/target centroid gap and the decision normal."""
    rows = np.atleast_2d(as_array(features))
    labels = np.asarray(labels)
    if rows.shape[0] != labels.shape[0]:
        raise InvalidArgumentError(f"{rows.shape[0]} feature rows but {labels.shape[0]} labels")
    for name, value in (("target", target_class), ("base", base_class)):
        if not np.any(labels == value):
            raise InvalidArgumentError(f"no training features for the {name} class {value}")

    mu_base = rows[labels == base_class].mean(axis=0)
    mu_target = rows[labels == target_class].mean(axis=0)
    u = mu_base - mu_target
    u_norm = float(np.linalg.norm(u))
    if u_norm <= DEGENERACY_TOLERANCE * max(float(np.linalg.norm(mu_base)), 1.0):
        raise DegenerateBasisError("base and target centroids coincide")
    e1 = u / u_norm

    theta = decision_normal(model, target_class, base_class)
    if theta.shape != e1.shape:
        raise InvalidArgumentError(
            f"decision normal has {theta.size} entries but features have {e1.size}"
        )
    residual = theta - float(theta @ e1) * e1
    residual_norm = float(np.linalg.norm(residual))
    if residual_norm <= DEGENERACY_TOLERANCE * max(float(np.linalg.norm(theta)), 1e-300):
        raise DegenerateBasisError("decision normal is parallel to the centroid direction")
    return ProjectionBasis(e1=e1, e2=residual / residual_norm,
                           mu_base=mu_base, mu_target=mu_target, theta=theta)


def project_scene(model: Model, basis: ProjectionBasis, train: Dataset,
                  target: LabeledImage, base: LabeledImage,
                  poisons: Optional[Sequence] = None) -> List[SceneRow]:
    """Rows for the training set by index, then target, base and each poison."""
    poisons = list(poisons or [])
    rows: List[SceneRow] = []
    pixels, labels = train.arrays()
    if len(train):
        for (x, y), label in zip(basis.project(model.features(pixels).data), labels):
            rows.append(SceneRow("train", int(label), float(x), float(y)))

    singles = [("target", target.pixels, target.label), ("base", base.pixels, base.label)]
    # poisons carry the base label
    singles += [("poison", getattr(p, "poison", p), base.label) for p in poisons]
    batch = np.stack([as_array(image) for _, image, _ in singles])
    coords = basis.project(model.features(batch).data)
    for (tag, _, label), (x, y) in zip(singles, coords):
        rows.append(SceneRow(tag, int(label), float(x), float(y)))
    return rows


def write_scene_csv(rows: Sequence[SceneRow], path: Union[str, Path]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SCENE_COLUMNS)
        for row in rows:
            writer.writerow([row.tag, row.label, repr(row.x), repr(row.y)])
