"""Labeled image datasets: CIFAR-10 binaries, synthetic textures, selection helpers."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CorruptRecordError, InvalidArgumentError, ShapeError, TruncatedStreamError
from .tensor import Tensor

logger = logging.getLogger(__name__)

CIFAR10_CLASSES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]
CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


@dataclass(frozen=True)
class LabeledImage:
    """One C x H x W image in raw pixel units with its class index."""

    pixels: Tensor
    label: int
    source_id: str

    def __post_init__(self):
        data = self.pixels.data
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError(f"pixels of '{self.source_id}' are not finite")
        if data.size and (data.min() < PIXEL_MIN or data.max() > PIXEL_MAX):
            raise InvalidArgumentError(f"pixels of '{self.source_id}' leave [0, 255]")
        if self.label < 0:
            raise InvalidArgumentError(f"negative label on '{self.source_id}'")


class Dataset:
    """An immutable labeled image collection."""

    def __init__(self, images: Sequence[LabeledImage], class_names: Sequence[str], split: str):
        if not class_names:
            raise InvalidArgumentError("a dataset needs at least one class name")
        self.images: List[LabeledImage] = list(images)
        self.class_names: List[str] = list(class_names)
        self.split = split
        for image in self.images:
            if image.label >= len(self.class_names):
                raise InvalidArgumentError(
                    f"label {image.label} of '{image.source_id}' has no class name"
                )
        shapes = {image.pixels.shape for image in self.images}
        if len(shapes) > 1:
            raise ShapeError(f"mixed image shapes in one dataset: {sorted(shapes)}")
        self._arrays: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> LabeledImage:
        return self.images[index]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> Tuple[int, ...]:
        if not self.images:
            raise InvalidArgumentError("empty dataset has no image shape")
        return self.images[0].pixels.shape

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Stacked pixels (N, C, H, W) and labels (N,), built once."""
        if self._arrays is None:
            if self.images:
                pixels = np.stack([image.pixels.data for image in self.images])
            else:
                pixels = np.zeros((0,))
            labels = np.array([image.label for image in self.images], dtype=np.int64)
            pixels.setflags(write=False)
            labels.setflags(write=False)
            self._arrays = (pixels, labels)
        return self._arrays

    def indices_of(self, class_id: int) -> List[int]:
        return [i for i, image in enumerate(self.images) if image.label == class_id]

    def class_counts(self) -> Dict[str, int]:
        counts = {name: 0 for name in self.class_names}
        for image in self.images:
            counts[self.class_names[image.label]] += 1
        return counts

    def with_images(self, extra: Sequence[LabeledImage]) -> "Dataset":
        """A new dataset holding these images followed by ``extra``."""
        return Dataset(self.images + list(extra), self.class_names, self.split)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.images[i] for i in indices], self.class_names, self.split)

    def without(self, source_id: str) -> "Dataset":
        """A new dataset minus every image with this provenance id."""
        return Dataset([image for image in self.images if image.source_id != source_id],
                       self.class_names, self.split)


# --- CIFAR-10 --------------------------------------------------------------


def parse_cifar10(raw: bytes, source: str = "memory") -> List[LabeledImage]:
    """Decode CIFAR-10 binary records (label byte, then R, G, B planes)."""
    if len(raw) % CIFAR_RECORD_BYTES != 0:
        raise TruncatedStreamError(
            f"{source}: {len(raw)} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CorruptRecordError(f"{source}: label byte {labels[bad[0]]} exceeds 9", int(bad[0]))
    pixels = records[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64)
    return [
        LabeledImage(Tensor.wrap(pixels[i]), int(labels[i]), f"{source}:{i * CIFAR_RECORD_BYTES}")
        for i in range(records.shape[0])
    ]


def read_cifar10(path: Union[str, Path], split: str) -> Dataset:
    """Read one CIFAR-10 ``.bin`` file, or the standard batch files of a directory."""
    path = Path(path)
    if path.is_dir():
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [path / name for name in names]
    else:
        files = [path]
    images: List[LabeledImage] = []
    for file in files:
        images.extend(parse_cifar10(file.read_bytes(), source=file.name))
    logger.info("read %d CIFAR-10 %s images from %s", len(images), split, path)
    return Dataset(images, CIFAR10_CLASSES, split)


def serialize_cifar10(dataset: Dataset) -> bytes:
    """Encode a 3x32x32 integer-valued dataset back into CIFAR-10 records."""
    pixels, labels = dataset.arrays()
    if len(dataset) == 0:
        return b""
    if pixels.shape[1:] != CIFAR_SHAPE:
        raise ShapeError(f"CIFAR-10 records hold {CIFAR_SHAPE} images, got {pixels.shape[1:]}")
    if not np.array_equal(pixels, np.rint(pixels)):
        raise InvalidArgumentError("CIFAR-10 records need integer pixel values")
    if labels.max() > 9:
        raise InvalidArgumentError("CIFAR-10 records need labels 0-9")
    records = np.empty((len(dataset), CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = pixels.reshape(len(dataset), -1).astype(np.uint8)
    return records.tobytes()


def write_cifar10(dataset: Dataset, path: Union[str, Path]):
    Path(path).write_bytes(serialize_cifar10(dataset))


# --- synthetic textures ----------------------------------------------------

_SPLIT_STREAM = {"train": 0, "test": 1}


def synth_dataset(classes: int, per_class: int, hw: int, seed: int,
                  channels: int = 1, split: str = "train") -> Dataset:
    """Class-conditional textured images with seeded pixel noise.

    Class patterns depend only on ``seed``; the noise stream also depends on
    ``split``, so train and test sets drawn with one seed share their classes.
    Generators are numpy PCG64 streams, identical on every platform.
    """
    if min(classes, per_class, hw, channels) < 1:
        raise InvalidArgumentError("synth_dataset arguments must all be >= 1")
    pattern_rng = np.random.default_rng(seed)
    coarse_cells = 4
    repeat = -(-hw // coarse_cells)
    coarse = pattern_rng.uniform(-1.0, 1.0, size=(classes, channels, coarse_cells, coarse_cells))
    blocks = np.repeat(np.repeat(coarse, repeat, axis=2), repeat, axis=3)[:, :, :hw, :hw]
    freq = pattern_rng.integers(1, 4, size=(classes, channels, 2))
    phase = pattern_rng.uniform(0.0, 2.0 * np.pi, size=(classes, channels))
    grid_y, grid_x = np.mgrid[0:hw, 0:hw] / hw
    stripes = np.sin(
        2.0 * np.pi * (freq[..., 0, None, None] * grid_x + freq[..., 1, None, None] * grid_y)
        + phase[..., None, None]
    )
    patterns = 128.0 + 55.0 * blocks + 35.0 * stripes

    noise_rng = np.random.default_rng([seed, _SPLIT_STREAM.get(split, 2)])
    images: List[LabeledImage] = []
    for label in range(classes):
        noise = noise_rng.normal(0.0, 18.0, size=(per_class, channels, hw, hw))
        pixels = np.clip(np.rint(patterns[label] + noise), PIXEL_MIN, PIXEL_MAX)
        for i in range(per_class):
            images.append(LabeledImage(Tensor.wrap(pixels[i]), label, f"synth:{seed}:{split}:{label}:{i}"))
    names = [f"class{c}" for c in range(classes)]
    return Dataset(images, names, split)


# --- filtering and selection -----------------------------------------------


def _pixel_key(image: LabeledImage) -> bytes:
    return repr(image.pixels.shape).encode() + image.pixels.data.tobytes()


def dedup(train: Dataset, test: Dataset) -> Dataset:
    """Drop test images whose pixels exactly equal some training image."""
    if train.images and test.images and train.image_shape != test.image_shape:
        raise ShapeError(f"train images {train.image_shape} vs test images {test.image_shape}")
    seen = {_pixel_key(image) for image in train.images}
    kept = [image for image in test.images if _pixel_key(image) not in seen]
    if len(kept) != len(test):
        logger.info("dedup removed %d test images duplicated in train", len(test) - len(kept))
    return Dataset(kept, test.class_names, test.split)


def restrict_classes(dataset: Dataset, class_ids: Sequence[int],
                     per_class: Optional[int] = None, seed: int = 0) -> Dataset:
    """Keep the listed classes, relabelled 0..k-1, optionally sampling per class."""
    if len(set(class_ids)) != len(class_ids):
        raise InvalidArgumentError(f"class ids must be distinct, got {list(class_ids)}")
    rng = np.random.default_rng(seed)
    chosen: List[int] = []
    for class_id in class_ids:
        members = dataset.indices_of(class_id)
        if per_class is not None and per_class < len(members):
            members = sorted(rng.choice(members, size=per_class, replace=False).tolist())
        chosen.extend(members)
    chosen.sort()
    remap = {old: new for new, old in enumerate(class_ids)}
    images = [
        LabeledImage(dataset.images[i].pixels, remap[dataset.images[i].label], dataset.images[i].source_id)
        for i in chosen
    ]
    return Dataset(images, [dataset.class_names[c] for c in class_ids], dataset.split)


@dataclass
class OutlierSelection:
    """Least-confident correctly classified images of one class."""

    targets: List[LabeledImage]
    confidences: List[float]
    shortfall: bool


def select_outlier_targets(model, test: Dataset, class_id: int, k: int) -> OutlierSelection:
    """The ``k`` correctly classified images of ``class_id`` with lowest true-class confidence."""
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    members = test.indices_of(class_id)
    if not members:
        return OutlierSelection([], [], shortfall=True)
    pixels, _ = test.arrays()
    predicted, probs = model.predict(pixels[members])
    correct = [(idx, probs[row, class_id]) for row, idx in enumerate(members) if predicted[row] == class_id]
    order = np.argsort([conf for _, conf in correct], kind="stable")
    picked = [correct[i] for i in order[:k]]
    shortfall = len(picked) < k
    if shortfall:
        logger.warning("only %d correctly classified images of class %d, wanted %d",
                       len(picked), class_id, k)
    return OutlierSelection(
        targets=[test.images[idx] for idx, _ in picked],
        confidences=[float(conf) for _, conf in picked],
        shortfall=shortfall,
    )


def sample_bases(dataset: Dataset, class_id: int, n: int, seed: int) -> List[LabeledImage]:
    """Seeded uniform sample of ``n`` distinct images from ``class_id``."""
    if n < 1:
        raise InvalidArgumentError(f"n must be >= 1, got {n}")
    members = dataset.indices_of(class_id)
    if len(members) < n:
        raise InvalidArgumentError(
            f"class {class_id} has {len(members)} images, cannot sample {n} bases"
        )
    order = np.random.default_rng(seed).permutation(len(members))[:n]
    return [dataset.images[members[i]] for i in order]


def dataset_manifest(dataset: Dataset) -> Dict:
    """Provenance summary: class names, per-class counts and source ids."""
    return {
        "split": dataset.split,
        "class_names": dataset.class_names,
        "counts": dataset.class_counts(),
        "size": len(dataset),
        "source_ids": [image.source_id for image in dataset.images],
    }


def write_manifest(dataset: Dataset, path: Union[str, Path]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(dataset_manifest(dataset), indent=2))
