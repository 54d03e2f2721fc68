"""Labeled datasets, class-incremental task streams and loaders."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ParseError


@dataclass
class LabeledDataset:
    """Examples stored as one feature array, one label array and one id array."""

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    classes: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids)
        n = len(self.labels)
        if self.features.shape[0] != n or self.ids.shape[0] != n:
            raise ContractError("features, labels and ids must have the same length")
        if not self.classes:
            self.classes = tuple(int(c) for c in np.unique(self.labels))
        else:
            self.classes = tuple(int(c) for c in self.classes)
        if n and not np.isin(self.labels, self.classes).all():
            raise ContractError("label outside the dataset class set")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index, classes=None) -> "LabeledDataset":
        return LabeledDataset(self.features[index], self.labels[index], self.ids[index],
                              classes if classes is not None else self.classes, dict(self.meta))

    def of_classes(self, classes) -> "LabeledDataset":
        classes = tuple(int(c) for c in classes)
        return self.subset(np.isin(self.labels, classes), classes)

    def check_unique_ids(self) -> None:
        if len(np.unique(self.ids)) != len(self.ids):
            raise ContractError("example ids are not unique")

    @staticmethod
    def concat(parts: list["LabeledDataset"]) -> "LabeledDataset":
        parts = [p for p in parts if len(p)] or parts[:1]
        classes = tuple(sorted(set().union(*(p.classes for p in parts))))
        return LabeledDataset(np.concatenate([p.features for p in parts]),
                              np.concatenate([p.labels for p in parts]),
                              np.concatenate([p.ids for p in parts]), classes)


def _is_test_id(example_id) -> bool:
    digest = hashlib.blake2b(str(example_id).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % 5 == 0


def split_train_test(ds: LabeledDataset) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic ~80/20 split keyed on a hash of each example id."""
    test = np.array([_is_test_id(i) for i in ds.ids], dtype=bool)
    return ds.subset(~test), ds.subset(test)


def synth_gaussians(num_classes: int, dim: int, per_class: int, separation: float,
                    seed: int = 0) -> LabeledDataset:
    """Unit-covariance Gaussian clusters with means on a sphere of radius ``separation``."""
    if separation < 0:
        raise ConfigError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((num_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = dirs * separation
    x = rng.standard_normal((num_classes, per_class, dim)) + means[:, None, :]
    labels = np.repeat(np.arange(num_classes), per_class)
    ids = np.arange(num_classes * per_class)
    return LabeledDataset(x.reshape(-1, dim), labels, ids, tuple(range(num_classes)),
                          {"kind": "synthetic", "separation": separation})


@dataclass
class Task:
    task_id: int
    classes: tuple[int, ...]  # classifier rows (arrival positions)
    source_classes: tuple[int, ...]  # original dataset labels
    train: LabeledDataset
    test: LabeledDataset


@dataclass
class TaskStream:
    tasks: list[Task]
    class_order: tuple[int, ...]
    seed: int

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def num_classes(self) -> int:
        return len(self.class_order)


def make_stream(dataset: LabeledDataset, classes_per_task: int, seed: int,
                test: LabeledDataset | None = None) -> TaskStream:
    """Shuffle the class order with ``seed`` and cut it into consecutive tasks.

    Labels are rewritten to arrival positions, so the k-th class ever seen
    trains classifier row k. The last task takes the remainder when
    ``classes_per_task`` does not divide the class count. Without an explicit
    ``test`` set the dataset is split by id hash.
    """
    classes = list(dataset.classes)
    if classes_per_task < 1 or classes_per_task > len(classes):
        raise ConfigError(f"classes_per_task={classes_per_task} must be in [1, {len(classes)}]")
    dataset.check_unique_ids()
    if test is None:
        train, test = split_train_test(dataset)
    else:
        train = dataset
        if np.intersect1d(train.ids, test.ids).size:
            raise ContractError("train and test ids overlap")
    order = tuple(int(c) for c in np.random.default_rng(seed).permutation(classes))
    position = {c: i for i, c in enumerate(order)}
    relabel = np.vectorize(position.__getitem__, otypes=[np.int64])

    def remap(ds: LabeledDataset, src: tuple[int, ...]) -> LabeledDataset:
        sub = ds.of_classes(src)
        rows = tuple(position[c] for c in src)
        labels = relabel(sub.labels) if len(sub) else sub.labels
        return LabeledDataset(sub.features, labels, sub.ids, rows, dict(ds.meta))

    tasks = []
    for t, start in enumerate(range(0, len(order), classes_per_task)):
        src = order[start:start + classes_per_task]
        tasks.append(Task(t, tuple(position[c] for c in src), src, remap(train, src), remap(test, src)))
    return TaskStream(tasks, order, seed)


# ---------------------------------------------------------------------------
# image loaders


def _normalize(images: np.ndarray, mean=None, std=None, downsample: int = 1):
    """Scale bytes to [0,1], average-pool by ``downsample`` and standardize per channel."""
    x = images.astype(np.float64) / 255.0
    if downsample > 1:
        n, c, h, w = x.shape
        if h % downsample or w % downsample:
            raise ConfigError(f"downsample factor {downsample} does not divide {h}x{w}")
        x = x.reshape(n, c, h // downsample, downsample, w // downsample, downsample).mean(axis=(3, 5))
    if mean is None:
        mean = x.mean(axis=(0, 2, 3))
    if std is None:
        std = x.std(axis=(0, 2, 3))
    mean = np.asarray(mean, dtype=np.float64)
    std = np.where(np.asarray(std, dtype=np.float64) > 0, std, 1.0)
    x = (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return x, [float(m) for m in mean], [float(s) for s in std]


def load_raw_batches(path, image_shape=(3, 32, 32), downsample: int = 1,
                     mean=None, std=None, id_offset: int = 0) -> LabeledDataset:
    """Read records of one label byte followed by channel-major pixel bytes."""
    path = Path(path)
    blob = path.read_bytes()
    rec = 1 + int(np.prod(image_shape))
    if not blob:
        raise ParseError(f"{path}: empty file", 0)
    if len(blob) % rec:
        last = (len(blob) // rec) * rec
        raise ParseError(f"{path}: truncated record of {len(blob) - last} bytes "
                         f"(record size {rec})", last)
    arr = np.frombuffer(blob, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].astype(np.int64)
    images = arr[:, 1:].reshape((-1,) + tuple(image_shape))
    x, mean, std = _normalize(images, mean, std, downsample)
    ids = np.arange(id_offset, id_offset + len(labels))
    return LabeledDataset(x, labels, ids, meta={"kind": "raw", "mean": mean, "std": std,
                                                 "downsample": downsample})


def load_png_manifest(path, downsample: int = 1, mean=None, std=None) -> LabeledDataset:
    """Read a CSV manifest with ``id,path,label`` columns; paths are relative to it."""
    from PIL import Image

    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ContractError(f"{path}: manifest has no examples")
    missing = {"id", "path", "label"} - set(rows[0])
    if missing:
        raise ParseError(f"{path}: manifest lacks columns {sorted(missing)}", 0)
    images, labels, ids = [], [], []
    for r in rows:
        img = np.asarray(Image.open(path.parent / r["path"]).convert("RGB"), dtype=np.uint8)
        images.append(img.transpose(2, 0, 1))
        labels.append(int(r["label"]))
        ids.append(r["id"])
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ContractError(f"{path}: images have differing shapes {sorted(shapes)}")
    x, mean, std = _normalize(np.stack(images), mean, std, downsample)
    return LabeledDataset(x, np.array(labels), np.array(ids), meta={
        "kind": "png", "mean": mean, "std": std, "downsample": downsample})


def load_image_dataset(path, format: str = "raw", **kwargs) -> LabeledDataset:
    if format == "raw":
        return load_raw_batches(path, **kwargs)
    if format == "png":
        return load_png_manifest(path, **kwargs)
    raise ConfigError(f"unknown image format {format!r} (expected 'raw' or 'png')")
