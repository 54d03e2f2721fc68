"""Fixed-budget exemplar memory and the balanced mixing schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import LabeledDataset
from .errors import ConfigError

BALANCED = "balanced"
CURRENT_ONLY = "current_only"
CLASSIFIER_FINETUNE = "classifier_finetune"


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class MemoryBuffer:
    """Per-class exemplar store holding at most ``budget`` examples in total."""

    budget: int
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    store: dict[int, LabeledDataset] = field(default_factory=dict)

    def __post_init__(self):
        if self.budget < 0:
            raise ConfigError("memory budget must be non-negative")

    def __len__(self) -> int:
        return sum(len(d) for d in self.store.values())

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(c for c, d in self.store.items() if len(d)))

    def counts(self) -> dict[int, int]:
        return {c: len(d) for c, d in sorted(self.store.items())}

    def as_dataset(self) -> LabeledDataset | None:
        parts = [self.store[c] for c in self.classes]
        return LabeledDataset.concat(parts) if parts else None

    def quotas(self, seen_classes) -> dict[int, int]:
        """``floor(K/t)`` per class, remainder going to the lowest class indices."""
        seen = sorted(int(c) for c in seen_classes)
        if not seen:
            return {}
        q, rem = divmod(self.budget, len(seen))
        return {c: q + (1 if i < rem else 0) for i, c in enumerate(seen)}


def update_memory(buffer: MemoryBuffer, task_data: LabeledDataset, seen_classes) -> MemoryBuffer:
    """Rebalance the buffer over all ``seen_classes`` after learning a task.

    New classes are sampled uniformly without replacement from ``task_data``;
    stored classes are thinned uniformly at random down to their new quota.
    A class with fewer examples than its quota keeps all of them.
    """
    quotas = buffer.quotas(seen_classes)
    new_store: dict[int, LabeledDataset] = {}
    for c, quota in quotas.items():
        if c in buffer.store:
            pool = buffer.store[c]
        else:
            pool = task_data.of_classes([c])
        if len(pool) > quota:
            keep = np.sort(buffer.rng.choice(len(pool), size=quota, replace=False))
            pool = pool.subset(keep)
        if len(pool):
            new_store[c] = pool
    buffer.store = new_store
    return buffer


def balanced_mix(buffer: MemoryBuffer, current: LabeledDataset,
                 rng: np.random.Generator) -> LabeledDataset:
    """Every stored exemplar plus ``round(K/(s-1))`` fresh examples per current class.

    ``s-1`` is the number of classes already in memory. With an empty buffer
    the current data comes back untouched.
    """
    memory = buffer.as_dataset()
    if memory is None or len(memory) == 0:
        return current
    per_class = round_half_up(buffer.budget / len(buffer.classes))
    parts = [memory]
    for c in current.classes:
        pool = current.of_classes([c])
        take = min(per_class, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        parts.append(pool.subset(idx))
    mixed = LabeledDataset.concat(parts)
    return mixed.subset(rng.permutation(len(mixed)))


@dataclass(frozen=True)
class MixSchedule:
    head: int = 3
    period: int = 3
    tail: int = 3

    def __post_init__(self):
        if self.head < 0 or self.tail < 0 or self.period < 1:
            raise ConfigError("schedule needs head >= 0, period >= 1, tail >= 0")


def epochs_using_memory(epoch: int, total_epochs: int, schedule: MixSchedule) -> str:
    """Which data/trainable set an epoch of memory-assisted training uses."""
    if epoch < schedule.head:
        return BALANCED
    if epoch >= total_epochs - schedule.tail:
        return CLASSIFIER_FINETUNE
    if (epoch - schedule.head) % schedule.period == 0:
        return BALANCED
    return CURRENT_ONLY
