import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pst.datasets import LabeledDataset
from pst.rehearsal import (
    BALANCED, CLASSIFIER_FINETUNE, CURRENT_ONLY, MemoryBuffer, MixSchedule, balanced_mix,
    epochs_using_memory, update_memory,
)


def make_data(classes, per_class, start_id=0):
    labels = np.repeat(np.array(classes), per_class)
    ids = np.arange(start_id, start_id + labels.size)
    return LabeledDataset(ids[:, None].astype(float), labels, ids, tuple(classes))


def test_two_classes_two_each():
    buf = update_memory(MemoryBuffer(4), make_data([0, 1], 10), [0, 1])
    assert buf.counts() == {0: 2, 1: 2}


def test_remainder_goes_to_lowest_classes():
    buf = update_memory(MemoryBuffer(10), make_data([0, 1, 2], 10), [0, 1, 2])
    assert buf.counts() == {0: 4, 1: 3, 2: 3}


def test_budget_per_class_at_full_scale():
    buf = update_memory(MemoryBuffer(2000), make_data(list(range(10)), 500), range(10))
    assert set(buf.counts().values()) == {200}


def test_scarce_class_keeps_everything():
    data = LabeledDataset.concat([make_data([0], 2), make_data([1], 50, 100)])
    buf = update_memory(MemoryBuffer(20), data, [0, 1])
    assert buf.counts() == {0: 2, 1: 10}


def test_thinning_keeps_subset_of_old_exemplars():
    buf = update_memory(MemoryBuffer(12), make_data([0, 1], 20), [0, 1])
    old = set(buf.store[0].ids)
    update_memory(buf, make_data([2, 3], 20, 1000), [0, 1, 2, 3])
    assert buf.counts() == {0: 3, 1: 3, 2: 3, 3: 3}
    assert set(buf.store[0].ids) <= old


def test_mix_counts_follow_formula():
    buf = update_memory(MemoryBuffer(12), make_data([0, 1, 2], 30), [0, 1, 2])
    mixed = balanced_mix(buf, make_data([3, 4], 30, 500), np.random.default_rng(0))
    counts = np.bincount(mixed.labels)
    assert len(mixed) == 12 + 8
    assert counts.tolist() == [4, 4, 4, 4, 4]


def test_mix_at_full_scale():
    buf = update_memory(MemoryBuffer(2000), make_data(list(range(10)), 300), range(10))
    mixed = balanced_mix(buf, make_data(list(range(10, 20)), 300, 10_000), np.random.default_rng(0))
    assert len(mixed) == 4000


def test_mix_without_memory_is_identity():
    cur = make_data([0, 1], 5)
    assert balanced_mix(MemoryBuffer(10), cur, np.random.default_rng(0)) is cur


@pytest.mark.parametrize("epoch,phase", [(0, BALANCED), (2, BALANCED), (3, BALANCED), (7, CURRENT_ONLY),
                                         (9, BALANCED), (16, CURRENT_ONLY), (17, CLASSIFIER_FINETUNE),
                                         (18, CLASSIFIER_FINETUNE), (19, CLASSIFIER_FINETUNE)])
def test_schedule_phases(epoch, phase):
    assert epochs_using_memory(epoch, 20, MixSchedule(3, 3, 3)) == phase


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 60),
       st.lists(st.integers(1, 4), min_size=1, max_size=6))
def test_buffer_invariants(seed, budget, task_sizes):
    rng = np.random.default_rng(seed)
    budget = max(budget, sum(task_sizes))
    buf = MemoryBuffer(budget, rng)
    seen, next_class, presented = [], 0, set()
    for size in task_sizes:
        classes = list(range(next_class, next_class + size))
        next_class += size
        data = make_data(classes, int(rng.integers(budget, budget + 5)), start_id=1000 * next_class)
        if buf.store:
            mixed = balanced_mix(buf, data, rng)
            counts = np.bincount(mixed.labels)[mixed.classes[0]:]
            counts = counts[counts > 0]
            assert counts.max() - counts.min() <= 1
        presented |= set(data.ids.tolist())
        seen += classes
        update_memory(buf, data, seen)
        counts = list(buf.counts().values())
        assert len(buf) <= budget
        assert max(counts) - min(counts) <= 1
        assert set(buf.store) <= set(seen)
        stored = set(np.concatenate([d.ids for d in buf.store.values()]).tolist())
        assert stored <= presented
