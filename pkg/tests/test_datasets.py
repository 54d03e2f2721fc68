import numpy as np
import pytest

from pst.datasets import (
    LabeledDataset, load_image_dataset, make_stream, split_train_test, synth_gaussians,
)
from pst.errors import ConfigError, ContractError, ParseError


def test_stream_shapes():
    ds = synth_gaussians(10, 4, 20, 3.0, seed=0)
    stream = make_stream(ds, 5, seed=1)
    assert [len(t.classes) for t in stream] == [5, 5]
    big = LabeledDataset(np.zeros((100, 1)), np.arange(100), np.arange(100))
    assert [len(t.classes) for t in make_stream(big, 30, seed=0)] == [30, 30, 30, 10]
    with pytest.raises(ConfigError):
        make_stream(ds, 11, seed=0)


def test_stream_is_deterministic_and_disjoint():
    ds = synth_gaussians(10, 4, 20, 3.0, seed=0)
    a, b = make_stream(ds, 3, seed=5), make_stream(ds, 3, seed=5)
    assert a.class_order == b.class_order
    rows = [c for t in a for c in t.classes]
    assert sorted(rows) == list(range(10))
    for t in a:
        assert np.array_equal(t.train.ids, b.tasks[t.task_id].train.ids)
        assert not set(t.train.ids) & set(t.test.ids)
        assert set(t.train.labels) <= set(t.classes)
    assert make_stream(ds, 3, seed=6).class_order != a.class_order


def test_relabeling_follows_arrival_order():
    ds = synth_gaussians(6, 2, 10, 3.0, seed=0)
    stream = make_stream(ds, 2, seed=3)
    first = stream.tasks[0]
    assert first.classes == (0, 1)
    orig = ds.of_classes([first.source_classes[0]])
    assert set(orig.ids) >= set(first.train.ids[first.train.labels == 0])


def test_synthetic_determinism_and_split():
    a, b = synth_gaussians(5, 3, 50, 4.0, seed=2), synth_gaussians(5, 3, 50, 4.0, seed=2)
    assert np.array_equal(a.features, b.features)
    train, test = split_train_test(a)
    assert 0.1 < len(test) / len(a) < 0.3
    assert not set(train.ids) & set(test.ids)


def test_zero_separation_is_indistinguishable():
    ds = synth_gaussians(4, 8, 200, 0.0, seed=0)
    means = [ds.features[ds.labels == c].mean(axis=0) for c in range(4)]
    assert np.max(np.abs(np.array(means))) < 0.35


def test_large_separation_is_linearly_separable():
    # the engine's own dense layer trained as a linear classifier is the oracle here
    from pst import numerics as nx
    from pst.model import LayerSpec, build_network, forward
    from pst.training import evaluate_single_head

    ds = synth_gaussians(10, 16, 60, 10.0, seed=0)
    train, test = split_train_test(ds)
    net, _ = build_network([LayerSpec("classifier")], (16,), 10, seed=0)
    state = nx.OptimizerState(0.1, 0.9, 0.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        for idx in np.array_split(rng.permutation(len(train)), 16):
            loss = nx.softmax_xent(forward(net, train.features[idx], "train"), train.labels[idx], range(10))
            nx.sgd_step(net.parameters(), nx.backward(loss), state, 0.05)
    assert evaluate_single_head(net, test, range(10)) > 0.95


def _write_raw(path, labels, pixels):
    blob = b"".join(bytes([l]) + bytes(p) for l, p in zip(labels, pixels))
    path.write_bytes(blob)


def test_raw_fixture_round_trip(tmp_path):
    pix0 = [0] * 4 + [255] * 4 + [51] * 4   # 3 channels of 2x2
    pix1 = list(range(0, 240, 20))
    f = tmp_path / "batch.bin"
    _write_raw(f, [3, 7], [pix0, pix1])
    ds = load_image_dataset(f, "raw", image_shape=(3, 2, 2), mean=[0, 0, 0], std=[1, 1, 1])
    assert ds.labels.tolist() == [3, 7]
    np.testing.assert_array_equal(ds.features[0], np.array(pix0, dtype=float).reshape(3, 2, 2) / 255)
    np.testing.assert_array_equal(ds.features[1], np.array(pix1, dtype=float).reshape(3, 2, 2) / 255)


def test_raw_normalization_constants_recorded(tmp_path):
    f = tmp_path / "b.bin"
    rng = np.random.default_rng(0)
    _write_raw(f, [0, 1, 2], rng.integers(0, 256, (3, 12)).tolist())
    ds = load_image_dataset(f, "raw", image_shape=(3, 2, 2))
    assert len(ds.meta["mean"]) == 3
    np.testing.assert_allclose(ds.features.mean(axis=(0, 2, 3)), 0, atol=1e-12)


def test_raw_downsample(tmp_path):
    f = tmp_path / "c.bin"
    _write_raw(f, [1], [[128] * (3 * 32 * 32)])
    ds = load_image_dataset(f, "raw", downsample=2)
    assert ds.features.shape == (1, 3, 16, 16)


def test_raw_truncated_reports_offset(tmp_path):
    f = tmp_path / "bad.bin"
    f.write_bytes(bytes(13 + 5))
    with pytest.raises(ParseError) as err:
        load_image_dataset(f, "raw", image_shape=(3, 2, 2))
    assert err.value.offset == 13


def test_png_manifest(tmp_path):
    from PIL import Image
    arr = np.zeros((4, 4, 3), dtype=np.uint8)
    arr[..., 0] = 255
    Image.fromarray(arr).save(tmp_path / "a.png")
    Image.fromarray(np.full((4, 4, 3), 10, np.uint8)).save(tmp_path / "b.png")
    (tmp_path / "m.csv").write_text("id,path,label\nx1,a.png,0\nx2,b.png,4\n")
    ds = load_image_dataset(tmp_path / "m.csv", "png", mean=[0, 0, 0], std=[1, 1, 1])
    assert ds.features.shape == (2, 3, 4, 4) and ds.labels.tolist() == [0, 4]
    assert ds.features[0, 0, 0, 0] == 1.0 and ds.features[1, 2, 0, 0] == pytest.approx(10 / 255)


def test_empty_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("id,path,label\n")
    with pytest.raises(ContractError):
        load_image_dataset(tmp_path / "m.csv", "png")
