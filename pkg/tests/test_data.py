import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnmem.data import (
    CLEAN, FLIPPED, OOD, CorruptionSpec, Dataset, corrupt, corruption_count, flip_labels, inject_ood,
    load_idx, load_mnist5k, mnist5k_path, reconcile_features, split_for_shadows, synth_blobs, write_idx,
)
from bnmem.errors import IdxFormatError, ShapeError
from bnmem.nn import Architecture, TrainConfig, train


def small(n=100, k=10, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.uniform(size=(n, dim)), np.arange(n) % k, k, name="small")


def test_flip_count_and_labels():
    d = small(100)
    out = flip_labels(d, CorruptionSpec("flip", 0.05, seed=1))
    flipped = out.provenance == FLIPPED
    assert flipped.sum() == 5
    assert np.all(out.labels[flipped] != d.labels[flipped])
    assert np.all(out.original_labels[flipped] == d.labels[flipped])
    assert np.array_equal(out.labels[~flipped], d.labels[~flipped])
    assert np.all(out.provenance[~flipped] == CLEAN)
    assert np.array_equal(out.features, d.features) and len(out) == len(d)


def test_flip_zero_ratio_is_identity():
    d = small()
    out = flip_labels(d, CorruptionSpec("flip", 0.0, seed=1))
    assert out.content_hash() == d.content_hash()
    assert np.all(out.provenance == CLEAN)


def test_flip_tiny_ratio_warns(caplog):
    d = small(10)
    out = flip_labels(d, CorruptionSpec("flip", 0.05, seed=1))
    assert not out.corrupted.any()
    assert "flips nothing" in caplog.text


def test_flip_two_class_goes_to_other():
    d = small(60, k=2)
    out = flip_labels(d, CorruptionSpec("flip", 0.5, seed=3))
    f = out.provenance == FLIPPED
    assert f.sum() == 30
    assert np.all(out.labels[f] == 1 - d.labels[f])


def test_flip_new_labels_uniform():
    # each class other than the original is equally likely
    d = Dataset(np.zeros((20000, 1)), np.zeros(20000, dtype=int), 5)
    out = flip_labels(d, CorruptionSpec("flip", 0.5, seed=9))
    counts = np.bincount(out.labels[out.corrupted], minlength=5)
    assert counts[0] == 0
    np.testing.assert_allclose(counts[1:] / counts.sum(), 0.25, atol=0.015)


def test_flip_errors():
    with pytest.raises(ValueError):
        flip_labels(Dataset(np.zeros((4, 1)), np.zeros(4, int), 1), CorruptionSpec("flip", 0.5))
    with pytest.raises(ValueError):
        CorruptionSpec("flip", 1.0)
    with pytest.raises(ValueError):
        CorruptionSpec("ood", 0.1)
    with pytest.raises(ValueError):
        CorruptionSpec("blur", 0.1)
    once = flip_labels(small(), CorruptionSpec("flip", 0.2, seed=0))
    with pytest.raises(ValueError):
        flip_labels(once, CorruptionSpec("flip", 0.2, seed=1))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400), st.floats(0.0, 0.99), st.integers(0, 2 ** 64 - 1), st.integers(2, 10))
def test_flip_count_property(n, k, seed, classes):
    d = Dataset(np.zeros((n, 1)), np.arange(n) % classes, classes)
    out = flip_labels(d, CorruptionSpec("flip", k, seed))
    assert out.corrupted.sum() == int(np.floor(n * k + 1e-9)) == corruption_count(n, k)
    assert np.all(out.labels[out.corrupted] != d.labels[out.corrupted])
    assert np.array_equal(out.features, d.features)


def test_inject_ood():
    d = small(1000)
    src = Dataset(np.random.default_rng(5).uniform(size=(40, 3)), np.zeros(40, int), 2, name="src")
    out = inject_ood(d, CorruptionSpec("ood", 0.1, seed=2, ood_source=src))
    assert len(out) == 1100
    new = slice(1000, 1100)
    assert np.all(out.provenance[new] == OOD) and np.all(out.provenance[:1000] == CLEAN)
    assert len(set(out.labels[new].tolist())) == 1
    assert np.array_equal(out.features[:1000], d.features) and np.array_equal(out.labels[:1000], d.labels)
    rows = {r.tobytes() for r in src.features}
    assert all(r.tobytes() in rows for r in out.features[new])
    # drawn with replacement: 100 draws from 40 rows must repeat
    assert len({r.tobytes() for r in out.features[new]}) < 100
    assert out.ood_source == "src"


def test_inject_zero_ratio():
    d = small()
    src = small(5, seed=1)
    assert inject_ood(d, CorruptionSpec("ood", 0.0, ood_source=src)).content_hash() == d.content_hash()


def test_reconcile_grayscale_resize():
    img = np.zeros((2, 6, 8, 3))
    img[:, :, :, 0] = 0.3
    img[:, :, :, 2] = 0.9
    src = Dataset(img.reshape(2, -1), np.zeros(2, int), 1, image_shape=(6, 8, 3))
    out = reconcile_features(src, 9, (3, 3))
    assert out.shape == (2, 9)
    np.testing.assert_allclose(out, 0.4)
    with pytest.raises(ShapeError):
        reconcile_features(Dataset(np.zeros((2, 5)), np.zeros(2, int), 1), 9)


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, (7, 4, 5)).astype(np.uint8)
    d = Dataset(pix.reshape(7, -1) / 255.0, rng.integers(0, 10, 7), 10, image_shape=(4, 5))
    write_idx(d, tmp_path / "i.idx", tmp_path / "l.idx")
    raw = (tmp_path / "i.idx").read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 7, 4, 5)
    assert raw[16:] == pix.tobytes()
    back = load_idx(tmp_path / "i.idx", tmp_path / "l.idx", num_classes=10)
    assert np.array_equal(back.features, d.features) and np.array_equal(back.labels, d.labels)
    write_idx(back, tmp_path / "i2.idx", tmp_path / "l2.idx")
    assert (tmp_path / "i2.idx").read_bytes() == raw
    assert (tmp_path / "l2.idx").read_bytes() == (tmp_path / "l.idx").read_bytes()


def test_idx_errors(tmp_path):
    (tmp_path / "empty").write_bytes(b"")
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 1) + b"\x00")
    with pytest.raises(IdxFormatError, match="offset 0"):
        load_idx(tmp_path / "empty", tmp_path / "l")
    (tmp_path / "bad").write_bytes(struct.pack(">IIII", 0x801, 1, 1, 1) + b"\x00")
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(tmp_path / "bad", tmp_path / "l")
    (tmp_path / "short").write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00" * 5)
    with pytest.raises(IdxFormatError, match="truncated.*offset 21"):
        load_idx(tmp_path / "short", tmp_path / "l")
    (tmp_path / "ok").write_bytes(struct.pack(">IIII", 0x803, 2, 1, 1) + b"\x00\x01")
    with pytest.raises(IdxFormatError):
        load_idx(tmp_path / "ok", tmp_path / "l")  # 2 images, 1 label


def test_dataset_cache_roundtrip(tmp_path):
    d = flip_labels(small(), CorruptionSpec("flip", 0.1, seed=4))
    d.save(tmp_path / "d.json")
    back = Dataset.load(tmp_path / "d.json")
    assert back.content_hash() == d.content_hash()
    assert np.array_equal(back.provenance, d.provenance)
    assert (tmp_path / "d.bin").stat().st_size == d.features.size * 8


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 2)), np.zeros(0, int), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)


def test_blobs():
    a = synth_blobs(3, 10, 4, 2.0, seed=1)
    b = synth_blobs(3, 10, 4, 2.0, seed=1)
    assert a.content_hash() == b.content_hash()
    assert len(synth_blobs(4, 1, 2, 1.0, seed=0)) == 4
    big = synth_blobs(2, 2000, 2, 3.0, seed=2)
    m = [big.features[big.labels == c].mean(axis=0) for c in range(2)]
    assert np.linalg.norm(m[1] - m[0]) == pytest.approx(3.0, abs=0.1)
    assert big.features[big.labels == 0].var(axis=0) == pytest.approx([1, 1], abs=0.1)


def test_blobs_linearly_fit():
    d = synth_blobs(3, 50, 2, 10.0, seed=3)
    net = Architecture((2, 3), batch_norm=False).build(0)
    res = train(net, d, TrainConfig(learning_rate=0.05, batch_size=30, epochs=150))
    assert res.trace[-1].clean_acc >= 0.99


def test_shadow_splits():
    splits = split_for_shadows(50, 2, seed=3)
    again = split_for_shadows(50, 2, seed=3)
    assert all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) for a, b in zip(splits, again))
    for i_in, i_out in splits:
        assert np.array_equal(np.sort(np.concatenate([i_in, i_out])), np.arange(50))
    # independent coins: the two in-sets are not complements
    assert not np.array_equal(np.sort(splits[0][1]), np.sort(splits[1][0]))
    with pytest.raises(ValueError):
        split_for_shadows(10, 1, 0)


def test_shadow_in_count_mean():
    means = []
    for seed in range(1000):
        counts = np.zeros(20)
        for i_in, _ in split_for_shadows(20, 16, seed):
            counts[i_in] += 1
        means.append(counts.mean())
    assert abs(np.mean(means) - 8) <= 0.5


def test_mnist5k_layout():
    d = load_mnist5k()
    assert d.features.shape == (5000, 784)
    assert np.array_equal(np.bincount(d.labels), np.full(10, 500))
    assert d.features.min() >= 0 and d.features.max() <= 1
    with gzip.open(mnist5k_path(), "rt") as f:
        first = f.readline().split(",")
    assert len(first) == 785
    sub = load_mnist5k(subset=1000, seed=1)
    assert len(sub) == 1000


def test_corrupt_dispatch():
    d = small()
    assert corrupt(d, CorruptionSpec("flip", 0.1, 0)).corrupted.sum() == 10
