import numpy as np
import pytest

from bfel.data import (BatchSampler, Dataset, find_mnist, flip_labels, iid_shards, load_csv,
                       load_mnist, make_blobs, read_idx, save_csv, train_test_split, write_idx)
from bfel.errors import ConfigurationError, InputError


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 2)), np.array([0]), 2)
    with pytest.raises(InputError):
        Dataset(np.array([[np.inf, 0]]), np.array([0]), 2)


def test_blobs_are_seeded_and_balanced():
    a, b = make_blobs(100, 5, 4, seed=9), make_blobs(100, 5, 4, seed=9)
    assert np.array_equal(a.features, b.features)
    assert np.bincount(a.labels).tolist() == [25, 25, 25, 25]


def test_split_and_shards_partition_the_data():
    ds = make_blobs(1000, 3, 2, seed=0)
    train, test = train_test_split(ds, 0.7, seed=1)
    assert (len(train), len(test)) == (700, 300)
    shards = iid_shards(train, 10, seed=2)
    assert [len(s) for s in shards] == [70] * 10
    rows = np.vstack([s.features for s in shards] + [test.features])
    assert len({r.tobytes() for r in rows}) == 1000


def test_batch_sampler_covers_epoch_and_drops_tail():
    ds = make_blobs(50, 2, 2, seed=0)
    s = BatchSampler(ds, 16, seed=3)
    assert s.batches_per_epoch == 3
    seen = [s.next() for _ in range(3)]
    rows = {r.tobytes() for b in seen for r in b.features}
    assert len(rows) == 48
    with pytest.raises(ConfigurationError):
        BatchSampler(ds, 51, seed=0)


def test_flip_labels_is_cyclic():
    ds = Dataset(np.zeros((3, 1)), np.array([0, 1, 2]), 3)
    assert flip_labels(ds).labels.tolist() == [1, 2, 0]


def test_csv_round_trip(tmp_path):
    ds = make_blobs(20, 3, 2, seed=0)
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)


def test_idx_round_trip_and_mnist_loader(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(12, 4, 4), dtype=np.uint8)
    labels = rng.integers(0, 10, size=12).astype(np.uint8)
    write_idx(images, tmp_path / "train-images-idx3-ubyte")
    write_idx(labels, tmp_path / "train-labels-idx1-ubyte")
    assert np.array_equal(read_idx(tmp_path / "train-images-idx3-ubyte"), images)
    found = find_mnist(tmp_path)
    assert found is not None
    ds = load_mnist(*found, limit=10)
    assert len(ds) == 10 and ds.dim == 16
    assert ds.features.max() <= 1.0
    assert np.allclose(ds.features[0], images[0].ravel() / 255.0)
