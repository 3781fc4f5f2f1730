import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spiderfl import autodiff as ad
from spiderfl.data import (
    PartitionSpec,
    label_distribution,
    lda_partition,
    load_cifar10_binary,
    load_partition,
    mean_label_kl,
    save_partition,
    split_client,
    synth_dataset,
)
from spiderfl.errors import FormatError, PartitionError, SplitError, UsageError
from spiderfl.params import ParamStore


# -- CIFAR binary ------------------------------------------------------------


def write_records(path, records):
    path.write_bytes(b"".join(bytes([label]) + bytes(pixels) for label, pixels in records))


def test_cifar_fixture_pixels(tmp_path):
    a = [(i * 7) % 256 for i in range(3072)]
    b = [255 - (i % 256) for i in range(3072)]
    f = tmp_path / "two.bin"
    write_records(f, [(3, a), (9, b)])
    ds = load_cifar10_binary(f)
    assert len(ds) == f.stat().st_size // 3073 == 2
    assert ds.labels.tolist() == [3, 9]
    assert ds.images.shape == (2, 3, 32, 32)
    # plane order R, G, B, each row-major
    assert ds.images[0, 0, 0, 1] == np.float32(7 / 255)
    assert ds.images[0, 1, 0, 0] == np.float32(((1024 * 7) % 256) / 255)
    assert ds.images[1, 2, 31, 31] == np.float32((255 - 3071 % 256) / 255)
    np.testing.assert_array_equal(ds.images[1].reshape(-1), np.array(b, dtype=np.float32) / 255)


def test_cifar_directory_reads_batches_in_order(tmp_path):
    write_records(tmp_path / "data_batch_2.bin", [(2, [0] * 3072)])
    write_records(tmp_path / "data_batch_1.bin", [(1, [0] * 3072)])
    assert load_cifar10_binary(tmp_path).labels.tolist() == [1, 2]


def test_cifar_errors(tmp_path):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    with pytest.raises(FormatError):
        load_cifar10_binary(empty)
    short = tmp_path / "short.bin"
    short.write_bytes(b"\x01" * 3000)
    with pytest.raises(FormatError):
        load_cifar10_binary(short)
    bad = tmp_path / "bad.bin"
    write_records(bad, [(10, [0] * 3072)])
    with pytest.raises(FormatError):
        load_cifar10_binary(bad)
    with pytest.raises(FormatError):
        load_cifar10_binary(tmp_path / "missing.bin")


def test_cifar100_fine_label(tmp_path):
    f = tmp_path / "c100.bin"
    f.write_bytes(bytes([4, 87]) + bytes(3072))
    ds = load_cifar10_binary(f, cifar100=True)
    assert ds.labels.tolist() == [87] and ds.num_classes == 100


# -- synthetic ---------------------------------------------------------------


def test_synthetic_determinism_and_zero_noise():
    a, b = synth_dataset(3, 5, 4, seed=1), synth_dataset(3, 5, 4, seed=1)
    np.testing.assert_array_equal(a.images, b.images)
    clean = synth_dataset(3, 5, 4, seed=1, noise=0.0)
    for c in range(3):
        imgs = clean.images[clean.labels == c]
        assert (imgs == imgs[0]).all()
    assert 0.0 <= a.images.min() and a.images.max() <= 1.0


def test_synthetic_is_separable_by_a_small_convnet():
    ds = synth_dataset(4, 64, 8, seed=0, noise=0.1)
    rng = np.random.default_rng(0)
    p = ParamStore.from_arrays({"c1": rng.normal(0, 0.3, (8, 3, 3, 3)), "c2": rng.normal(0, 0.05, (4, 8, 8, 8))})

    def logits(p, x):
        h = ad.relu(ad.conv2d(ad.Tensor(x), p["c1"], 1, 1))
        return ad.global_avg_pool(ad.conv2d(h, p["c2"], 1, 0))

    x, y = ds.images.astype(np.float64), ds.labels
    for _ in range(200):
        idx = rng.choice(len(y), 32, replace=False)
        loss = ad.cross_entropy_loss(logits(p, x[idx]), y[idx])
        p = ad.sgd_step(p, p.grads_by_name(ad.backward(loss)), 0.05)
    assert (logits(p, x).data.argmax(1) == y).mean() >= 0.95


# -- partition ---------------------------------------------------------------


def balanced_labels(classes=10, per_class=100):
    return np.repeat(np.arange(classes), per_class)


def test_single_client_gets_everything():
    labels = balanced_labels()
    (only,) = lda_partition(labels, PartitionSpec(num_clients=1, alpha=0.2))
    np.testing.assert_array_equal(only, np.arange(len(labels)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 100.0), st.integers(0, 2**31))
def test_partition_is_exact_cover(k, alpha, seed):
    labels = balanced_labels(5, 30)
    parts = lda_partition(labels, PartitionSpec(k, alpha, seed))
    allidx = np.concatenate(parts)
    assert len(allidx) == len(labels)
    assert len(np.unique(allidx)) == len(labels)
    assert min(len(p) for p in parts) >= 1
    again = lda_partition(labels, PartitionSpec(k, alpha, seed))
    assert all((p == q).all() for p, q in zip(parts, again))


def test_huge_alpha_is_nearly_uniform():
    labels = balanced_labels(10, 800)
    shares = []
    for seed in range(5):
        parts = lda_partition(labels, PartitionSpec(8, 1e6, seed))
        shares.append([[np.sum(labels[p] == c) / 800 for c in range(10)] for p in parts])
    mean_share = np.mean(shares, axis=0)
    assert np.all(np.abs(mean_share - 1 / 8) <= 0.05 / 8)


def test_min_size_is_respected():
    labels = balanced_labels(10, 20)
    parts = lda_partition(labels, PartitionSpec(8, 0.05, seed=3, min_size=10))
    assert min(len(p) for p in parts) >= 10
    assert sum(len(p) for p in parts) == len(labels)


def test_fallback_moves_samples_when_retries_run_out():
    labels = balanced_labels(2, 10)
    parts = lda_partition(labels, PartitionSpec(4, 0.01, seed=0, min_size=5, max_retries=1))
    assert [len(p) for p in parts] == [5, 5, 5, 5]
    assert len(np.unique(np.concatenate(parts))) == 20


def test_impossible_partition():
    with pytest.raises(PartitionError):
        lda_partition(np.zeros(5, dtype=int), PartitionSpec(8, 1.0))
    with pytest.raises(UsageError):
        PartitionSpec(0, 1.0)
    with pytest.raises(UsageError):
        PartitionSpec(2, 0.0)


def test_skew_grows_as_alpha_shrinks():
    labels = balanced_labels(10, 100)
    wins = 0
    for seed in range(20):
        skewed = mean_label_kl(labels, lda_partition(labels, PartitionSpec(8, 0.2, seed)), 10)
        flat = mean_label_kl(labels, lda_partition(labels, PartitionSpec(8, 100.0, seed)), 10)
        wins += skewed > flat
    assert wins == 20


def test_label_distribution_sums_to_one():
    labels = balanced_labels(3, 4)
    d = label_distribution(labels, [0, 1, 4, 8], 3)
    np.testing.assert_allclose(d, [0.5, 0.25, 0.25])


def test_partition_file_round_trip(tmp_path):
    labels = balanced_labels(4, 10)
    spec = PartitionSpec(3, 0.5, seed=2)
    parts = lda_partition(labels, spec)
    save_partition(parts, spec, tmp_path / "p.json")
    back = load_partition(tmp_path / "p.json")
    assert all((p == q).all() for p, q in zip(parts, back))


# -- splits ------------------------------------------------------------------


def test_split_sizes():
    assert split_client(range(10), (0.5, 0.3, 0.2), 0).sizes() == (5, 3, 2)
    assert split_client(range(10), (0.8, 0.2), 0).sizes() == (8, 2)
    assert split_client(range(10), (0.8, 0.0, 0.2), 0).sizes() == (8, 2)
    assert split_client(range(1000), (0.5, 0.3, 0.2), 0).sizes() == (500, 300, 200)
    # floor sizes, remainder to train
    assert split_client(range(7), (0.5, 0.3, 0.2), 0).sizes() == (4, 2, 1)


def test_split_errors():
    with pytest.raises(SplitError):
        split_client([], (0.5, 0.3, 0.2), 0)
    with pytest.raises(SplitError):
        split_client(range(4), (1.0, 0.0, 0.0), 0)
    with pytest.raises(SplitError):
        split_client(range(4), (0.5, 0.3, 0.3), 0)
    with pytest.raises(SplitError):
        split_client(range(4), (1.0,), 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=200, unique=True), st.integers(0, 2**31))
def test_split_is_a_deterministic_partition(indices, seed):
    s = split_client(indices, (0.5, 0.3, 0.2), seed)
    joined = np.concatenate([s.train, s.val, s.test])
    assert sorted(joined.tolist()) == sorted(indices)
    t = split_client(indices, (0.5, 0.3, 0.2), seed)
    assert (s.train == t.train).all() and (s.val == t.val).all() and (s.test == t.test).all()
