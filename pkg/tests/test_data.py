"""Synthetic dataset generation, file round trips, batching."""

import numpy as np
import pytest

from d3gzsl import tensor as T
from d3gzsl.data import (
    GzslDataset,
    SyntheticSpec,
    epoch_rows,
    load_feature_file,
    make_synthetic,
    sample_batch,
    save_dataset,
)
from d3gzsl.errors import DataFormatError, ParameterError
from d3gzsl.feature_gen import GaussianOracleGenerator
from d3gzsl.id2sd import loss_cls
from d3gzsl.nn import Adam, Mlp
from d3gzsl.tensor import Tensor

SPEC_SMALL = SyntheticSpec(n_seen=4, n_unseen=2, feat_dim=6, attr_dim=3,
                           train_per_class=12, test_per_class=5, seed=3)


def _assert_datasets_equal(a: GzslDataset, b: GzslDataset):
    assert np.allclose(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    assert np.allclose(a.attributes, b.attributes)
    assert np.array_equal(a.class_ids, b.class_ids)
    assert np.array_equal(np.sort(a.train_index), np.sort(b.train_index))
    assert np.array_equal(np.sort(a.test_index), np.sort(b.test_index))
    assert (a.n_seen, a.n_unseen) == (b.n_seen, b.n_unseen)


def test_synthetic_determinism():
    a = make_synthetic(SPEC_SMALL)
    b = make_synthetic(SPEC_SMALL)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.attributes, b.attributes)
    assert np.array_equal(a.labels, b.labels)


def test_synthetic_invariants():
    ds = make_synthetic(SPEC_SMALL)
    assert set(ds.seen_classes) & set(ds.unseen_classes) == set()
    assert np.all(ds.train_labels < ds.n_seen)
    assert ds.attributes.shape == (6, 3)
    assert np.allclose(np.linalg.norm(ds.attributes, axis=1), 1.0)
    # every class has test rows, only seen classes have train rows
    assert set(np.unique(ds.test_labels)) == set(range(ds.n_classes))


def test_sigma_to_zero_collapses_to_means_and_nearest_mean_is_perfect():
    spec = SyntheticSpec(n_seen=5, n_unseen=3, feat_dim=8, attr_dim=4,
                         train_per_class=10, test_per_class=6,
                         noise_sigma=1e-12, seed=1)
    ds = make_synthetic(spec)
    means = ds.attributes @ ds.attr_map.T
    for c in range(ds.n_classes):
        rows = ds.features[ds.labels == c]
        assert np.allclose(rows, means[c], atol=1e-9)
    # nearest-mean classification of seen test rows from seen train means
    train_means = np.vstack([
        ds.train_features[ds.train_labels == c].mean(axis=0) for c in range(ds.n_seen)
    ])
    seen_test = ds.test_labels < ds.n_seen
    x = ds.test_features[seen_test]
    d2 = ((x[:, None, :] - train_means[None, :, :]) ** 2).sum(axis=2)
    assert np.array_equal(np.argmin(d2, axis=1), ds.test_labels[seen_test])


def test_linear_probe_reference_spec():
    # reference regression spec: sep 3.0, sigma 0.3 must give an easy probe
    spec = SyntheticSpec(n_seen=10, n_unseen=5, feat_dim=32, attr_dim=8,
                         train_per_class=60, test_per_class=20,
                         class_sep=3.0, noise_sigma=0.3, seed=0)
    ds = make_synthetic(spec)
    probe = Mlp("probe", [ds.feat_dim, ds.n_seen], ["identity"], np.random.default_rng(0))
    opt = Adam(probe.parameters(), lr=5e-2)
    x = Tensor(ds.train_features)
    for _ in range(150):
        loss = loss_cls(probe.forward(x), ds.train_labels)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    seen_test = ds.test_labels < ds.n_seen
    with T.no_grad():
        logits = probe.forward(Tensor(ds.test_features[seen_test])).data
    acc = np.mean(np.argmax(logits, axis=1) == ds.test_labels[seen_test])
    assert acc >= 0.95, f"linear probe accuracy {acc:.3f} below reference"


# ---------------------------------------------------------------------------
# file I/O


def test_save_load_round_trip(tmp_path):
    ds = make_synthetic(SPEC_SMALL)
    paths = (tmp_path / "f.txt", tmp_path / "a.txt", tmp_path / "s.txt")
    save_dataset(ds, *paths)
    loaded = load_feature_file(*paths)
    _assert_datasets_equal(ds, loaded)


def test_save_is_deterministic(tmp_path):
    for sub in ("one", "two"):
        d = tmp_path / sub
        d.mkdir()
        save_dataset(make_synthetic(SPEC_SMALL), d / "f.txt", d / "a.txt", d / "s.txt")
    for name in ("f.txt", "a.txt", "s.txt"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def _write_trivial_files(tmp_path, attr_rows=None, feature_rows=None, split=None):
    feature_rows = feature_rows if feature_rows is not None else [
        "1 0.0 0.0", "1 0.1 0.0", "2 1.0 1.0", "2 1.1 1.0", "3 5.0 5.0",
    ]
    attr_rows = attr_rows if attr_rows is not None else ["1 1.0", "2 0.5", "3 -1.0"]
    split = split if split is not None else ["seen: 1 2", "unseen: 3", "test: 3 4"]
    f, a, s = tmp_path / "f.txt", tmp_path / "a.txt", tmp_path / "s.txt"
    f.write_text(f"2 {len(feature_rows)}\n" + "\n".join(feature_rows) + "\n")
    a.write_text(f"1 {len(attr_rows)}\n" + "\n".join(attr_rows) + "\n")
    s.write_text("\n".join(split) + "\n")
    return f, a, s


def test_load_canonicalizes_arbitrary_ids(tmp_path):
    ds = load_feature_file(*_write_trivial_files(tmp_path))
    assert ds.n_seen == 2 and ds.n_unseen == 1
    assert ds.class_ids.tolist() == [1, 2, 3]
    assert ds.labels.tolist() == [0, 0, 1, 1, 2]
    assert np.array_equal(ds.test_index, [3, 4])


def test_load_missing_attribute_row_names_class(tmp_path):
    paths = _write_trivial_files(tmp_path, attr_rows=["1 1.0", "2 0.5"])
    with pytest.raises(DataFormatError) as exc:
        load_feature_file(*paths)
    assert "3" in str(exc.value)


def test_load_unknown_class_label(tmp_path):
    paths = _write_trivial_files(
        tmp_path,
        feature_rows=["1 0.0 0.0", "9 0.1 0.0", "2 1.0 1.0", "2 1.1 1.0", "3 5.0 5.0"],
    )
    with pytest.raises(DataFormatError) as exc:
        load_feature_file(*paths)
    assert "9" in str(exc.value)


def test_load_overlapping_splits(tmp_path):
    paths = _write_trivial_files(tmp_path, split=["seen: 1 2", "unseen: 2 3", "test: 3 4"])
    with pytest.raises(DataFormatError) as exc:
        load_feature_file(*paths)
    assert "2" in str(exc.value)


def test_load_reports_line_numbers(tmp_path):
    paths = _write_trivial_files(
        tmp_path,
        feature_rows=["1 0.0 0.0", "1 0.1", "2 1.0 1.0", "2 1.1 1.0", "3 5.0 5.0"],
    )
    with pytest.raises(DataFormatError) as exc:
        load_feature_file(*paths)
    assert ":3:" in str(exc.value)


def test_load_train_row_with_unseen_label(tmp_path):
    # row 4 (class 3, unseen) not listed as test -> it becomes a train row
    paths = _write_trivial_files(tmp_path, split=["seen: 1 2", "unseen: 3", "test: 3"])
    with pytest.raises(DataFormatError):
        load_feature_file(*paths)


# ---------------------------------------------------------------------------
# batching


def test_epoch_visits_each_row_once():
    ds = make_synthetic(SPEC_SMALL)
    rng = np.random.default_rng(0)
    seen = []
    for rows in epoch_rows(ds, 7, rng):
        seen.extend(rows.tolist())
    assert sorted(seen) == sorted(ds.train_index.tolist())


def test_epoch_determinism():
    ds = make_synthetic(SPEC_SMALL)
    a = [r.tolist() for r in epoch_rows(ds, 5, np.random.default_rng(4))]
    b = [r.tolist() for r in epoch_rows(ds, 5, np.random.default_rng(4))]
    assert a == b


def test_sample_batch_counts_and_labels():
    ds = make_synthetic(SyntheticSpec(n_seen=2, n_unseen=2, feat_dim=4, attr_dim=2,
                                      train_per_class=8, test_per_class=4, seed=2))
    gen = GaussianOracleGenerator.from_dataset(ds)
    rng = np.random.default_rng(0)
    batch = sample_batch(ds, gen, 8, 3, rng)
    assert batch.n_real == 8
    assert batch.n_total == 8 + 2 * 3 == 14
    assert batch.y_gen.tolist() == [2, 2, 2, 3, 3, 3]
    assert batch.features().shape == (14, 4)
    assert batch.labels().shape == (14,)


def test_sample_batch_no_synthesis():
    ds = make_synthetic(SPEC_SMALL)
    batch = sample_batch(ds, None, 6, 0, np.random.default_rng(0))
    assert batch.n_total == batch.n_real == 6
    assert batch.n_gen == 0


def test_sample_batch_negative_syn_rejected():
    ds = make_synthetic(SPEC_SMALL)
    with pytest.raises(ParameterError):
        sample_batch(ds, None, 4, -1, np.random.default_rng(0))


def test_batch_sequences_reproducible_from_seed():
    ds = make_synthetic(SPEC_SMALL)
    gen = GaussianOracleGenerator.from_dataset(ds)

    def collect(seed):
        rng = np.random.default_rng(seed)
        out = []
        for rows in epoch_rows(ds, 9, rng):
            b = sample_batch(ds, gen, len(rows), 2, rng, rows=rows)
            out.append((rows.tolist(), b.x_gen.data.copy()))
        return out

    for (ra, ga), (rb, gb) in zip(collect(5), collect(5)):
        assert ra == rb and np.array_equal(ga, gb)
