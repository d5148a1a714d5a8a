import struct

import numpy as np
import pytest

from memrehearse.data import (
    HEAD,
    TAIL,
    Dataset,
    LongTailSpec,
    concat,
    dataset_from_bytes,
    dataset_to_bytes,
    export_csv,
    generate_longtail,
    load_dataset,
    save_dataset,
    split_tasks,
    subsample,
    subset_classes,
    train_test_split,
)
from memrehearse.errors import ConfigurationError, FormatError, InputError


def small_spec(**kw):
    base = dict(class_count=2, head_samples_per_class=100, tail_clusters_per_class=2, tail_samples_per_cluster=5)
    base.update(kw)
    return LongTailSpec(**base)


class TestDataset:
    def test_length_mismatch(self):
        with pytest.raises(InputError):
            Dataset(np.zeros((3, 2)), [0, 1], [0, 1, 2], 2)

    def test_duplicate_ids(self):
        with pytest.raises(InputError):
            Dataset(np.zeros((2, 2)), [0, 1], [5, 5], 2)

    def test_label_range(self):
        with pytest.raises(InputError):
            Dataset(np.zeros((2, 2)), [0, 2], [0, 1], 2)

    def test_positions(self):
        ds = Dataset(np.zeros((3, 1)), [0, 1, 0], [10, 20, 30], 2)
        assert ds.positions([30, 10]).tolist() == [2, 0]
        with pytest.raises(InputError):
            ds.positions([99])


class TestGenerate:
    def test_counting(self):
        ds = generate_longtail(small_spec())
        assert len(ds) == 220
        assert (ds.provenance == TAIL).sum() == 20
        assert np.bincount(ds.labels).tolist() == [110, 110]

    def test_defaults_tail_mass(self):
        spec = LongTailSpec()
        assert spec.feature_dim == 16
        assert spec.tail_clusters_per_class * spec.tail_samples_per_cluster / spec.samples_per_class == pytest.approx(0.05)

    def test_deterministic(self):
        a, b = generate_longtail(small_spec(seed=3)), generate_longtail(small_spec(seed=3))
        assert a.equals(b)
        assert not a.equals(generate_longtail(small_spec(seed=4)))

    def test_zero_offset_no_geometric_signal(self):
        ds = generate_longtail(small_spec(tail_offset=0.0, noise=1.0, head_samples_per_class=100,
                                          tail_clusters_per_class=4, tail_samples_per_cluster=20, seed=1))
        for c in range(2):
            head = ds.features[(ds.labels == c) & (ds.provenance == HEAD)].mean(axis=0)
            tail = ds.features[(ds.labels == c) & (ds.provenance == TAIL)].mean(axis=0)
            # both estimate the class centre; 80 / 100 points at per-coordinate std 1/4
            assert np.linalg.norm(head - tail) < 0.3

    def test_tail_displaced(self):
        ds = generate_longtail(small_spec(tail_samples_per_cluster=1, seed=2))
        for c in range(2):
            head = ds.features[(ds.labels == c) & (ds.provenance == HEAD)]
            tail = ds.features[(ds.labels == c) & (ds.provenance == TAIL)]
            dist = np.linalg.norm(tail - head.mean(axis=0), axis=1)
            assert (dist > 2.5).all()

    def test_tail_too_large(self):
        with pytest.raises(ConfigurationError):
            generate_longtail(small_spec(tail_samples_per_cluster=21))


class TestSplit:
    def test_five_tasks(self):
        ds = generate_longtail(LongTailSpec())
        stream = split_tasks(ds, 5, 0)
        assert len(stream) == 5 and stream.classes_per_task == 2
        class_sets = [set(t.classes()) for t in stream.tasks]
        for i in range(5):
            assert class_sets[i] == set(stream.task_classes(i))
            for j in range(i + 1, 5):
                assert not class_sets[i] & class_sets[j]
        assert set().union(*class_sets) == set(stream.class_order) == set(range(10))
        ids = np.concatenate([t.sample_ids for t in stream.tasks])
        assert sorted(ids.tolist()) == sorted(ds.sample_ids.tolist())

    def test_single_task(self):
        ds = generate_longtail(small_spec())
        stream = split_tasks(ds, 1, 0)
        assert stream.tasks[0].equals(ds)

    def test_seed_changes_order(self):
        ds = generate_longtail(LongTailSpec())
        assert split_tasks(ds, 5, 0).class_order != split_tasks(ds, 5, 1).class_order

    def test_indivisible(self):
        with pytest.raises(ConfigurationError):
            split_tasks(generate_longtail(LongTailSpec()), 3, 0)

    def test_train_test_split(self):
        ds = generate_longtail(LongTailSpec())
        train, test = train_test_split(ds, 0.2, 0)
        assert not set(train.sample_ids.tolist()) & set(test.sample_ids.tolist())
        assert len(train) + len(test) == len(ds)
        assert np.bincount(test.labels).tolist() == [24] * 10

    def test_split_independent_of_grouping(self):
        # a class lands on the same side whether split alone or inside a task
        ds = generate_longtail(LongTailSpec())
        _, whole = train_test_split(ds, 0.2, 5)
        _, part = train_test_split(subset_classes(ds, [3, 7]), 0.2, 5)
        assert set(part.sample_ids.tolist()) <= set(whole.sample_ids.tolist())


class TestSubsets:
    def test_all_classes_identity(self):
        ds = generate_longtail(small_spec())
        assert subset_classes(ds, [0, 1]).equals(ds)

    def test_empty(self):
        assert len(subset_classes(generate_longtail(small_spec()), [])) == 0

    def test_unknown_class(self):
        with pytest.raises(InputError):
            subset_classes(generate_longtail(small_spec()), [5])

    def test_labels_not_remapped(self):
        ds = generate_longtail(LongTailSpec())
        sub = subset_classes(ds, [7, 9])
        assert sub.classes() == [7, 9] and sub.class_count == 10

    def test_subsample_identity(self):
        ds = generate_longtail(small_spec())
        assert set(subsample(ds, 1.0, 0).sample_ids.tolist()) == set(ds.sample_ids.tolist())

    @pytest.mark.parametrize("f", [0.1, 0.3, 0.5, 0.7, 0.9])
    def test_subsample_counts(self, f):
        ds = generate_longtail(LongTailSpec(head_samples_per_class=94))  # 100 per class
        sub = subsample(ds, f, 0)
        assert np.bincount(sub.labels, minlength=10).tolist() == [int(np.floor(f * 100 + 1e-9))] * 10

    def test_subsample_deterministic(self):
        ds = generate_longtail(small_spec())
        assert subsample(ds, 0.3, 2).equals(subsample(ds, 0.3, 2))

    @pytest.mark.parametrize("f", [0.0, -0.1, 1.5])
    def test_subsample_range(self, f):
        with pytest.raises(ConfigurationError):
            subsample(generate_longtail(small_spec()), f, 0)

    def test_concat(self):
        ds = generate_longtail(small_spec())
        parts = [ds.take(np.arange(0, 100)), ds.take(np.arange(100, 220))]
        assert concat(parts).equals(ds)


class TestFormat:
    def test_round_trip(self, tmp_path):
        ds = generate_longtail(small_spec())
        save_dataset(ds, tmp_path / "d.mrds")
        assert load_dataset(tmp_path / "d.mrds").equals(ds)

    def test_layout(self):
        ds = generate_longtail(small_spec())
        blob = dataset_to_bytes(ds)
        magic, version, n, d, c = struct.unpack_from("<4sHQII", blob)
        assert (magic, version, n, d, c) == (b"MRDS", 1, 220, 16, 2)
        assert len(blob) == 22 + 220 * 16 * 8 + 220 * (4 + 8 + 1)
        feats = np.frombuffer(blob, "<f8", 220 * 16, 22).reshape(220, 16)
        assert np.array_equal(feats, ds.features)

    def test_bad_magic(self):
        blob = bytearray(dataset_to_bytes(generate_longtail(small_spec())))
        blob[:4] = b"XXXX"
        with pytest.raises(FormatError):
            dataset_from_bytes(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(dataset_to_bytes(generate_longtail(small_spec())))
        blob[4:6] = struct.pack("<H", 9)
        with pytest.raises(FormatError):
            dataset_from_bytes(bytes(blob))

    @pytest.mark.parametrize("cut", [1, 10, 500])
    def test_truncated(self, cut):
        blob = dataset_to_bytes(generate_longtail(small_spec()))
        with pytest.raises(FormatError):
            dataset_from_bytes(blob[:-cut])

    def test_empty_round_trip(self, tmp_path):
        empty = Dataset(np.zeros((0, 3)), [], [], 4)
        save_dataset(empty, tmp_path / "e.mrds")
        back = load_dataset(tmp_path / "e.mrds")
        assert back.equals(empty) and back.feature_dim == 3

    def test_csv_export(self, tmp_path):
        ds = generate_longtail(small_spec())
        export_csv(ds, tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0].split(",")[:4] == ["sample_id", "label", "provenance", "x0"]
        assert len(lines) == 221
