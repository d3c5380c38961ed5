"""Synthetic generation, the MVCL1 file format, and batching."""

import numpy as np
import pytest

from mvcl.data import (
    BadMagicError,
    DatasetHeader,
    SampleRecord,
    ShapeMismatchError,
    SynthConfig,
    TruncatedFileError,
    generate_synthetic,
    make_batches,
    read_dataset,
    write_dataset,
)
from mvcl.errors import ConfigError
from mvcl.metrics import linear_probe_accuracy
from mvcl.losses import contrastive_classes
from mvcl.rng import RngState


def small_cfg(**overrides):
    base = dict(train_samples=40, val_samples=10, test_samples=10, seed=5)
    base.update(overrides)
    return SynthConfig(**base)


def records_equal(a: SampleRecord, b: SampleRecord) -> bool:
    return (
        np.array_equal(a.x_t, b.x_t) and np.array_equal(a.x_a, b.x_a)
        and np.array_equal(a.x_v, b.x_v) and a.y == b.y
        and a.y_t == b.y_t and a.y_a == b.y_a and a.y_v == b.y_v
    )


class TestGenerate:
    def test_same_seed_same_dataset(self):
        first = generate_synthetic(small_cfg())
        second = generate_synthetic(small_cfg())
        assert all(records_equal(x, y) for x, y in zip(first.train, second.train))
        assert all(records_equal(x, y) for x, y in zip(first.test, second.test))

    def test_noiseless_consistent_classes_are_identical(self):
        ds = generate_synthetic(small_cfg(noise_scale=0.0, consistency=1.0))
        by_label = {}
        for rec in ds.train:
            by_label.setdefault(rec.y, rec)
            assert np.array_equal(rec.x_t, by_label[rec.y].x_t)
            assert np.array_equal(rec.x_v, by_label[rec.y].x_v)

    def test_raw_features_are_linearly_separable(self):
        ds = generate_synthetic(small_cfg(train_samples=200, noise_scale=0.1))
        pooled = np.stack([
            np.concatenate([r.x_t.mean(0), r.x_a.mean(0), r.x_v.mean(0)])
            for r in ds.train
        ])
        labels = contrastive_classes([r.y for r in ds.train])
        assert linear_probe_accuracy(pooled, labels, RngState(0)) > 0.95

    def test_separability_monotone_in_noise(self):
        for seed in range(3):
            accs = []
            for sigma in (0.8, 0.4, 0.2):
                ds = generate_synthetic(small_cfg(train_samples=200, noise_scale=sigma,
                                                  seed=seed))
                pooled = np.stack([
                    np.concatenate([r.x_t.mean(0), r.x_a.mean(0), r.x_v.mean(0)])
                    for r in ds.train
                ])
                labels = contrastive_classes([r.y for r in ds.train])
                accs.append(linear_probe_accuracy(pooled, labels, RngState(seed)))
            assert accs[1] >= accs[0] - 0.01
            assert accs[2] >= accs[1] - 0.01

    def test_multi_task_labels_present(self):
        ds = generate_synthetic(small_cfg(multi_task=True, consistency=0.7))
        assert all(r.y_t is not None and r.y_a is not None and r.y_v is not None
                   for r in ds.train)

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            small_cfg(classes=1)


class TestFileFormat:
    def write_tmp(self, tmp_path, cfg=None, split="train"):
        cfg = cfg or small_cfg()
        ds = generate_synthetic(cfg)
        path = tmp_path / f"{split}.mvcl"
        write_dataset(path, cfg.header(split), ds.split(split))
        return path, cfg.header(split), ds.split(split)

    def test_round_trip_is_bitwise(self, tmp_path):
        path, header, records = self.write_tmp(tmp_path)
        got_header, got_records = read_dataset(path)
        assert got_header == header
        assert all(records_equal(a, b) for a, b in zip(records, got_records))
        second = tmp_path / "rewrite.mvcl"
        write_dataset(second, got_header, got_records)
        assert path.read_bytes() == second.read_bytes()

    def test_multi_task_round_trip(self, tmp_path):
        path, header, records = self.write_tmp(tmp_path, small_cfg(multi_task=True))
        _, got = read_dataset(path)
        assert all(records_equal(a, b) for a, b in zip(records, got))

    def test_corrupted_magic(self, tmp_path):
        path, _, _ = self.write_tmp(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        bad = tmp_path / "bad.mvcl"
        bad.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            read_dataset(bad)

    def test_truncation_names_the_record(self, tmp_path):
        path, header, _ = self.write_tmp(tmp_path)
        blob = path.read_bytes()
        header_bytes = 6 + 4 + 24 + 1 + 4 + 1
        record_bytes = 4 + 4 * sum(l * d for l, d in header.dims.values())
        cut = tmp_path / "cut.mvcl"
        cut.write_bytes(blob[: header_bytes + 3 * record_bytes + 10])
        with pytest.raises(TruncatedFileError) as err:
            read_dataset(cut)
        assert err.value.record_index == 3

    def test_trailing_bytes_are_a_mismatch(self, tmp_path):
        path, _, _ = self.write_tmp(tmp_path)
        extended = tmp_path / "extended.mvcl"
        extended.write_bytes(path.read_bytes() + b"\x00\x01")
        with pytest.raises(ShapeMismatchError):
            read_dataset(extended)

    def test_writing_wrong_shapes_is_rejected(self, tmp_path):
        cfg = small_cfg()
        ds = generate_synthetic(cfg)
        broken = ds.train[:]
        broken[0] = SampleRecord(x_t=np.zeros((2, 2)), x_a=broken[0].x_a,
                                 x_v=broken[0].x_v, y=0.0)
        with pytest.raises(ShapeMismatchError):
            write_dataset(tmp_path / "broken.mvcl", cfg.header("train"), broken)

    def test_writing_wrong_count_is_rejected(self, tmp_path):
        cfg = small_cfg()
        ds = generate_synthetic(cfg)
        with pytest.raises(ShapeMismatchError):
            write_dataset(tmp_path / "short.mvcl", cfg.header("train"), ds.train[:-1])


class TestHeaderValidation:
    def test_classification_needs_classes(self):
        with pytest.raises(ConfigError):
            DatasetHeader(n=1, dims={"t": (2, 2), "a": (2, 2), "v": (2, 2)},
                          task="classification", num_classes=1, multi_task=False)

    def test_regression_uses_zero_classes(self):
        with pytest.raises(ConfigError):
            DatasetHeader(n=1, dims={"t": (2, 2), "a": (2, 2), "v": (2, 2)},
                          task="regression", num_classes=3, multi_task=False)


class TestBatching:
    def records(self, n=10):
        return generate_synthetic(small_cfg(train_samples=n)).train

    def test_training_drops_short_batch(self):
        batches = make_batches(self.records(10), 4, RngState(0), training=True)
        assert [b.size for b in batches] == [4, 4]

    def test_evaluation_keeps_short_batch(self):
        batches = make_batches(self.records(10), 4, training=False)
        assert [b.size for b in batches] == [4, 4, 2]

    def test_same_seed_same_composition(self):
        first = make_batches(self.records(10), 4, RngState(3), training=True)
        second = make_batches(self.records(10), 4, RngState(3), training=True)
        assert all(np.array_equal(a.indices, b.indices) for a, b in zip(first, second))

    def test_no_record_repeats_within_an_epoch(self):
        batches = make_batches(self.records(10), 4, RngState(1), training=True)
        seen = np.concatenate([b.indices for b in batches])
        assert len(seen) == len(set(seen.tolist()))

    def test_evaluation_covers_every_record_exactly_once(self):
        batches = make_batches(self.records(10), 4, training=False)
        seen = np.concatenate([b.indices for b in batches])
        assert sorted(seen.tolist()) == list(range(10))

    def test_contrastive_batch_size_floor(self):
        with pytest.raises(ConfigError):
            make_batches(self.records(10), 1, RngState(0), training=True)

    def test_batch_tensor_shapes(self):
        batch = make_batches(self.records(8), 4, RngState(0), training=True)[0]
        assert batch.x["t"].shape == (4, 6, 12)
        assert batch.x["a"].shape == (4, 4, 8)
        assert batch.x["v"].shape == (4, 5, 10)
        assert batch.y.shape == (4,)
