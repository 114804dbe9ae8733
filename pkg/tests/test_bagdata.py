"""Dataset generator, file format, and split tests, each against the stated
construction rules rather than the implementation."""

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from semamil.bagdata import (Bag, BagFormatError, Dataset, SynthConfig,
                             generate_synthetic, load_bag, load_dataset,
                             save_bag, save_dataset, split_monte_carlo,
                             split_sizes)


def small_config(**kw):
    base = dict(n_bags=12, n_classes=2, L_min=12, L_max=20, D=8,
                n_clusters_true=4, signal_cluster_fraction=0.25,
                noise_sigma=0.5, grid_side=5, seed=3)
    base.update(kw)
    return SynthConfig(**base)


class TestGenerator:
    def test_all_labels_present(self):
        ds = generate_synthetic(small_config(n_bags=4))
        assert len(ds.bags) == 4
        assert {b.label for b in ds.bags} == {0, 1}

    def test_same_seed_byte_identical(self):
        a = generate_synthetic(small_config())
        b = generate_synthetic(small_config())
        for x, y in zip(a.bags, b.bags):
            assert x == y  # Bag equality compares raw bytes

    def test_different_seed_differs(self):
        a = generate_synthetic(small_config(seed=1))
        b = generate_synthetic(small_config(seed=2))
        assert any(x != y for x, y in zip(a.bags, b.bags))

    @staticmethod
    def _signal_centers(ds):
        """With sigma=0 each class's signal center is the unique row that
        occurs in that class's bags and never in any other class's bags
        (background clusters are shared; signal clusters are not)."""
        rows_by_class = {}
        for bag in ds.bags:
            rows_by_class.setdefault(bag.label, []).append(
                {tuple(r) for r in bag.X})
        centers = {}
        for label, row_sets in rows_by_class.items():
            everywhere = set.intersection(*row_sets)
            elsewhere = set().union(*(s for l, ss in rows_by_class.items()
                                      if l != label for s in ss))
            only_here = everywhere - elsewhere
            assert len(only_here) == 1, f"class {label}: {len(only_here)} candidates"
            centers[label] = next(iter(only_here))
        return centers

    def test_signal_count_exact_with_zero_noise(self):
        cfg = small_config(noise_sigma=0.0, signal_cluster_fraction=0.25,
                           L_min=64, L_max=64, grid_side=8)
        ds = generate_synthetic(cfg)
        centers = self._signal_centers(ds)
        for bag in ds.bags:
            center = np.array(centers[bag.label], dtype=np.float32)
            matches = np.all(bag.X == center, axis=1).sum()
            assert matches == 16  # round(0.25 * 64)

    def test_label_recovery_oracle_with_zero_noise(self):
        """Nearest-center classification of per-bag signal means is perfect."""
        cfg = small_config(noise_sigma=0.0, n_bags=20, L_min=40, L_max=40,
                           grid_side=7, n_clusters_true=6)
        ds = generate_synthetic(cfg)
        centers = self._signal_centers(ds)
        center_mat = np.array([centers[l] for l in sorted(centers)], dtype=np.float32)
        hits = 0
        for bag in ds.bags:
            mask = np.all(bag.X == np.array(centers[bag.label], np.float32), axis=1)
            signal_mean = bag.X[mask].mean(axis=0)
            predicted = np.linalg.norm(center_mat - signal_mean, axis=1).argmin()
            hits += int(predicted == bag.label)
        assert hits == len(ds.bags)

    def test_coordinates_distinct_and_in_grid(self):
        ds = generate_synthetic(small_config())
        for bag in ds.bags:
            assert len({tuple(rc) for rc in bag.coords}) == bag.L
            assert bag.coords.min() >= 0
            assert bag.coords.max() < 5

    def test_bag_lengths_within_bounds(self):
        ds = generate_synthetic(small_config())
        for bag in ds.bags:
            assert 12 <= bag.L <= 20

    def test_inseparable_centers_error(self):
        # in one dimension, 8 centers can never sit pairwise 4*sigma apart
        # when the centers themselves spread only ~3*sigma
        cfg = small_config(D=1, noise_sigma=1.0, n_clusters_true=8)
        with pytest.raises(ValueError, match="inseparable"):
            generate_synthetic(cfg)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            small_config(L_max=26)  # exceeds grid_side^2
        with pytest.raises(ValueError):
            small_config(n_clusters_true=1)
        with pytest.raises(ValueError):
            small_config(signal_cluster_fraction=1.5)


class TestBagFile:
    def test_roundtrip_minimal_bag(self, tmp_path):
        bag = Bag("b0", 0, np.array([[0, 0]]), np.array([[0.0]], dtype=np.float32))
        save_bag(bag, tmp_path / "b0.semb")
        again = load_bag(tmp_path / "b0.semb", bag_id="b0", label=0)
        assert again == bag

    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        bag = Bag("bag-7", 1, np.array([[0, 1], [2, 3], [4, 0]]),
                  rng.normal(0, 1, (3, 5)).astype(np.float32))
        save_bag(bag, tmp_path / "x.semb")
        again = load_bag(tmp_path / "x.semb", bag_id="bag-7", label=1)
        assert again == bag

    def test_file_size_matches_layout(self, tmp_path):
        bag = Bag("b", 0, np.array([[0, 0], [0, 1], [1, 0]]),
                  np.ones((3, 2), dtype=np.float32))
        save_bag(bag, tmp_path / "b.semb")
        size = (tmp_path / "b.semb").stat().st_size
        assert size == 16 + 3 * 2 * 4 + 3 * 2 * 4  # header + floats + coords

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.semb"
        p.write_bytes(b"XXXX" + b"\x00" * 12)
        with pytest.raises(BagFormatError) as exc:
            load_bag(p)
        assert exc.value.code == "bad_magic"

    def test_bad_version(self, tmp_path):
        p = tmp_path / "v9.semb"
        p.write_bytes(b"SEMB" + struct.pack("<III", 9, 1, 1) + b"\x00" * 12)
        with pytest.raises(BagFormatError) as exc:
            load_bag(p)
        assert exc.value.code == "bad_version"

    def test_truncated_payload(self, tmp_path):
        bag = Bag("b", 0, np.array([[0, 0], [0, 1]]), np.ones((2, 2), dtype=np.float32))
        p = tmp_path / "t.semb"
        save_bag(bag, p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(BagFormatError) as exc:
            load_bag(p)
        assert exc.value.code == "truncated"

    def test_non_finite_rejected(self, tmp_path):
        p = tmp_path / "nf.semb"
        payload = b"SEMB" + struct.pack("<III", 1, 1, 1)
        payload += struct.pack("<f", float("nan")) + struct.pack("<II", 0, 0)
        p.write_bytes(payload)
        with pytest.raises(BagFormatError) as exc:
            load_bag(p)
        assert exc.value.code == "non_finite"

    def test_manifest_roundtrip(self, tmp_path):
        ds = generate_synthetic(small_config())
        mpath = save_dataset(ds, tmp_path / "data")
        again = load_dataset(mpath)
        assert again.name == ds.name and again.n_classes == ds.n_classes
        for x, y in zip(ds.bags, again.bags):
            assert x == y

    def test_manifest_schema(self, tmp_path):
        ds = generate_synthetic(small_config())
        mpath = save_dataset(ds, tmp_path / "data")
        manifest = json.loads(Path(mpath).read_text())
        assert set(manifest) == {"name", "n_classes", "bags"}
        assert set(manifest["bags"][0]) == {"bag_id", "path", "label"}


class TestSplits:
    def _dataset(self, n):
        bags = [Bag(f"b{i}", i % 2, np.array([[0, 0]]),
                    np.zeros((1, 2), dtype=np.float32)) for i in range(n)]
        return Dataset("toy", 2, bags)

    def test_sizes_for_100(self):
        n_train, n_val, n_test = split_sizes(100)
        assert n_test == 10
        assert n_train in (76, 77)
        assert n_train + n_val + n_test == 100

    def test_ratio_within_one_bag(self):
        for n in (20, 57, 100, 333, 1024):
            n_train, n_val, n_test = split_sizes(n)
            assert abs(n_train - 0.765 * n) <= 1
            assert abs(n_test - 0.10 * n) <= 1

    def test_fold_count_and_determinism(self):
        ds = self._dataset(40)
        plan = split_monte_carlo(ds, n_folds=10, seed=5)
        again = split_monte_carlo(ds, n_folds=10, seed=5)
        assert len(plan.folds) == 10
        assert plan.folds == again.folds
        assert plan.fold_seeds == [5 + i for i in range(10)]

    def test_coverage_and_disjointness(self):
        ds = self._dataset(53)
        plan = split_monte_carlo(ds, n_folds=10, seed=1)
        all_ids = {b.bag_id for b in ds.bags}
        for train, val, test in plan.folds:
            assert set(train) | set(val) | set(test) == all_ids
            assert not set(train) & set(val)
            assert not set(train) & set(test)
            assert not set(val) & set(test)

    def test_folds_are_independent_shuffles(self):
        ds = self._dataset(60)
        plan = split_monte_carlo(ds, n_folds=10, seed=2)
        tests = [tuple(sorted(f[2])) for f in plan.folds]
        assert len(set(tests)) > 1  # Monte Carlo, not a partition

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            split_monte_carlo(self._dataset(8), n_folds=3, seed=0)


class TestBagInvariants:
    def test_duplicate_coords_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            Bag("b", 0, np.array([[1, 1], [1, 1]]), np.ones((2, 2), dtype=np.float32))

    def test_non_finite_embeddings_rejected(self):
        X = np.array([[np.inf, 0.0]], dtype=np.float32)
        with pytest.raises(ValueError, match="finite"):
            Bag("b", 0, np.array([[0, 0]]), X)

    def test_dataset_label_range_checked(self):
        bag = Bag("b", 3, np.array([[0, 0]]), np.zeros((1, 1), dtype=np.float32))
        with pytest.raises(ValueError):
            Dataset("d", 2, [bag])
