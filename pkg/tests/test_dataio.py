import dataclasses
import json

import numpy as np
import pytest

from hierdet import dataio
from hierdet.dataio import (FeatureDataset, SyntheticConfig, generate_synthetic,
                            read_dataset, read_detections, read_hierarchy,
                            write_dataset, write_detections, write_hierarchy)
from hierdet.detect import Detection
from hierdet.errors import FormatError, ValidationError
from hierdet.hierarchy import ClassHierarchy

from conftest import small_config
from oracles import normal_equations_fit


def tiny_dataset(with_base=True):
    n, d, b = 3, 4, 2
    rng = np.random.default_rng(0)
    scores = rng.random((n, b + 1))
    scores /= scores.sum(axis=1, keepdims=True)
    return FeatureDataset(
        feature_dim=d, num_base=b if with_base else 0,
        category_names=["cat", "dog"], has_labels=True,
        has_base_outputs=with_base,
        image_ids=np.array([0, 0, 1], dtype=np.int64),
        proposal_boxes=np.array([[0, 0, 5, 5], [1, 1, 6, 7], [2, 2, 9, 9]],
                                dtype=np.float32),
        labels=np.array([0, -1, 1], dtype=np.int32),
        gt_boxes=np.array([[0, 0, 5, 6], [0, 0, 0, 0], [2, 2, 8, 8]],
                          dtype=np.float32),
        base_scores=scores.astype(np.float32) if with_base else None,
        base_boxes=rng.uniform(1, 5, size=(n, b, 4)).astype(np.float32)
        + np.array([0, 0, 10, 10], dtype=np.float32) if with_base else None,
        features=rng.normal(size=(n, d)).astype(np.float32))


def assert_datasets_equal(a, b):
    assert a.feature_dim == b.feature_dim and a.num_base == b.num_base
    assert a.category_names == b.category_names
    assert a.has_labels == b.has_labels and a.has_base_outputs == b.has_base_outputs
    np.testing.assert_array_equal(a.image_ids, b.image_ids)
    np.testing.assert_array_equal(a.proposal_boxes, b.proposal_boxes)
    for name in ("labels", "gt_boxes", "base_scores", "base_boxes"):
        left, right = getattr(a, name), getattr(b, name)
        if left is None:
            assert right is None
        else:
            np.testing.assert_array_equal(left, right)
    np.testing.assert_array_equal(a.features, b.features)


class TestDatasetFile:
    def test_empty_dataset_round_trip(self, tmp_path):
        ds = FeatureDataset(
            feature_dim=4, num_base=0, category_names=[], has_labels=True,
            has_base_outputs=False, image_ids=np.zeros(0, dtype=np.int64),
            proposal_boxes=np.zeros((0, 4), np.float32),
            labels=np.zeros(0, np.int32), gt_boxes=np.zeros((0, 4), np.float32),
            base_scores=None, base_boxes=None,
            features=np.zeros((0, 4), np.float32))
        path = tmp_path / "empty.fsfd"
        write_dataset(ds, path)
        assert_datasets_equal(read_dataset(path), ds)

    def test_single_record_with_base_outputs_round_trip(self, tmp_path):
        ds = tiny_dataset(with_base=True).subset(np.array([0]))
        path = tmp_path / "one.fsfd"
        write_dataset(ds, path)
        assert_datasets_equal(read_dataset(path), ds)

    def test_full_round_trip_bit_exact(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "ds.fsfd"
        write_dataset(ds, path)
        again = tmp_path / "ds2.fsfd"
        write_dataset(read_dataset(path), again)
        assert path.read_bytes() == again.read_bytes()

    def test_truncated_record_names_offset(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "ds.fsfd"
        write_dataset(ds, path)
        blob = path.read_bytes()
        cut = tmp_path / "cut.fsfd"
        cut.write_bytes(blob[:-10])
        with pytest.raises(FormatError, match="byte offset") as info:
            read_dataset(cut)
        assert info.value.offset > 12

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fsfd"
        path.write_bytes(b"XXXX" + b"\x00" * 30)
        with pytest.raises(FormatError, match="magic") as info:
            read_dataset(path)
        assert info.value.offset == 0

    def test_version_mismatch(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "ds.fsfd"
        write_dataset(ds, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        bad = tmp_path / "v9.fsfd"
        bad.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            read_dataset(bad)

    def test_header_payload_mismatch(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "ds.fsfd"
        write_dataset(ds, path)
        blob = path.read_bytes()
        grown = tmp_path / "grown.fsfd"
        grown.write_bytes(blob + b"\x00" * 8)
        with pytest.raises(FormatError, match="payload"):
            read_dataset(grown)

    def test_validation_rejects_bad_boxes(self, tmp_path):
        ds = tiny_dataset()
        ds.proposal_boxes[0] = [5, 5, 5, 6]
        with pytest.raises(ValidationError, match="extent"):
            write_dataset(ds, tmp_path / "x.fsfd")

    def test_validation_rejects_nonzero_bg_gt(self, tmp_path):
        ds = tiny_dataset()
        ds.gt_boxes[1] = [1, 1, 2, 2]
        with pytest.raises(ValidationError, match="all-zero"):
            write_dataset(ds, tmp_path / "x.fsfd")


class TestHierarchyFile:
    def test_round_trip_identity(self, tmp_path):
        h = ClassHierarchy.from_parent_map(
            ["animal", "food"],
            {"cat": "animal", "dog": "animal", "apple": "food", "sofa": "background"})
        path = tmp_path / "h.json"
        write_hierarchy(h, path)
        back = read_hierarchy(path)
        assert back.base_categories == h.base_categories
        assert back.subsets == h.subsets
        write_hierarchy(back, tmp_path / "h2.json")
        assert (tmp_path / "h2.json").read_bytes() == path.read_bytes()

    def test_all_under_background_is_valid(self, tmp_path):
        path = tmp_path / "h.json"
        path.write_text(json.dumps(
            {"base": ["a", "b"], "novel": {"x": "background", "y": "background"}}))
        h = read_hierarchy(path)
        assert h.subsets == [[], [], ["x", "y"]]

    def test_empty_subsets_are_valid(self):
        h = ClassHierarchy.from_parent_map(["a", "b"], {"x": "a"})
        assert h.subsets == [["x"], [], []]

    def test_duplicate_parent_assignment_rejected(self, tmp_path):
        path = tmp_path / "dup.json"
        path.write_text('{"base": ["animal", "food"], '
                        '"novel": {"cat": "animal", "cat": "food"}}')
        with pytest.raises(ValidationError, match="two parents"):
            read_hierarchy(path)

    def test_unknown_parent_rejected(self, tmp_path):
        path = tmp_path / "unk.json"
        path.write_text('{"base": ["animal"], "novel": {"cat": "vehicle"}}')
        with pytest.raises(ValidationError, match="unknown parent"):
            read_hierarchy(path)

    def test_name_collision_rejected(self):
        with pytest.raises(ValidationError, match="collides"):
            ClassHierarchy.from_parent_map(["animal"], {"animal": "background"})


class TestDetectionsFile:
    def test_round_trip(self, tmp_path):
        dets = [Detection(0, "cat", 0.875, (1.5, 2.25, 10.125, 20.0)),
                Detection(3, "dog", 1.0 / 3.0, (0.1, 0.2, 0.30000000000000004, 4.0))]
        path = tmp_path / "dets.jsonl"
        write_detections(dets, path)
        assert read_detections(path) == dets
        write_detections(read_detections(path), tmp_path / "dets2.jsonl")
        assert (tmp_path / "dets2.jsonl").read_bytes() == path.read_bytes()

    def test_bad_line_reports_offset(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"image_id":0,"category":"a","score":0.5,"box":[0,0,1,1]}\n'
                        'not json\n')
        with pytest.raises(FormatError, match="byte offset"):
            read_detections(path)


class TestGenerateSynthetic:
    def test_deterministic(self):
        cfg = small_config(seed=5)
        a_train, a_test, a_truth = generate_synthetic(cfg)
        b_train, b_test, b_truth = generate_synthetic(cfg)
        assert_datasets_equal(a_train, b_train)
        assert_datasets_equal(a_test, b_test)
        np.testing.assert_array_equal(a_truth.category_means, b_truth.category_means)
        assert a_truth.parent_map == b_truth.parent_map

    def test_record_count(self):
        cfg = SyntheticConfig(num_categories=2, shots_per_category=1, feature_dim=4,
                              cluster_separation=5.0, within_cluster_std=1.0,
                              proposals_per_object=1,
                              background_proposals_per_image=0, seed=0)
        train, _, _ = generate_synthetic(cfg)
        assert train.n_records == 2

    def test_means_respect_separation(self):
        cfg = small_config(seed=3, num_categories=6)
        _, _, truth = generate_synthetic(cfg)
        means = truth.category_means
        diff = means[:, None, :] - means[None, :, :]
        dists = np.sqrt((diff ** 2).sum(-1))
        off_diag = dists[np.triu_indices(len(means), k=1)]
        assert off_diag.min() >= cfg.cluster_separation - 1e-9

    def test_score_rows_sum_to_one(self):
        cfg = small_config(seed=1)
        train, _, _ = generate_synthetic(cfg)
        sums = train.base_scores.astype(np.float64).sum(axis=1)
        assert np.abs(sums - 1.0).max() <= 1e-6
        assert (train.base_scores >= 0).all()

    def test_well_separated_clusters_are_linearly_classifiable(self):
        # Ridge fit on one-hot targets is the independent "trained to
        # convergence" stand-in; s = 100 sigma makes every margin huge.
        # Background proposals are generated to overlap the foreground on
        # purpose, so they stay out of this separability check.
        cfg = small_config(seed=4, cluster_separation=100.0, within_cluster_std=1.0,
                           shots_per_category=10, num_base=0,
                           background_proposals_per_image=0)
        train, test, _ = generate_synthetic(cfg)
        num_classes = len(train.category_names) + 1
        x = np.concatenate([train.features.astype(np.float64),
                            np.ones((train.n_records, 1))], axis=1)
        y = np.where(train.labels < 0, num_classes - 1, train.labels)
        onehot = np.eye(num_classes)[y]
        weights = normal_equations_fit(x, onehot, ridge=1e-6)
        xt = np.concatenate([test.features.astype(np.float64),
                             np.ones((test.n_records, 1))], axis=1)
        predicted = np.argmax(xt @ weights, axis=1)
        expected = np.where(test.labels < 0, num_classes - 1, test.labels)
        assert (predicted == expected).all()

    def test_written_output_is_valid(self, tmp_path):
        train, test, _ = generate_synthetic(small_config(seed=8))
        write_dataset(train, tmp_path / "t.fsfd")
        assert_datasets_equal(read_dataset(tmp_path / "t.fsfd"), train)
