import dataclasses

import numpy as np
import pytest

from hierdet import heads
from hierdet.dataio import FeatureDataset
from hierdet.errors import ConfigError, NumericalError
from hierdet.heads import (LossConfig, PredictorHead, WarmStart, augment, forward,
                           hessian_vec_product, hvp_operator, init_head, load_head,
                           loss, loss_and_grad, save_head)

from oracles import finite_diff_grad, finite_diff_hvp


def make_batch(rng, n=12, d=6, num_categories=3, bg_fraction=0.3):
    """Random labeled batch with sane boxes."""
    labels = rng.integers(0, num_categories, size=n).astype(np.int32)
    labels[rng.random(n) < bg_fraction] = -1
    x1 = rng.uniform(0, 50, size=(n, 2))
    wh = rng.uniform(5, 30, size=(n, 2))
    proposal = np.concatenate([x1, x1 + wh], axis=1).astype(np.float32)
    shift = rng.uniform(-3, 3, size=(n, 2))
    gt = np.concatenate([x1 + shift, x1 + wh + shift], axis=1).astype(np.float32)
    gt[labels < 0] = 0.0
    return FeatureDataset(
        feature_dim=d, num_base=0,
        category_names=[f"c{i}" for i in range(num_categories)],
        has_labels=True, has_base_outputs=False,
        image_ids=np.arange(n, dtype=np.int64),
        proposal_boxes=proposal, labels=labels, gt_boxes=gt,
        base_scores=None, base_boxes=None,
        features=rng.normal(size=(n, d)).astype(np.float32))


def rel_close(analytic, reference, tol=1e-5, floor=1e-10):
    denom = np.maximum(np.abs(reference), floor)
    return (np.abs(analytic - reference) / denom).max() <= tol


class TestInitHead:
    def test_zero_std_gives_zero_head(self):
        head = init_head(3, 5, std=0.0, seed=1)
        assert not head.classifier.any() and not head.regressor.any()

    def test_sample_statistics(self):
        head = init_head(10, 200, std=0.01, seed=42)
        w = head.flat()
        assert abs(w.mean()) <= 3 * 0.01 / np.sqrt(w.size)
        assert w.std() == pytest.approx(0.01, rel=0.05)

    def test_determinism(self):
        a = init_head(4, 7, std=0.01, seed=9)
        b = init_head(4, 7, std=0.01, seed=9)
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_warm_start_rows_copied_exactly(self):
        block = np.arange(4 * 6, dtype=np.float64).reshape(4, 6)
        row = np.full(6, 0.25)
        head = init_head(3, 5, std=0.01, seed=0,
                         warm_start=WarmStart(classifier_rows={1: row},
                                              regressor_blocks={2: block}))
        np.testing.assert_array_equal(head.regressor[8:12], block)
        np.testing.assert_array_equal(head.classifier[1], row)

    def test_warm_start_shape_mismatch(self):
        with pytest.raises(ValueError, match="warm-start"):
            init_head(3, 5, warm_start=WarmStart(regressor_blocks={0: np.zeros((4, 5))}))


class TestForward:
    def test_zero_head_is_uniform(self):
        head = init_head(4, 6, std=0.0)
        probs, deltas = forward(head, np.random.default_rng(0).normal(size=(3, 6)))
        np.testing.assert_allclose(probs, 0.2, atol=1e-15)
        np.testing.assert_array_equal(deltas, np.zeros((3, 16)))

    def test_large_logit_gap_is_stable(self):
        head = init_head(2, 1, std=0.0)
        head.classifier[0, 0] = 100.0  # logit gap 100 for positive features
        probs, _ = forward(head, np.array([[1.0]]))
        assert probs[0, 0] >= 1.0 - 1e-40
        assert np.isfinite(probs).all()

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        head = init_head(5, 8, std=0.5, seed=1)
        probs, _ = forward(head, rng.normal(size=(40, 8)) * 10)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_non_finite_feature_raises(self):
        head = init_head(2, 3)
        bad = np.array([[1.0, np.inf, 0.0]])
        with pytest.raises(NumericalError):
            forward(head, bad)


class TestLossAndGrad:
    def test_zero_head_background_only(self):
        head = init_head(3, 4, std=0.0)
        batch = make_batch(np.random.default_rng(0), n=1, d=4, num_categories=3)
        batch.labels[:] = -1
        batch.gt_boxes[:] = 0.0
        value, grad = loss_and_grad(head, batch)
        assert value == pytest.approx(np.log(4), abs=1e-12)
        assert grad.shape == (head.num_params,)

    def test_perfect_regressor_has_zero_loc_gradient(self):
        # Zero regressor with gt == proposal means targets and outputs are 0.
        head = init_head(2, 5, std=0.0)
        head.classifier[:] = np.random.default_rng(1).normal(size=head.classifier.shape)
        batch = make_batch(np.random.default_rng(2), n=6, d=5, num_categories=2,
                           bg_fraction=0.0)
        batch.gt_boxes[:] = batch.proposal_boxes
        value, grad = loss_and_grad(head, batch, LossConfig(cls_weight=0.0))
        assert value == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(grad))

    @pytest.mark.parametrize("cfg", [
        LossConfig(),
        LossConfig(regression="smooth_l1", smooth_l1_beta=1.0),
        LossConfig(regression="smooth_l1", smooth_l1_beta=0.4),
        LossConfig(cls_weight=0.0),
        LossConfig(loc_weight=0.0),
        LossConfig(cls_weight=2.0, loc_weight=0.5),
    ])
    def test_gradient_matches_finite_differences(self, cfg):
        rng = np.random.default_rng(123)
        batch = make_batch(rng, n=10, d=5, num_categories=3)
        head = init_head(3, 5, std=0.3, seed=7)

        def fn(w):
            return loss(PredictorHead.from_flat(3, 5, w), batch, cfg)

        _, grad = loss_and_grad(head, batch, cfg)
        reference = finite_diff_grad(fn, head.flat(), h=1e-5)
        assert rel_close(grad, reference, tol=1e-5, floor=1e-6)

    def test_empty_batch_rejected(self):
        head = init_head(2, 4)
        batch = make_batch(np.random.default_rng(0), n=2, d=4, num_categories=2)
        with pytest.raises(ValueError, match="at least one"):
            loss_and_grad(head, batch.subset(np.array([], dtype=int)))

    def test_label_out_of_range_rejected(self):
        head = init_head(2, 4)
        batch = make_batch(np.random.default_rng(0), n=4, d=4, num_categories=2)
        batch.labels[0] = 5
        with pytest.raises(ValueError, match="label out of range"):
            loss_and_grad(head, batch)

    def test_shift_invariance_of_classification(self):
        rng = np.random.default_rng(8)
        batch = make_batch(rng, n=15, d=6, num_categories=4)
        head = init_head(4, 6, std=0.2, seed=3)
        cfg = LossConfig(loc_weight=0.0)
        base = loss(head, batch, cfg)
        shifted = head.copy()
        shifted.classifier[:, -1] += 7.5  # same constant in every bias slot
        assert loss(shifted, batch, cfg) == pytest.approx(base, abs=1e-12)


class TestHessianVectorProduct:
    def test_zero_vector(self):
        rng = np.random.default_rng(0)
        batch = make_batch(rng, n=8, d=4, num_categories=2)
        head = init_head(2, 4, std=0.1, seed=2)
        out = hessian_vec_product(head, batch, np.zeros(head.num_params), lam=3.0)
        np.testing.assert_array_equal(out, np.zeros(head.num_params))

    def test_matches_finite_difference_of_gradient(self):
        rng = np.random.default_rng(21)
        batch = make_batch(rng, n=12, d=5, num_categories=3)
        head = init_head(3, 5, std=0.3, seed=4)
        cfg = LossConfig()

        def grad_fn(w):
            return loss_and_grad(PredictorHead.from_flat(3, 5, w), batch, cfg)[1]

        for lam in (0.0, 5.0):
            v = rng.normal(size=head.num_params)
            got = hessian_vec_product(head, batch, v, cfg, lam=lam)
            ref = finite_diff_hvp(grad_fn, head.flat(), v, h=1e-5) + lam * v
            assert rel_close(got, ref, tol=1e-5, floor=1e-5 * np.abs(ref).max())

    def test_classifier_only_with_damping(self):
        rng = np.random.default_rng(33)
        batch = make_batch(rng, n=9, d=4, num_categories=2, bg_fraction=1.0)
        batch.labels[:] = -1
        batch.gt_boxes[:] = 0.0
        head = init_head(2, 4, std=0.4, seed=5)
        cfg = LossConfig()

        def grad_fn(w):
            return loss_and_grad(PredictorHead.from_flat(2, 4, w), batch, cfg)[1]

        v = rng.normal(size=head.num_params)
        got = hessian_vec_product(head, batch, v, cfg, lam=5.0)
        ref = finite_diff_hvp(grad_fn, head.flat(), v) + 5.0 * v
        assert rel_close(got, ref, tol=1e-5, floor=1e-5 * np.abs(ref).max())

    def test_linear_and_symmetric(self):
        rng = np.random.default_rng(6)
        batch = make_batch(rng, n=10, d=5, num_categories=3)
        head = init_head(3, 5, std=0.3, seed=6)
        op = hvp_operator(head, batch)
        u = rng.normal(size=head.num_params)
        v = rng.normal(size=head.num_params)
        a, b = rng.normal(size=2)
        np.testing.assert_allclose(op(a * u + b * v), a * op(u) + b * op(v),
                                   rtol=1e-10, atol=1e-12)
        s1, s2 = float(u @ op(v)), float(v @ op(u))
        assert abs(s1 - s2) <= 1e-10 * max(1.0, abs(s1))

    def test_positive_semidefinite(self):
        rng = np.random.default_rng(14)
        batch = make_batch(rng, n=14, d=6, num_categories=3)
        head = init_head(3, 6, std=0.5, seed=8)
        for lam in (0.0, 0.7):
            op = hvp_operator(head, batch, lam=lam)
            for _ in range(20):
                v = rng.normal(size=head.num_params)
                quad = float(v @ op(v))
                assert quad >= lam * float(v @ v) - 1e-10

    def test_smooth_l1_rejected(self):
        batch = make_batch(np.random.default_rng(0), n=4, d=4, num_categories=2)
        head = init_head(2, 4)
        with pytest.raises(ConfigError, match="SGD"):
            hvp_operator(head, batch, LossConfig(regression="smooth_l1"))


class TestAugment:
    def test_copy_count(self):
        batch = make_batch(np.random.default_rng(0), n=2, d=4, num_categories=2)
        out = augment(batch, copies=5, noise_std=0.1, dropout_rate=0.5, seed=0)
        assert out.n_records == 10

    def test_noise_free_copies_are_identical(self):
        batch = make_batch(np.random.default_rng(1), n=3, d=4, num_categories=2)
        out = augment(batch, copies=3, noise_std=0.0, dropout_rate=0.0, seed=0)
        for c in range(3):
            np.testing.assert_array_equal(out.features[3 * c:3 * c + 3], batch.features)
            np.testing.assert_array_equal(out.labels[3 * c:3 * c + 3], batch.labels)
            np.testing.assert_array_equal(out.proposal_boxes[3 * c:3 * c + 3],
                                          batch.proposal_boxes)

    def test_mean_preserved(self):
        # Var per coordinate of (aug - orig) is (x^2 + s^2)/(1-q) - x^2.
        rng = np.random.default_rng(2)
        d = 8
        base = rng.normal(size=d).astype(np.float32)
        n = 4000
        batch = make_batch(rng, n=4, d=d, num_categories=2)
        batch = dataclasses.replace(
            batch, features=np.tile(base, (4, 1)).astype(np.float32))
        copies = n // 4
        out = augment(batch, copies=copies, noise_std=0.1, dropout_rate=0.5, seed=9)
        diff = out.features.astype(np.float64) - np.tile(base, (out.n_records, 1))
        var = (base.astype(np.float64) ** 2 + 0.01) / 0.5 - base.astype(np.float64) ** 2
        bound = 3.0 * np.sqrt(var / out.n_records)
        assert (np.abs(diff.mean(axis=0)) <= bound).all()

    def test_deterministic_in_seed(self):
        batch = make_batch(np.random.default_rng(3), n=4, d=5, num_categories=2)
        a = augment(batch, 2, 0.1, 0.5, seed=11)
        b = augment(batch, 2, 0.1, 0.5, seed=11)
        np.testing.assert_array_equal(a.features, b.features)

    def test_dropout_rate_one_rejected(self):
        batch = make_batch(np.random.default_rng(0), n=2, d=4, num_categories=2)
        with pytest.raises(ValueError, match="dropout_rate"):
            augment(batch, 2, 0.1, 1.0, seed=0)


class TestWeightsFile:
    def test_round_trip(self, tmp_path):
        head = init_head(3, 6, std=0.01, seed=12)
        path = tmp_path / "head.fshw"
        save_head(head, path)
        loaded = load_head(path)
        assert loaded.num_categories == 3 and loaded.feature_dim == 6
        # Stored as f32, so compare at that precision.
        np.testing.assert_array_equal(loaded.classifier,
                                      head.classifier.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(loaded.regressor,
                                      head.regressor.astype(np.float32).astype(np.float64))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.fshw"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(Exception, match="magic"):
            load_head(path)
