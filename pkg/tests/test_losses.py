import csv

import numpy as np
import pytest

from avesformer.losses import (
    EPS,
    LOSS_PROFILES,
    LossWeights,
    MaskPair,
    aux_loss,
    central_difference,
    dice_grad,
    dice_loss,
    downsample_nearest,
    f_beta,
    f_score,
    gradcheck,
    iou_grad,
    iou_loss,
    jaccard,
    random_mask_pair,
    relative_error,
    total_loss,
    write_metrics_csv,
)
from avesformer.tensor import Rng, ShapeError


def count_jaccard(p, g):
    inter = union = 0
    for a, b in zip(p.ravel(), g.ravel()):
        inter += int(a == 1 and b == 1)
        union += int(a == 1 or b == 1)
    return 1.0 if union == 0 else inter / union


def count_f(p, g, beta_sq=0.3):
    tp = sum(int(a == 1 and b == 1) for a, b in zip(p.ravel(), g.ravel()))
    n_p, n_g = int(p.sum()), int(g.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    prec = tp / n_p if n_p else 0.0
    rec = tp / n_g if n_g else 0.0
    den = beta_sq * prec + rec
    return 0.0 if den == 0 else (1 + beta_sq) * prec * rec / den


HALF_PAIR = MaskPair(np.full((2, 2), 0.5), np.array([[1.0, 1.0], [0.0, 0.0]]))


class TestHandValues:
    def test_dice_half(self):
        assert dice_loss(HALF_PAIR) == pytest.approx(1 - (2 + EPS) / (4 + EPS), abs=1e-15)
        assert dice_loss(HALF_PAIR) == pytest.approx(0.5, abs=1e-6)

    def test_iou_half(self):
        assert iou_loss(HALF_PAIR) == pytest.approx(1 - (1 + EPS) / (3 + EPS), abs=1e-15)
        assert iou_loss(HALF_PAIR) == pytest.approx(2 / 3, abs=1e-6)

    def test_perfect_overlap(self, rng):
        g = (rng.random((6, 6)) < 0.5).astype(float)
        pair = MaskPair(g, g)
        assert 0 <= dice_loss(pair) < 1e-6
        assert 0 <= iou_loss(pair) < 1e-6

    def test_no_overlap_limit(self):
        pair = MaskPair(np.full((4, 4), 1e-12), np.ones((4, 4)))
        assert dice_loss(pair) == pytest.approx(1.0, abs=1e-6)
        disjoint = MaskPair(np.eye(4), 1 - np.eye(4))
        assert iou_loss(disjoint) == pytest.approx(1.0, abs=1e-6)

    def test_pair_validation(self):
        with pytest.raises(ShapeError):
            MaskPair(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            MaskPair(np.full((2, 2), 1.5), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            MaskPair(np.zeros((2, 2)), np.full((2, 2), 0.5))


def raw_dice(p, g, eps=EPS):
    return 1 - (2 * np.sum(p * g) + eps) / (p.sum() + g.sum() + eps)


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_against_central_differences(self, seed):
        pair = random_mask_pair(Rng(seed), 6, 7)
        for loss, grad in ((dice_loss, dice_grad), (iou_loss, iou_grad)):
            numeric = central_difference(lambda p: loss(MaskPair(p, pair.gt)), pair.pred)
            assert relative_error(grad(pair), numeric) < 1e-5

    def test_dice_at_saturated_match(self):
        # the gradient here is -1/(2n + eps) per pixel, not zero
        n = 16
        pair = MaskPair(np.ones((4, 4)), np.ones((4, 4)))
        g = dice_grad(pair)
        np.testing.assert_allclose(g, -1.0 / (2 * n + EPS), rtol=1e-14)
        numeric = central_difference(lambda p: raw_dice(p, pair.gt), pair.pred)
        assert relative_error(g, numeric) < 1e-5

    def test_zero_ground_truth_closed_form(self, rng):
        p = rng.uniform((5, 5), 0.1, 0.9)
        pair = MaskPair(p, np.zeros((5, 5)))
        expected = EPS / (p.sum() + EPS) ** 2
        np.testing.assert_allclose(dice_grad(pair), expected, rtol=1e-13)
        assert dice_loss(pair) == pytest.approx(1 - EPS / (p.sum() + EPS), abs=1e-15)

    def test_gradcheck_driver(self):
        res = gradcheck(cases=5, seed=3)
        assert res.cases == 5
        assert res.max_rel_error < 1e-5

    def test_relative_error_floor(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
        assert relative_error([2.0], [1.0]) == 0.5


class TestProperties:
    def test_ranges(self):
        r = Rng(17)
        for _ in range(50):
            pair = random_mask_pair(r, 5, 5, margin=0.0)
            assert 0 <= dice_loss(pair) < 1
            assert 0 <= iou_loss(pair) < 1
            pb = (r.random((5, 5)) < 0.5).astype(float)
            assert 0 <= jaccard(pb, pair.gt) <= 1
            assert 0 <= f_score(pb, pair.gt) <= 1

    def test_monotone_improvement(self):
        r = Rng(23)
        for _ in range(200):
            pair = random_mask_pair(r, 4, 4)
            i, j = (int(v) for v in r.integers(0, 4, 2))
            step = float(r.uniform((1,), 0.0, 1.0)[0])
            moved = pair.pred.copy()
            target = pair.gt[i, j]
            moved[i, j] += step * (target - moved[i, j])
            assert dice_loss(MaskPair(moved, pair.gt)) <= dice_loss(pair) + 1e-15


class TestAux:
    def test_single_channel_equals_dice(self, rng):
        f = rng.normal((1, 6, 6))
        m = (rng.random((6, 6)) < 0.5).astype(float)
        squashed = 1 / (1 + np.exp(-f[0]))
        assert aux_loss(f, m) == pytest.approx(dice_loss(MaskPair(squashed, m)), abs=1e-15)

    def test_zero_features(self, rng):
        m = (rng.random((5, 5)) < 0.5).astype(float)
        expected = dice_loss(MaskPair(np.full((5, 5), 0.5), m))
        assert aux_loss(np.zeros((7, 5, 5)), m) == pytest.approx(expected, abs=1e-15)

    def test_saturated_correct(self, rng):
        m = (rng.random((6, 6)) < 0.5).astype(float)
        f = np.where(m == 1, 50.0, -50.0)[None].repeat(3, axis=0)
        assert aux_loss(f, m) < 1e-6

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            aux_loss(np.zeros((2, 4, 4)), np.zeros((4, 5)))

    def test_downsample_nearest(self):
        m = np.arange(16.0).reshape(4, 4)
        np.testing.assert_array_equal(downsample_nearest(m, 2, 2), [[5, 7], [13, 15]])
        assert np.array_equal(downsample_nearest(m, 4, 4), m)


class TestTotal:
    @pytest.fixture
    def inputs(self, rng):
        pair = random_mask_pair(rng, 8, 8)
        return pair, rng.normal((4, 8, 8)), pair.gt

    def test_zero_weights(self, inputs):
        assert total_loss(*inputs, weights=LossWeights(0, 0, 0)).total == 0.0

    def test_profile_decomposition(self, inputs):
        pair, f, m = inputs
        parts = (iou_loss(pair), dice_loss(pair), aux_loss(f, m))
        for name, w in (("S4MS3", (1.8, 1.0, 0.1)), ("AVSS", (1.0, 1.0, 0.1))):
            b = total_loss(pair, f, m, LOSS_PROFILES[name])
            assert (b.iou, b.dice, b.aux) == parts
            assert abs(b.total - sum(wi * pi for wi, pi in zip(w, parts))) < 1e-12

    def test_homogeneity_and_additivity(self, inputs):
        w1, w2 = LossWeights(0.3, 1.1, 0.7), LossWeights(1.2, 0.4, 0.05)
        t1 = total_loss(*inputs, weights=w1).total
        t2 = total_loss(*inputs, weights=w2).total
        t12 = total_loss(*inputs, weights=LossWeights(1.5, 1.5, 0.75)).total
        assert total_loss(*inputs, weights=w1.scaled(2)).total == pytest.approx(2 * t1, abs=1e-12)
        assert t12 == pytest.approx(t1 + t2, abs=1e-12)

    def test_no_elf_means_no_aux(self, inputs):
        pair, _, m = inputs
        b = total_loss(pair, None, m)
        assert b.aux == 0.0
        assert b.total == pytest.approx(1.8 * b.iou + b.dice, abs=1e-15)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-1, 1, 1)


class TestMetrics:
    def test_counting_oracle(self):
        r = Rng(99)
        for _ in range(200):
            p = (r.random((8, 8)) < 0.4).astype(float)
            g = (r.random((8, 8)) < 0.4).astype(float)
            assert jaccard(p, g) == count_jaccard(p, g)
            assert f_score(p, g) == count_f(p, g)

    def test_hand_f_value(self):
        assert f_beta(0.5, 1.0) == pytest.approx(0.565217, abs=1e-6)
        # 2 predicted pixels, 1 of them correct, 1 gt pixel: precision 0.5, recall 1
        assert f_score(np.array([[1.0, 1.0]]), np.array([[1.0, 0.0]])) == pytest.approx(0.565217, abs=1e-6)

    def test_trivial_cases(self):
        m = np.array([[1.0, 0.0], [1.0, 1.0]])
        assert jaccard(m, m) == 1.0 and f_score(m, m) == 1.0
        assert jaccard(m, 1 - m) == 0.0
        assert f_score(np.zeros((2, 2)), m) == 0.0
        z = np.zeros((3, 3))
        assert jaccard(z, z) == 1.0 and f_score(z, z) == 1.0

    def test_requires_binary(self):
        with pytest.raises(ValueError):
            jaccard(np.full((2, 2), 0.7), np.ones((2, 2)))

    def test_csv(self, tmp_path):
        write_metrics_csv(tmp_path / "m.csv", [("a", 1.0, 0.5)])
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert rows == [["sample_id", "jaccard", "f_score"], ["a", "1.000000", "0.500000"]]
