import math

import numpy as np
import pytest

from cfr.metrics import evaluate, surface_voxels
from cfr.volume_io import LabelVolume

from oracles import surface_metrics_ref, surface_voxels_ref


def _lab(data, k=2):
    return LabelVolume(np.asarray(data, dtype=np.uint8), num_classes=k)


def _random_mask_pair(rng, size, p=0.25):
    pred = (rng.random((size,) * 3) < p).astype(np.uint8)
    gt = (rng.random((size,) * 3) < p).astype(np.uint8)
    return pred, gt


class TestExactCases:
    def test_identical_nonempty_masks(self):
        rng = np.random.default_rng(0)
        mask = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
        mask[4, 4, 4] = 1
        rec = evaluate(_lab(mask), _lab(mask))
        cm = rec.per_class[1]
        assert cm.dice == 100.0
        assert cm.jaccard == 100.0
        assert cm.asd == 0.0
        assert cm.hd95 == 0.0

    def test_disjoint_singletons_offset_three(self):
        pred = np.zeros((9, 9, 9), dtype=np.uint8)
        gt = np.zeros((9, 9, 9), dtype=np.uint8)
        pred[4, 4, 1] = 1
        gt[4, 4, 4] = 1
        cm = evaluate(_lab(pred), _lab(gt)).per_class[1]
        assert cm.dice == 0.0
        assert cm.jaccard == 0.0
        assert cm.asd == 3.0
        assert cm.hd95 == 3.0
        assert cm.distances_defined

    def test_both_empty(self):
        empty = np.zeros((5, 5, 5), dtype=np.uint8)
        cm = evaluate(_lab(empty), _lab(empty)).per_class[1]
        assert cm.dice == 100.0
        assert cm.jaccard == 100.0
        assert cm.asd == 0.0 and cm.hd95 == 0.0
        assert cm.pred_empty and cm.gt_empty

    def test_one_empty_flags_undefined_distances(self):
        pred = np.zeros((5, 5, 5), dtype=np.uint8)
        gt = np.zeros((5, 5, 5), dtype=np.uint8)
        gt[2, 2, 2] = 1
        cm = evaluate(_lab(pred), _lab(gt)).per_class[1]
        assert cm.dice == 0.0 and cm.jaccard == 0.0
        assert math.isnan(cm.asd) and math.isnan(cm.hd95)
        assert not cm.distances_defined

    def test_undefined_distances_excluded_from_means(self):
        pred = np.zeros((6, 6, 6), dtype=np.uint8)
        gt = np.zeros((6, 6, 6), dtype=np.uint8)
        pred[1, 1, 1] = 1
        gt[1, 1, 1] = 1       # class 1 matches
        gt[4, 4, 4] = 2       # class 2 missing from pred
        rec = evaluate(_lab(pred, 3), _lab(gt, 3))
        assert rec.mean_asd == 0.0
        assert rec.mean_dice == pytest.approx(50.0)


class TestErrors:
    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dim mismatch"):
            evaluate(_lab(np.zeros((4, 4, 4), np.uint8)), _lab(np.zeros((5, 5, 5), np.uint8)))

    def test_class_count_mismatch(self):
        a = _lab(np.zeros((4, 4, 4), np.uint8), k=2)
        b = _lab(np.zeros((4, 4, 4), np.uint8), k=3)
        with pytest.raises(ValueError, match="class-count"):
            evaluate(a, b)


class TestSurfaceExtraction:
    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            mask = rng.random((7, 7, 7)) < 0.4
            ours = {tuple(c) for c in surface_voxels(mask)}
            ref = {tuple(int(v) for v in c) for c in surface_voxels_ref(mask)}
            assert ours == ref

    def test_border_voxels_are_surface(self):
        mask = np.ones((3, 3, 3), dtype=bool)
        surf = {tuple(c) for c in surface_voxels(mask)}
        assert (0, 0, 0) in surf
        assert (1, 1, 1) not in surf

    def test_singleton_is_surface(self):
        mask = np.zeros((5, 5, 5), dtype=bool)
        mask[2, 3, 1] = True
        assert [tuple(c) for c in surface_voxels(mask)] == [(2, 3, 1)]


class TestOracleEquivalence:
    def test_random_masks_match_bruteforce(self):
        rng = np.random.default_rng(2)
        checked = 0
        for trial in range(15):
            size = int(rng.integers(5, 13))
            pred, gt = _random_mask_pair(rng, size)
            cm = evaluate(_lab(pred), _lab(gt)).per_class[1]
            ref = surface_metrics_ref(pred, gt)
            assert cm.dice == pytest.approx(ref["dice"], abs=1e-12)
            assert cm.jaccard == pytest.approx(ref["jaccard"], abs=1e-12)
            if math.isnan(ref["asd"]):
                assert math.isnan(cm.asd)
                continue
            assert cm.asd == pytest.approx(ref["asd"], abs=1e-9)
            assert cm.hd95 == pytest.approx(ref["hd95"], abs=1e-9)
            checked += 1
        assert checked >= 10


class TestProperties:
    def test_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            pred, gt = _random_mask_pair(rng, 8)
            a = evaluate(_lab(pred), _lab(gt)).per_class[1]
            b = evaluate(_lab(gt), _lab(pred)).per_class[1]
            assert a.dice == b.dice
            assert a.jaccard == b.jaccard
            if a.distances_defined:
                assert a.asd == pytest.approx(b.asd, abs=1e-12)
                assert a.hd95 == pytest.approx(b.hd95, abs=1e-12)

    def test_jaccard_dice_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            pred, gt = _random_mask_pair(rng, 8)
            cm = evaluate(_lab(pred), _lab(gt)).per_class[1]
            d, j = cm.dice / 100.0, cm.jaccard / 100.0
            assert abs(j - d / (2.0 - d)) < 1e-9
            assert cm.jaccard <= cm.dice + 1e-12

    def test_adding_correct_voxel_never_decreases_dice(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            pred, gt = _random_mask_pair(rng, 7)
            gt[3, 3, 3] = 1
            missing = np.argwhere((gt == 1) & (pred == 0))
            if len(missing) == 0:
                continue
            before = evaluate(_lab(pred), _lab(gt)).per_class[1].dice
            i, j, k = missing[rng.integers(len(missing))]
            pred2 = pred.copy()
            pred2[i, j, k] = 1
            after = evaluate(_lab(pred2), _lab(gt)).per_class[1].dice
            assert after >= before
