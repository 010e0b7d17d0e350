import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from picodet import kernels
from picodet.assignment import (AssignerConfig, AssignmentResult, CostMatrix, SENTINEL, assign, atss_assign,
                                atss_threshold, center_prior_candidates, dynamic_k, simota_assign, simota_cost)
from picodet.geometry import AnchorPoint, Box, LabeledBox, box_giou_matrix, box_iou_matrix
from picodet.losses import varifocal_loss

from helpers import oracle_simota, random_simota_instance


class TestCenterPrior:
    def test_at_center(self):
        m = center_prior_candidates([AnchorPoint(50, 50, 8, 0)], [LabeledBox(Box(40, 40, 60, 60), 0)])
        assert m[0, 0]

    def test_inside_huge_box_far_from_center(self):
        m = center_prior_candidates([AnchorPoint(4, 4, 8, 0)], [LabeledBox(Box(0, 0, 200, 200), 0)])
        assert m[0, 0]

    def test_outside_radius(self):
        # 3 strides from a tiny GT's center, outside the box
        m = center_prior_candidates([AnchorPoint(124, 100, 8, 0)], [LabeledBox(Box(99, 99, 101, 101), 0)])
        assert not m[0, 0]

    def test_inside_radius(self):
        m = center_prior_candidates([AnchorPoint(116, 100, 8, 0)], [LabeledBox(Box(99, 99, 101, 101), 0)])
        assert m[0, 0]

    def test_no_gts(self):
        assert center_prior_candidates([AnchorPoint(4, 4, 8, 0)], []).shape == (1, 0)


class TestDynamicK:
    def test_floor_clamp(self):
        assert dynamic_k([0.01] * 5) == 1

    def test_sum(self):
        assert dynamic_k([0.9, 0.9, 0.9, 0.8]) == 3

    def test_small_sum(self):
        assert dynamic_k([0.6, 0.5, 0.3]) == 1

    def test_top_n_limits(self):
        assert dynamic_k([1.0] * 20, AssignerConfig(top_n=10)) == 10

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
    def test_bounds(self, ious):
        k = dynamic_k(ious)
        assert 1 <= k <= len(ious)


class TestCost:
    def test_perfect_prediction_is_zero(self):
        box = np.array([[0.0, 0.0, 16.0, 16.0]])
        scores = np.array([[0.0, 1.0]])
        c = simota_cost(scores, box, (box, np.array([1])), np.array([[True]]))
        assert c.cost[0, 0] == pytest.approx(0.0, abs=1e-6)

    def test_composition(self):
        # pred and GT chosen so that IoU = 0.5 and GIoU = 0.5
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        pred = np.array([[0.0, 0.0, 10.0, 5.0]])
        assert box_iou_matrix(pred, gt)[0, 0] == pytest.approx(0.5)
        assert box_giou_matrix(pred, gt)[0, 0] == pytest.approx(0.5)
        c = simota_cost(np.array([[0.5]]), pred, (gt, np.array([0])), np.array([[True]]), AssignerConfig(cost_lambda=6))
        assert c.cost[0, 0] == pytest.approx(float(varifocal_loss(0.5, 0.5)) + 6 * 0.5, abs=1e-9)

    def test_class_vector_includes_other_classes(self, rng):
        scores = rng.uniform(0.05, 0.95, size=(3, 4))
        pred = np.array([[0, 0, 10, 10], [2, 2, 12, 12], [5, 5, 9, 9]], dtype=float)
        gt = np.array([[1.0, 1.0, 11.0, 11.0]])
        c = simota_cost(scores, pred, (gt, np.array([2])), np.ones((3, 1), bool))
        ious = box_iou_matrix(pred, gt)[:, 0]
        target = np.zeros_like(scores)
        target[:, 2] = ious
        expect = varifocal_loss(scores, target).sum(1).numpy() + 6 * (1 - box_giou_matrix(pred, gt)[:, 0])
        assert np.allclose(c.cost[:, 0], expect)

    def test_original_mode(self):
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        pred = np.array([[0.0, 0.0, 10.0, 5.0]])
        scores = np.array([[0.3, 0.6]])
        c = simota_cost(scores, pred, (gt, np.array([1])), np.array([[True]]), AssignerConfig(mode="simota_original"))
        bce = -np.log(1 - 0.3) - np.log(0.6)
        assert c.cost[0, 0] == pytest.approx(bce + 6 * 0.5)

    def test_sentinel(self):
        gt = np.array([[0.0, 0.0, 10.0, 10.0], [50, 50, 60, 60]])
        c = simota_cost(np.array([[0.5]]), np.array([[0, 0, 5, 5.0]]), (gt, np.array([0, 0])), np.array([[True, False]]))
        assert c.cost[0, 1] == SENTINEL
        assert isinstance(c, CostMatrix)
        assert c.dense(3)[1, 0] == SENTINEL


class TestSimotaSelect:
    def test_top_k(self):
        cost = np.array([[0.2], [0.5], [0.9]])
        m = kernels.simota_select(cost, np.ones((3, 1), np.uint8), np.array([2]))
        assert list(m) == [0, 0, -1]

    def test_conflict_goes_to_cheaper_gt(self):
        cost = np.array([[0.2, 0.3], [5.0, 0.4]])
        m = kernels.simota_select(cost, np.ones((2, 2), np.uint8), np.array([1, 2]))
        assert list(m) == [0, 1]

    def test_no_gts(self):
        res = simota_assign(np.full((4, 2), 0.5), np.zeros((4, 4)), (np.zeros((4, 2)) + 4, np.full(4, 8.0)),
                            (np.zeros((0, 4)), np.zeros(0, int)))
        assert res.num_positive == 0


@pytest.mark.parametrize("mode", ["simota_modified", "simota_original"])
def test_oracle_equivalence(mode):
    rng = np.random.default_rng(3)
    cfg = AssignerConfig(mode=mode)
    for _ in range(300):
        scores, pboxes, centers, strides, gboxes, glabels = random_simota_instance(rng)
        res = simota_assign(scores, pboxes, (centers, strides), (gboxes, glabels), cfg)
        if len(gboxes) == 0:
            assert res.num_positive == 0
            continue
        cand = center_prior_candidates((centers, strides), (gboxes, glabels), cfg)
        cost = simota_cost(scores, pboxes, (gboxes, glabels), cand, cfg).dense(len(centers))
        expect = oracle_simota(cost, cand, box_iou_matrix(pboxes, gboxes), cfg.top_n)
        assert np.array_equal(res.matched_gt, expect)
        res.check()
        pos = res.positive
        assert np.all(cand[pos, res.matched_gt[pos]])


def test_assignment_is_deterministic():
    rng = np.random.default_rng(9)
    inst = random_simota_instance(rng)
    a = simota_assign(inst[0], inst[1], (inst[2], inst[3]), (inst[4], inst[5]))
    b = simota_assign(inst[0], inst[1], (inst[2], inst[3]), (inst[4], inst[5]))
    assert np.array_equal(a.matched_gt, b.matched_gt)


def test_quality_is_pred_iou():
    centers = np.array([[8.0, 8.0], [24.0, 8.0]])
    strides = np.array([16.0, 16.0])
    gt = np.array([[0.0, 0.0, 32.0, 16.0]])
    pred = np.array([[0.0, 0.0, 16.0, 16.0], [16.0, 0.0, 32.0, 16.0]])
    res = simota_assign(np.array([[0.9], [0.9]]), pred, (centers, strides), (gt, np.array([0])))
    assert res.num_positive == 1  # sum of IoUs = 1.0 -> k = 1
    assert res.quality[res.positive][0] == pytest.approx(0.5)
    assert np.allclose(res.distance_target[0], [0.5, 0.5, 1.5, 0.5])


class TestAtss:
    def test_threshold(self):
        assert atss_threshold([0.1, 0.2, 0.3, 0.6]) == pytest.approx(0.4871, abs=1e-4)

    def test_single_candidate(self):
        assert atss_threshold([0.42]) == pytest.approx(0.42)

    def test_only_high_iou_positive(self):
        centers = np.array([[50.0, 50.0], [20.0, 20.0], [90.0, 90.0], [8.0, 90.0]])
        res = atss_assign((centers, np.full(4, 8.0)), np.zeros(4, int),
                          (np.array([[30.0, 30.0, 70.0, 70.0]]), np.array([1])))
        assert list(res.matched_gt) == [0, -1, -1, -1]
        assert res.class_target[0] == 1

    def test_tiny_gt_without_inside_centers(self):
        centers = np.array([[4.0, 4.0], [12.0, 4.0]])
        res = atss_assign((centers, np.full(2, 8.0)), np.zeros(2, int),
                          (np.array([[6.0, 6.0, 7.0, 7.0]]), np.array([0])))
        assert res.num_positive == 0

    def test_partition(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            scores, pboxes, centers, strides, gboxes, glabels = random_simota_instance(rng)
            levels = np.log2(strides).astype(int) - 3
            res = atss_assign((centers, strides), levels, (gboxes, glabels), AssignerConfig(mode="atss"), pboxes)
            res.check()


def test_dispatch_modes():
    rng = np.random.default_rng(2)
    scores, pboxes, centers, strides, gboxes, glabels = random_simota_instance(rng, 40, 3)
    levels = np.log2(strides).astype(int) - 3
    for mode in ("atss", "simota_original", "simota_modified"):
        res = assign(AssignerConfig(mode=mode), scores, pboxes, centers, strides, levels, gboxes, glabels)
        assert isinstance(res, AssignmentResult)
        res.check()


def test_bad_config():
    with pytest.raises(ValueError):
        AssignerConfig(top_n=0)
    with pytest.raises(ValueError):
        AssignerConfig(mode="hungarian")
