import numpy as np
import pytest

from scamnet.geometry import (IGNORE, NEGATIVE, POSITIVE, AnchorLevelConfig,
                              Box, decode_box_delta, encode_box_delta,
                              expand_patch, generate_anchors, iou,
                              match_anchors, nms)


def random_box(rng, span=64.0):
    return Box(cx=rng.uniform(5, span - 5), cy=rng.uniform(5, span - 5),
               w=rng.uniform(1, 20), h=rng.uniform(1, 20))


class TestIou:
    def test_identity(self):
        b = Box(10, 10, 4, 6)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(5, 5, 2, 2), Box(50, 50, 2, 2)) == 0.0

    def test_quarter_overlap(self):
        a = Box(1, 1, 2, 2)
        b = Box(2, 2, 2, 2)
        assert iou(a, b) == pytest.approx(1 / 7, abs=1e-12)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            a, b = random_box(rng), random_box(rng)
            v = iou(a, b)
            assert v == iou(b, a)
            assert 0.0 <= v <= 1.0


class TestBoxInvariants:
    def test_non_positive_sides_rejected(self):
        with pytest.raises(ValueError):
            Box(1, 1, 0, 2)
        with pytest.raises(ValueError):
            Box(1, 1, 2, -1)

    def test_clip_keeps_extent_inside(self):
        b = Box(2, 2, 10, 10).clip(32, 32)
        x0, y0, x1, y1 = b.extent()
        assert x0 >= 0 and y0 >= 0 and x1 <= 32 and y1 <= 32


class TestAnchors:
    def test_count_for_two_levels(self):
        levels = [AnchorLevelConfig(stride=8, sizes=(12.0,), ratios=(1.0, 0.5, 2.0)),
                  AnchorLevelConfig(stride=16, sizes=(24.0,), ratios=(1.0, 0.5, 2.0))]
        grid = generate_anchors(64, levels)
        assert len(grid) == 8 * 8 * 3 + 4 * 4 * 3 == 240

    def test_single_centered_anchor(self):
        grid = generate_anchors(64, [AnchorLevelConfig(stride=64, sizes=(20.0,), ratios=(1.0,))])
        assert len(grid) == 1
        assert (grid.boxes[0].cx, grid.boxes[0].cy) == (32.0, 32.0)

    def test_doubling_ratios_doubles_count(self):
        one = generate_anchors(64, [AnchorLevelConfig(stride=8, sizes=(12.0,), ratios=(1.0,))])
        two = generate_anchors(64, [AnchorLevelConfig(stride=8, sizes=(12.0,), ratios=(1.0, 2.0))])
        assert len(two) == 2 * len(one)

    def test_centers_inside_image(self):
        levels = [AnchorLevelConfig(stride=8, sizes=(12.0, 24.0), ratios=(1.0, 0.5))]
        for b in generate_anchors(64, levels).boxes:
            assert 0 < b.cx < 64 and 0 < b.cy < 64

    def test_empty_config_rejected(self):
        with pytest.raises(ValueError):
            generate_anchors(64, [])

    def test_stride_must_divide(self):
        with pytest.raises(ValueError):
            generate_anchors(60, [AnchorLevelConfig(stride=8, sizes=(12.0,), ratios=(1.0,))])


class TestDeltaCoding:
    def test_identity(self):
        b = Box(10, 10, 8, 8)
        d = encode_box_delta(b, b)
        assert (d.dx, d.dy, d.dw, d.dh) == (0.0, 0.0, 0.0, 0.0)

    def test_pure_shift(self):
        d = encode_box_delta(Box(10, 10, 10, 10), Box(15, 10, 10, 10))
        assert d.dx == pytest.approx(0.5, abs=1e-12)
        assert (d.dy, d.dw, d.dh) == (0.0, 0.0, 0.0)

    def test_round_trip_10000_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            anchor, gt = random_box(rng), random_box(rng)
            back = decode_box_delta(anchor, encode_box_delta(anchor, gt))
            for got, want in zip((back.cx, back.cy, back.w, back.h),
                                 (gt.cx, gt.cy, gt.w, gt.h)):
                assert got == pytest.approx(want, abs=1e-9)


class TestMatching:
    def test_exact_match_positive(self):
        gt = [Box(20, 20, 10, 10)]
        labels, best = match_anchors([Box(20, 20, 10, 10)], gt)
        assert labels[0] == POSITIVE and best[0] == 0

    def test_disjoint_negative(self):
        # second anchor owns the gt, so the far one is a plain negative
        labels, _ = match_anchors([Box(5, 5, 4, 4), Box(50, 50, 8, 8)],
                                  [Box(50, 50, 8, 8)])
        assert labels[0] == NEGATIVE

    def test_intermediate_iou_ignored(self):
        # two anchors on one gt: keep one clearly best so forcing skips the other
        gt = [Box(20, 20, 10, 10)]
        anchors = [Box(20, 20, 10, 10), Box(24, 20, 10, 10)]
        mid = iou(anchors[1], gt[0])
        assert 0.3 < mid < 0.5
        labels, _ = match_anchors(anchors, gt, pos_iou=0.5, neg_iou=0.3)
        assert labels[1] == IGNORE

    def test_best_anchor_forced_positive(self):
        # no anchor reaches pos_iou, but the best one is still claimed
        labels, best = match_anchors([Box(18, 20, 10, 10), Box(5, 5, 4, 4)],
                                     [Box(24, 20, 10, 10)])
        assert labels[0] == POSITIVE and best[0] == 0

    def test_empty_gt_all_negative(self):
        labels, _ = match_anchors([Box(5, 5, 4, 4)], [])
        assert (labels == NEGATIVE).all()

    def test_threshold_order_enforced(self):
        with pytest.raises(ValueError):
            match_anchors([Box(5, 5, 4, 4)], [], pos_iou=0.3, neg_iou=0.5)


class TestNms:
    def test_single_box_kept(self):
        assert nms([Box(5, 5, 4, 4)], [0.7], 0.5, 10) == [0]

    def test_duplicate_suppressed(self):
        kept = nms([Box(5, 5, 4, 4), Box(5, 5, 4, 4)], [0.9, 0.8], 0.5, 10)
        assert kept == [0]

    def test_disjoint_both_kept(self):
        kept = nms([Box(5, 5, 4, 4), Box(50, 50, 4, 4)], [0.4, 0.8], 0.5, 10)
        assert sorted(kept) == [0, 1]

    def test_score_tie_keeps_lower_index(self):
        kept = nms([Box(5, 5, 4, 4), Box(5, 5, 4, 4)], [0.5, 0.5], 0.5, 10)
        assert kept == [0]

    def test_kept_properties_random(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            boxes = [random_box(rng) for _ in range(12)]
            scores = rng.random(12)
            kept = nms(boxes, scores, 0.4, 6)
            assert len(kept) <= 6
            kept_scores = [scores[i] for i in kept]
            assert kept_scores == sorted(kept_scores, reverse=True)
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    assert iou(boxes[a], boxes[b]) <= 0.4


class TestExpansion:
    def test_interior_doubling(self):
        e = expand_patch(Box(10, 10, 4, 4), 2.0, 32, 32)
        assert (e.cx, e.cy, e.w, e.h) == (10, 10, 8, 8)

    def test_factor_one_is_identity(self):
        b = Box(10, 12, 6, 4)
        e = expand_patch(b, 1.0, 32, 32)
        assert (e.cx, e.cy, e.w, e.h) == (b.cx, b.cy, b.w, b.h)

    def test_clipped_at_corner(self):
        e = expand_patch(Box(2, 2, 4, 4), 2.0, 32, 32)
        assert (e.cx, e.cy, e.w, e.h) == (3.0, 3.0, 6.0, 6.0)

    def test_factor_below_one_rejected(self):
        with pytest.raises(ValueError):
            expand_patch(Box(10, 10, 4, 4), 0.9, 32, 32)

    def test_containment_and_monotonicity(self):
        rng = np.random.default_rng(3)
        for _ in range(2000):
            b = random_box(rng, span=64)
            f1, f2 = sorted(rng.uniform(1.0, 4.0, size=2))
            e1 = expand_patch(b, f1, 64, 64)
            e2 = expand_patch(b, f2, 64, 64)
            bx = b.clip(64, 64).extent()
            x1, y1, x2, y2 = e1.extent()
            assert x1 <= bx[0] + 1e-12 and y1 <= bx[1] + 1e-12
            assert x2 >= bx[2] - 1e-12 and y2 >= bx[3] - 1e-12
            X1, Y1, X2, Y2 = e2.extent()
            assert X1 <= x1 + 1e-12 and Y1 <= y1 + 1e-12
            assert X2 >= x2 - 1e-12 and Y2 >= y2 - 1e-12
