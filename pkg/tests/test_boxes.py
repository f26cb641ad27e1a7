"""NMS, top-M retention and RoI pooling against brute-force oracles."""

import numpy as np
import pytest

from ipf.boxes import InstanceFeature, ScoredBox, iou, nms, padded_box, retain_top_m, roi_pool
from ipf.errors import ShapeError
from ipf.tensor import Tensor


def random_boxes(rng, n, frame=0):
    out = []
    for _ in range(n):
        x1, x2 = sorted(rng.uniform(0.0, 1.0, size=2))
        y1, y2 = sorted(rng.uniform(0.0, 1.0, size=2))
        out.append(ScoredBox(x1, y1, x2, y2, float(rng.uniform()), frame=frame))
    return out


def iou_oracle(a, b):
    """Interval-overlap re-implementation, independent of boxes.iou."""

    def overlap(lo1, hi1, lo2, hi2):
        return max(0.0, min(hi1, hi2) - max(lo1, lo2))

    inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2)
    area_a = (a.x2 - a.x1) * (a.y2 - a.y1)
    area_b = (b.x2 - b.x1) * (b.y2 - b.y1)
    union = area_a + area_b - inter
    return inter / union if union > 0.0 else 0.0


def nms_oracle(boxes, threshold):
    """O(n^2) greedy scan with explicit kept-flag bookkeeping."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept_idx = []
    for i in order:
        suppressed = False
        for j in kept_idx:
            if iou_oracle(boxes[i], boxes[j]) > threshold:
                suppressed = True
                break
        if not suppressed:
            kept_idx.append(i)
    return [boxes[i] for i in kept_idx]


def roi_oracle(arr, box):
    """Enumerate every grid cell; average those with centers in the box."""
    side = int(round(len(arr) ** 0.5))
    grid = np.asarray(arr).reshape(side, side, -1)
    hits = []
    for r in range(side):
        for c in range(side):
            cx, cy = (c + 0.5) / side, (r + 0.5) / side
            if box.x1 <= cx <= box.x2 and box.y1 <= cy <= box.y2:
                hits.append(grid[r, c])
    if not hits:
        col = min(side - 1, int((box.x1 + box.x2) / 2 * side))
        row = min(side - 1, int((box.y1 + box.y2) / 2 * side))
        return np.asarray(grid[row, col], dtype=float)
    return np.mean(hits, axis=0)


class TestScoredBox:
    def test_rejects_inverted_corners(self):
        with pytest.raises(ValueError):
            ScoredBox(0.7, 0.0, 0.3, 1.0, 0.5)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ScoredBox(0.0, 0.0, 1.5, 1.0, 0.5)

    def test_padded_must_be_zero(self):
        with pytest.raises(ValueError):
            ScoredBox(0.1, 0.0, 0.2, 0.1, 0.0, padded=True)
        assert padded_box(frame=3).frame == 3

    def test_degenerate_zero_area_is_legal(self):
        ScoredBox(0.5, 0.2, 0.5, 0.8, 0.9)


class TestIou:
    def test_identical(self):
        b = ScoredBox(0.1, 0.1, 0.6, 0.6, 0.9)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(ScoredBox(0.0, 0.0, 0.2, 0.2, 0.5), ScoredBox(0.5, 0.5, 0.9, 0.9, 0.5)) == 0.0

    def test_half_overlap(self):
        a = ScoredBox(0.0, 0.0, 1.0, 1.0, 0.5)
        b = ScoredBox(0.5, 0.0, 1.0, 1.0, 0.5)
        assert iou(a, b) == pytest.approx(0.5)

    def test_zero_union(self):
        a = ScoredBox(0.3, 0.3, 0.3, 0.3, 0.5)
        assert iou(a, a) == 0.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(12)
        boxes = random_boxes(rng, 40)
        for a in boxes[:20]:
            for b in boxes[20:]:
                assert iou(a, b) == pytest.approx(iou_oracle(a, b), abs=1e-15)


class TestNms:
    def test_single_box_kept(self):
        b = ScoredBox(0.1, 0.1, 0.5, 0.5, 0.7)
        assert nms([b], 0.5) == [b]

    def test_duplicate_keeps_higher_score(self):
        hi = ScoredBox(0.1, 0.1, 0.5, 0.5, 0.9)
        lo = ScoredBox(0.1, 0.1, 0.5, 0.5, 0.8)
        assert nms([lo, hi], 0.5) == [hi]

    def test_empty_input(self):
        assert nms([], 0.5) == []

    def test_tie_break_earlier_input_wins(self):
        a = ScoredBox(0.1, 0.1, 0.5, 0.5, 0.8)
        b = ScoredBox(0.12, 0.1, 0.52, 0.5, 0.8)
        assert nms([a, b], 0.3)[0] is a

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            boxes = random_boxes(rng, int(rng.integers(0, 51)))
            kept = nms(boxes, 0.5)
            assert kept == nms_oracle(boxes, 0.5)

    def test_kept_pairs_below_threshold(self):
        rng = np.random.default_rng(14)
        kept = nms(random_boxes(rng, 60), 0.4)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                assert iou(a, b) <= 0.4

    def test_idempotent(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            boxes = random_boxes(rng, 30)
            once = nms(boxes, 0.5)
            assert nms(once, 0.5) == once

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            nms([], 0.0)


class TestRetainTopM:
    def test_pads_when_short(self):
        rng = np.random.default_rng(16)
        out = retain_top_m(random_boxes(rng, 3, frame=2), 5)
        assert len(out) == 5
        assert [b.padded for b in out] == [False, False, False, True, True]
        assert all(b.frame == 2 for b in out)

    def test_truncates_excess(self):
        rng = np.random.default_rng(17)
        boxes = random_boxes(rng, 12)
        out = retain_top_m(boxes, 5)
        top_scores = sorted((b.score for b in boxes), reverse=True)[:5]
        assert [b.score for b in out] == top_scores

    def test_empty_input_all_padded(self):
        out = retain_top_m([], 5, frame=4)
        assert len(out) == 5
        assert all(b.padded and b.frame == 4 for b in out)

    def test_exact_count_invariant(self):
        rng = np.random.default_rng(18)
        for n in (0, 1, 4, 9, 20):
            out = retain_top_m(random_boxes(rng, n), 9)
            assert len(out) == 9
            assert sum(b.padded for b in out) == max(0, 9 - n)

    def test_m_must_be_positive(self):
        with pytest.raises(ValueError):
            retain_top_m([], 0)


class TestRoiPool:
    def test_constant_map(self):
        arr = np.full((256, 8), 3.25)
        feat = roi_pool(Tensor(arr), ScoredBox(0.2, 0.3, 0.7, 0.9, 0.5))
        np.testing.assert_array_equal(feat.vector, np.full(8, 3.25))
        assert feat.valid

    def test_full_frame_equals_global_mean(self):
        rng = np.random.default_rng(19)
        arr = rng.normal(size=(256, 16))
        feat = roi_pool(arr, ScoredBox(0.0, 0.0, 1.0, 1.0, 0.5))
        np.testing.assert_allclose(feat.vector, arr.mean(axis=0), atol=1e-12)

    def test_matches_cell_enumeration_oracle(self):
        rng = np.random.default_rng(20)
        for _ in range(50):
            arr = rng.normal(size=(256, 6))
            box = random_boxes(rng, 1)[0]
            got = roi_pool(arr, box).vector
            assert np.abs(got - roi_oracle(arr, box)).max() < 1e-12

    def test_padded_box_zero_invalid(self):
        feat = roi_pool(np.ones((256, 4)), padded_box(frame=1))
        assert not feat.valid
        np.testing.assert_array_equal(feat.vector, np.zeros(4))

    def test_tiny_box_center_cell_fallback(self):
        rng = np.random.default_rng(21)
        arr = rng.normal(size=(256, 3))
        box = ScoredBox(0.5, 0.5, 0.5, 0.5, 0.9)  # zero-area, between cell centers
        got = roi_pool(arr, box).vector
        np.testing.assert_allclose(got, roi_oracle(arr, box), atol=0)

    def test_output_within_cell_hull(self):
        rng = np.random.default_rng(22)
        arr = rng.normal(size=(256, 5))
        for box in random_boxes(rng, 30):
            got = roi_pool(arr, box).vector
            assert np.all(got >= arr.min(axis=0) - 1e-12)
            assert np.all(got <= arr.max(axis=0) + 1e-12)

    def test_malformed_features_rejected(self):
        with pytest.raises(ShapeError):
            roi_pool(np.zeros((250, 4)), ScoredBox(0.0, 0.0, 1.0, 1.0, 0.5))
        with pytest.raises(ShapeError):
            roi_pool(np.zeros((2, 3, 4)), ScoredBox(0.0, 0.0, 1.0, 1.0, 0.5))
