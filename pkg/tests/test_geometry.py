import numpy as np
import pytest

from mil_action.errors import GeometryError, NoTemporalOverlapError
from mil_action.geometry import (
    BoundingBox,
    Tube,
    interpolate_box,
    iou,
    mean_box,
    pairwise_iou,
    tube_from_tubelets,
    tube_iou,
    tubelet_spatial_overlap,
    tubelet_st_iou,
)


def test_iou_identical_boxes(make_box):
    box = make_box(5, 5)
    assert iou(box, box) == 1.0


def test_iou_disjoint_and_touching_boxes():
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, BoundingBox(20, 20, 30, 30)) == 0.0
    assert iou(a, BoundingBox(10, 0, 20, 10)) == 0.0


def test_iou_half_shifted_box():
    a = BoundingBox(0, 0, 10, 10)
    b = BoundingBox(5, 0, 15, 10)
    assert iou(a, b) == pytest.approx(50 / 150)


def test_iou_is_symmetric_and_bounded(rng):
    for _ in range(200):
        x, y = rng.uniform(0, 50, size=2)
        w, h = rng.uniform(1, 30, size=2)
        a = BoundingBox(x, y, x + w, y + h)
        x, y = rng.uniform(0, 50, size=2)
        w, h = rng.uniform(1, 30, size=2)
        b = BoundingBox(x, y, x + w, y + h)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0


def test_iou_translation_invariant(make_box):
    a, b = make_box(0, 0), make_box(3, 4)
    assert iou(a.translate(7.0, -2.0), b.translate(7.0, -2.0)) == pytest.approx(iou(a, b))


@pytest.mark.parametrize("coords", [
    (0, 0, 0, 10),
    (5, 5, 4, 10),
    (0, 0, float("nan"), 1),
    (0, 0, float("inf"), 1),
])
def test_degenerate_boxes_rejected(coords):
    with pytest.raises(GeometryError):
        BoundingBox(*coords)


def test_box_score_must_be_probability():
    with pytest.raises(GeometryError):
        BoundingBox(0, 0, 1, 1, score=1.5)


def test_pairwise_iou_shape(make_box):
    m = pairwise_iou([make_box(0, 0), make_box(50, 50)], [make_box(0, 0)])
    assert m.shape == (2, 1)
    np.testing.assert_allclose(m[:, 0], [1.0, 0.0])
    assert pairwise_iou([], [make_box(0, 0)]).shape == (0, 1)
    assert pairwise_iou([make_box(0, 0)], []).shape == (1, 0)


def test_pairwise_iou_matches_scalar_iou(rng):
    def random_boxes(n):
        out = []
        for _ in range(n):
            x, y = rng.uniform(0, 40, size=2)
            w, h = rng.uniform(1, 30, size=2)
            out.append(BoundingBox(x, y, x + w, y + h))
        return out

    for _ in range(100):
        boxes_a = random_boxes(int(rng.integers(1, 7)))
        boxes_b = random_boxes(int(rng.integers(1, 7)))
        boxes_b.append(boxes_a[0].translate(boxes_a[0].width, 0.0))
        m = pairwise_iou(boxes_a, boxes_b)
        expected = [[iou(a, b) for b in boxes_b] for a in boxes_a]
        np.testing.assert_array_equal(m, expected)


def test_interpolate_and_mean_box():
    a = BoundingBox(0, 0, 10, 10, 0.2)
    b = BoundingBox(10, 0, 20, 10, 0.4)
    mid = interpolate_box(a, b, 0.5)
    assert mid.coords() == (5.0, 0.0, 15.0, 10.0)
    assert mid.score == pytest.approx(0.3)
    assert mean_box([a, b]).coords() == mid.coords()
    with pytest.raises(GeometryError):
        mean_box([])


def test_tubelet_frames(make_tubelet):
    t = make_tubelet(10, 0, 0, K=16)
    assert t.end_frame == 25
    assert t.center_frame == 18
    assert t.covers(10) and t.covers(25) and not t.covers(26)
    with pytest.raises(GeometryError):
        t.box_at(9)


def test_tubelet_spatial_overlap_identical(make_tubelet):
    a = make_tubelet(0, 0, 0, K=8, tubelet_id=1)
    b = make_tubelet(4, 0, 0, K=8, tubelet_id=2)
    assert tubelet_spatial_overlap(a, b) == pytest.approx(1.0)


def test_tubelet_spatial_overlap_without_shared_frames(make_tubelet):
    a = make_tubelet(0, 0, 0, K=4)
    b = make_tubelet(4, 0, 0, K=4)
    with pytest.raises(NoTemporalOverlapError):
        tubelet_spatial_overlap(a, b)
    assert tubelet_st_iou(a, b) == 0.0


def test_tubelet_st_iou_half_temporal_overlap(make_tubelet):
    a = make_tubelet(0, 0, 0, K=8)
    b = make_tubelet(4, 0, 0, K=8)
    # 4 shared frames out of 12
    assert tubelet_st_iou(a, b) == pytest.approx(4 / 12)


def test_tube_iou_identical_and_disjoint(make_box):
    boxes = [make_box(0, 0)] * 10
    a = Tube.from_boxes(0, boxes, 0, 1.0, "v")
    assert tube_iou(a, a) == pytest.approx(1.0)
    later = Tube.from_boxes(20, boxes, 0, 1.0, "v")
    assert tube_iou(a, later) == 0.0


def test_tube_iou_temporal_half(make_box):
    gt = Tube.from_boxes(0, [make_box(0, 0)] * 20, 0, 1.0, "v")
    half = Tube.from_boxes(0, [make_box(0, 0)] * 10, 0, 1.0, "v")
    assert tube_iou(gt, half) == pytest.approx(0.5)


def test_tube_requires_contiguous_frames(make_box):
    with pytest.raises(GeometryError):
        Tube(((0, make_box(0, 0)), (2, make_box(0, 0))), 0, 1.0)
    with pytest.raises(GeometryError):
        Tube((), 0, 1.0)


def test_tube_from_tubelets_fills_gap(make_tubelet):
    a = make_tubelet(0, 0, 0, K=4, tubelet_id=1)
    b = make_tubelet(8, 8, 0, K=4, tubelet_id=2)
    tube = tube_from_tubelets([a, b], label=2, scores=[0.4, 0.8], video_id="v")
    assert (tube.start_frame, tube.end_frame) == (0, 11)
    assert len(tube) == 12
    assert tube.score == pytest.approx(0.6)
    assert tube.member_ids == (1, 2)
    # frame 5 sits 2/5 of the way from frame 3 (x=0) to frame 8 (x=8)
    assert tube.box_at(5).x_min == pytest.approx(3.2)


def test_tube_from_tubelets_averages_overlap(make_tubelet):
    a = make_tubelet(0, 0, 0, K=4, tubelet_id=1)
    b = make_tubelet(2, 2, 0, K=4, tubelet_id=2)
    tube = tube_from_tubelets([a, b], 0, [1.0, 1.0])
    assert tube.box_at(2).x_min == pytest.approx(1.0)
    assert tube.video_id == "clip_0000"
