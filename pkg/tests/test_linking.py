import numpy as np
import pytest

from mil_action.errors import ConfigError, GeometryError
from mil_action.linking import (
    LinkConfig,
    ScoredTubelet,
    link,
    link_all,
    link_with_diagnostics,
    read_tubes,
    score_tubelets,
    tubes_from_predictions,
    write_tubes,
)
from mil_action.model import ModelParams


@pytest.fixture
def scored(make_tubelet):
    def _scored(start, x, y=0.0, tubelet_id=0, actor_id=-1, scores=(0.9,), clip_id="clip_0000", **kw):
        t = make_tubelet(start, x, y, tubelet_id=tubelet_id, actor_id=actor_id, clip_id=clip_id, **kw)
        return ScoredTubelet(t, np.array(scores, dtype=np.float64))
    return _scored


def _memberships(tubes):
    return [tube.member_ids for tube in tubes]


def test_single_chain(scored):
    chain = [scored(4 * i, 0.0, tubelet_id=i, actor_id=0) for i in range(4)]
    tubes = link(chain, 0, LinkConfig())
    assert len(tubes) == 1
    tube = tubes[0]
    assert (tube.start_frame, tube.end_frame) == (0, 15)
    assert tube.member_ids == (0, 1, 2, 3)
    assert tube.score == pytest.approx(0.9)
    assert tube.label == 0 and tube.video_id == "clip_0000"


def test_disjoint_tracks_follow_people(scored):
    tubelets = []
    for i in range(5):
        tubelets.append(scored(4 * i, 0.0, tubelet_id=10 + i, actor_id=0, scores=(0.8,)))
        tubelets.append(scored(4 * i, 100.0, tubelet_id=20 + i, actor_id=1, scores=(0.6,)))
    tubes, swaps = link_with_diagnostics(tubelets, 0, LinkConfig())
    assert swaps == []
    assert sorted(_memberships(tubes)) == [(10, 11, 12, 13, 14), (20, 21, 22, 23, 24)]


def test_crossing_people_report_identity_swap(scored):
    tubelets = [
        scored(0, 0.0, tubelet_id=1, actor_id=0),
        scored(0, 40.0, tubelet_id=2, actor_id=1),
        # after the crossing each person stands where the other one was
        scored(4, 2.0, tubelet_id=3, actor_id=1),
        scored(4, 38.0, tubelet_id=4, actor_id=0),
    ]
    tubes, swaps = link_with_diagnostics(tubelets, 0, LinkConfig())
    assert _memberships(tubes) == [(1, 3), (2, 4)]
    assert {(s.from_actor, s.to_actor, s.frame) for s in swaps} == {(0, 1, 4), (1, 0, 4)}

    again = link_with_diagnostics(list(reversed(tubelets)), 0, LinkConfig())
    assert _memberships(again[0]) == _memberships(tubes)
    assert again[1] == swaps


def test_empty_input():
    assert link([], 0, LinkConfig()) == []
    tubes, swaps = link_all([], 3, LinkConfig())
    assert tubes == {0: [], 1: [], 2: []}
    assert swaps == []


def test_equal_overlap_goes_to_higher_scoring_tail(scored):
    tubelets = [
        scored(0, 0.0, tubelet_id=1, scores=(0.3,)),
        scored(0, 4.0, tubelet_id=2, scores=(0.9,)),
        # overlaps both heads equally; only one tube can take it
        scored(4, 2.0, tubelet_id=3, scores=(0.5,)),
    ]
    tubes = link(tubelets, 0, LinkConfig(link_iou_threshold=0.3))
    assert (2, 3) in _memberships(tubes)
    assert (1,) in _memberships(tubes)


def test_closest_candidate_is_claimed_before_score(scored):
    tubelets = [
        scored(0, 0.0, tubelet_id=1, scores=(0.3,)),
        scored(0, 6.0, tubelet_id=2, scores=(0.9,)),
        scored(4, 1.0, tubelet_id=3, scores=(0.5,)),
    ]
    tubes = link(tubelets, 0, LinkConfig(link_iou_threshold=0.2))
    assert _memberships(tubes) == [(1, 3), (2,)]


def _links(tubes):
    return sum(len(t.member_ids) - 1 for t in tubes)


def test_lower_threshold_never_loses_links(scored):
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        tubelets = []
        for step in range(int(rng.integers(2, 5))):
            for _ in range(int(rng.integers(1, 5))):
                tubelets.append(scored(4 * step, float(rng.integers(0, 16)), float(rng.integers(0, 8)),
                                       tubelet_id=len(tubelets), scores=(float(rng.uniform()),),
                                       dx=float(rng.integers(-2, 3))))
        for max_gap in (0, 1):
            strict = link(tubelets, 0, LinkConfig(link_iou_threshold=0.5, max_gap=max_gap))
            loose = link(tubelets, 0, LinkConfig(link_iou_threshold=0.2, max_gap=max_gap))
            assert _links(loose) >= _links(strict)


@pytest.mark.parametrize("max_gap, expected", [(0, [(1,), (2,)]), (1, [(1, 2)])])
def test_gap_tolerance(scored, max_gap, expected):
    tubelets = [scored(0, 0.0, tubelet_id=1), scored(8, 0.0, tubelet_id=2)]
    tubes = link(tubelets, 0, LinkConfig(max_gap=max_gap))
    assert _memberships(tubes) == expected
    if max_gap == 1:
        # missing frames 4..7 are filled in
        assert len(tubes[0]) == 12


def test_min_class_score_filters_tubelets(scored):
    tubelets = [scored(0, 0.0, tubelet_id=1, scores=(0.2,)),
                scored(4, 0.0, tubelet_id=2, scores=(0.7,))]
    tubes = link(tubelets, 0, LinkConfig(min_class_score=0.5))
    assert _memberships(tubes) == [(2,)]


def test_videos_are_linked_separately(scored):
    tubelets = [scored(0, 0.0, tubelet_id=1, clip_id="clip_0000"),
                scored(4, 0.0, tubelet_id=2, clip_id="clip_0001")]
    tubes = link(tubelets, 0, LinkConfig())
    assert [(t.video_id, t.member_ids) for t in tubes] == [("clip_0000", (1,)), ("clip_0001", (2,))]


def _random_scene(rng, scored, n_people=4, steps=6):
    tubelets = []
    next_id = 0
    for p in range(n_people):
        x = float(rng.uniform(0, 300))
        for s in range(steps):
            if rng.random() < 0.2:
                continue
            x += float(rng.normal(0, 2))
            tubelets.append(scored(4 * s, x, tubelet_id=next_id, actor_id=p,
                                   scores=rng.uniform(size=2)))
            next_id += 1
    return tubelets


def test_permutation_invariance(rng, scored):
    for _ in range(20):
        tubelets = _random_scene(rng, scored)
        shuffled = [tubelets[i] for i in rng.permutation(len(tubelets))]
        a, swaps_a = link_all(tubelets, 2, LinkConfig())
        b, swaps_b = link_all(shuffled, 2, LinkConfig())
        for c in range(2):
            assert _memberships(a[c]) == _memberships(b[c])
            assert [t.score for t in a[c]] == [t.score for t in b[c]]
        assert swaps_a == swaps_b


def test_every_tubelet_in_exactly_one_tube(rng, scored):
    for min_score in (0.0, 0.4):
        tubelets = _random_scene(rng, scored)
        tubes, _ = link_all(tubelets, 2, LinkConfig(min_class_score=min_score))
        for c in range(2):
            members = [m for t in tubes[c] for m in t.member_ids]
            expected = [st.tubelet.tubelet_id for st in tubelets if st.class_scores[c] >= min_score]
            assert sorted(members) == sorted(expected)


def test_class_agnostic_linking_shares_memberships(rng, scored):
    tubelets = _random_scene(rng, scored)
    tubes, _ = link_all(tubelets, 2, LinkConfig(per_class=False))
    assert _memberships(tubes[0]) == _memberships(tubes[1])
    by_id = {st.tubelet.tubelet_id: st for st in tubelets}
    for c in range(2):
        for tube in tubes[c]:
            assert tube.label == c
            expected = np.mean([by_id[i].class_scores[c] for i in tube.member_ids])
            assert tube.score == pytest.approx(expected)


def test_validation(make_tubelet):
    with pytest.raises(GeometryError):
        ScoredTubelet(make_tubelet(0, 0, 0), np.array([1.5]))
    with pytest.raises(ConfigError):
        LinkConfig(max_gap=-1)
    with pytest.raises(ConfigError):
        LinkConfig(link_iou_threshold=1.5)


def test_score_and_link_from_model(make_tubelet):
    params = ModelParams.zeros(2, 2)
    params.W_cls[1] = [4.0, 0.0]
    tubelets = [make_tubelet(4 * i, 0.0, 0.0, tubelet_id=i, feature=[1.0, 0.0]) for i in range(3)]
    scored_tubelets = score_tubelets(params, tubelets)
    assert scored_tubelets[0].class_scores[0] == pytest.approx(0.5)
    tubes = tubes_from_predictions(params, tubelets, LinkConfig())
    assert tubes[1][0].member_ids == (0, 1, 2)
    assert tubes[1][0].score > tubes[0][0].score


def test_write_and_read_tubes(tmp_path, rng, scored):
    tubes, _ = link_all(_random_scene(rng, scored), 2, LinkConfig())
    path = write_tubes(tmp_path / "out" / "tubes.jsonl", tubes)
    loaded = read_tubes(path)
    assert sorted(loaded) == [0, 1]
    for c in range(2):
        assert loaded[c] == tubes[c]
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format": "other", "version": 1, "classes": []}\n')
    with pytest.raises(GeometryError):
        read_tubes(bad)
