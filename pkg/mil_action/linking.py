"""
Greedy online linking of scored tubelets into class-labelled tubes.

Tubelets of each video are visited in temporal order, grouped by start frame.
Within a step, (active tube, candidate) pairs whose overlap reaches the
threshold are claimed greedily, highest overlap first; ties go to the tube
whose last tubelet scores higher. Each tube takes at most one candidate per
step and leftovers open new tubes. A tube that has not been extended for more
than `max_gap` tubelet steps is closed.

The number of links never decreases when the threshold is lowered.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from mil_action.errors import ConfigError, GeometryError, NoTemporalOverlapError
from mil_action.geometry import (
    BoundingBox,
    Tube,
    Tubelet,
    iou,
    tube_from_tubelets,
    tubelet_spatial_overlap,
)
from mil_action.mil import LogVarTransform
from mil_action.model import ModelParams, predict_tubelets

logger = logging.getLogger("MilAction.Linking")

TUBES_FORMAT = "mil-action-tubes"
TUBES_VERSION = 1


@dataclass(frozen=True)
class ScoredTubelet:
    tubelet: Tubelet
    class_scores: np.ndarray = field(compare=False)

    def __post_init__(self):
        scores = np.asarray(self.class_scores, dtype=np.float64)
        if scores.ndim != 1 or np.any(~np.isfinite(scores)) or np.any((scores < 0) | (scores > 1)):
            raise GeometryError(f"Class scores of tubelet {self.tubelet.tubelet_id} must lie in [0, 1]")
        object.__setattr__(self, "class_scores", scores)


@dataclass(frozen=True)
class LinkConfig:
    link_iou_threshold: float = 0.5
    max_gap: int = 1
    per_class: bool = True
    min_class_score: float = 0.0

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.link_iou_threshold <= 1.0:
            problems.append(f"link_iou_threshold must be in [0, 1], got {self.link_iou_threshold}")
        if self.max_gap < 0:
            problems.append(f"max_gap must be >= 0, got {self.max_gap}")
        if not 0.0 <= self.min_class_score <= 1.0:
            problems.append(f"min_class_score must be in [0, 1], got {self.min_class_score}")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class IdentitySwap:
    """A tube extended with a tubelet that came from a different person."""

    label: int
    video_id: str
    frame: int
    from_actor: int
    to_actor: int
    tubelet_id: int


@dataclass
class _ActiveTube:
    members: List[Tubelet]
    scores: List[float]

    @property
    def last(self) -> Tubelet:
        return self.members[-1]


def _similarity(tail: Tubelet, cand: Tubelet) -> float:
    try:
        return tubelet_spatial_overlap(tail, cand)
    except NoTemporalOverlapError:
        return iou(tail.boxes[-1], cand.boxes[0])


def _link_video(cands: List[Tuple[Tubelet, float]], cfg: LinkConfig, label: int,
                video_id: str, swaps: List[IdentitySwap]) -> List[_ActiveTube]:
    cands = sorted(cands, key=lambda c: (c[0].start_frame, c[0].tubelet_id))
    groups: Dict[int, List[Tuple[Tubelet, float]]] = {}
    for cand in cands:
        groups.setdefault(cand[0].start_frame, []).append(cand)

    active: List[_ActiveTube] = []
    finished: List[_ActiveTube] = []
    for start in sorted(groups):
        group = groups[start]
        survivors = []
        for tube in active:
            limit = tube.last.end_frame + 1 + cfg.max_gap * tube.last.length
            (survivors if start <= limit else finished).append(tube)
        active = survivors

        # claim order depends only on tails and candidates, never on earlier links
        pairs = []
        for ti, tube in enumerate(active):
            for idx, (cand, _) in enumerate(group):
                sim = _similarity(tube.last, cand)
                if sim >= cfg.link_iou_threshold:
                    pairs.append((-sim, -tube.scores[-1], tube.last.tubelet_id, cand.tubelet_id, ti, idx))
        pairs.sort()

        claimed, extended = set(), set()
        for *_, ti, idx in pairs:
            if ti in extended or idx in claimed:
                continue
            extended.add(ti)
            claimed.add(idx)
            tube = active[ti]
            cand, score = group[idx]
            if cand.actor_id != tube.last.actor_id:
                swap = IdentitySwap(label, video_id, cand.start_frame, tube.last.actor_id,
                                    cand.actor_id, cand.tubelet_id)
                swaps.append(swap)
                logger.debug(f"Identity swap in {video_id} class {label} at frame {swap.frame}")
            tube.members.append(cand)
            tube.scores.append(score)

        for idx, (cand, score) in enumerate(group):
            if idx not in claimed:
                active.append(_ActiveTube([cand], [score]))

    return finished + active


def _link_groups(tubelets: Sequence[ScoredTubelet], scores: np.ndarray, label: int,
                 cfg: LinkConfig) -> Tuple[List[_ActiveTube], List[IdentitySwap]]:
    by_video: Dict[str, List[Tuple[Tubelet, float]]] = {}
    for st, score in zip(tubelets, scores):
        if score >= cfg.min_class_score:
            by_video.setdefault(st.tubelet.clip_id, []).append((st.tubelet, float(score)))

    tubes: List[_ActiveTube] = []
    swaps: List[IdentitySwap] = []
    for video_id in sorted(by_video):
        tubes.extend(_link_video(by_video[video_id], cfg, label, video_id, swaps))
    tubes.sort(key=lambda t: (t.members[0].clip_id, t.members[0].start_frame, t.members[0].tubelet_id))
    return tubes, swaps


def link_with_diagnostics(tubelets: Sequence[ScoredTubelet], label: int,
                          cfg: LinkConfig) -> Tuple[List[Tube], List[IdentitySwap]]:
    """
    Link one class and report identity swaps.

    Args:
        tubelets: Scored tubelets, possibly from several videos
        label: Class whose scores drive linking
        cfg: Linking parameters

    Returns:
        (tubes ordered by video and start frame, identity swaps in linking order)
    """
    if not tubelets:
        return [], []
    scores = np.array([st.class_scores[label] for st in tubelets])
    groups, swaps = _link_groups(tubelets, scores, label, cfg)
    tubes = [tube_from_tubelets(g.members, label, g.scores) for g in groups]
    if swaps:
        logger.warning(f"Class {label}: {len(swaps)} identity swaps while linking")
    return tubes, swaps


def link(tubelets: Sequence[ScoredTubelet], label: int, cfg: LinkConfig) -> List[Tube]:
    """Link the tubelets of one class into tubes; empty input gives no tubes."""
    return link_with_diagnostics(tubelets, label, cfg)[0]


def link_all(tubelets: Sequence[ScoredTubelet], num_classes: int,
             cfg: LinkConfig) -> Tuple[Dict[int, List[Tube]], List[IdentitySwap]]:
    """
    Tubes for every class.

    With per_class linking each class is linked on its own scores. Otherwise
    memberships come from one class-agnostic pass over the maximum class score,
    and each class gets the same tubes scored by its own mean.
    """
    tubes: Dict[int, List[Tube]] = {c: [] for c in range(num_classes)}
    swaps: List[IdentitySwap] = []
    if not tubelets:
        return tubes, swaps
    if cfg.per_class:
        for c in range(num_classes):
            tubes[c], class_swaps = link_with_diagnostics(tubelets, c, cfg)
            swaps.extend(class_swaps)
        return tubes, swaps

    scores = np.stack([st.class_scores for st in tubelets])
    groups, swaps = _link_groups(tubelets, scores.max(axis=1), -1, cfg)
    index = {st.tubelet.tubelet_id: i for i, st in enumerate(tubelets)}
    for c in range(num_classes):
        for g in groups:
            member_scores = [scores[index[t.tubelet_id], c] for t in g.members]
            tubes[c].append(tube_from_tubelets(g.members, c, member_scores))
    return tubes, swaps


def score_tubelets(params: ModelParams, tubelets: Sequence[Tubelet],
                   log_var_transform: LogVarTransform = LogVarTransform.SOFTPLUS
                   ) -> List[ScoredTubelet]:
    preds = predict_tubelets(params, tubelets, log_var_transform)
    return [ScoredTubelet(t, p.probs) for t, p in zip(tubelets, preds)]


def tubes_from_predictions(params: ModelParams, tubelets: Sequence[Tubelet],
                           cfg: LinkConfig) -> Dict[int, List[Tube]]:
    """Predict class scores for every tubelet, then link each class."""
    tubes, _ = link_all(score_tubelets(params, tubelets), params.num_classes, cfg)
    return tubes


def _box_values(box: BoundingBox) -> list:
    return [box.x_min, box.y_min, box.x_max, box.y_max, box.score]


def write_tubes(path, tubes: Dict[int, List[Tube]]) -> Path:
    """
    Dump tubes as JSON lines: a header naming the classes, then one line per
    tube with class, score, frame range, member ids and per-frame boxes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        header = {"format": TUBES_FORMAT, "version": TUBES_VERSION, "classes": sorted(tubes)}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for label in sorted(tubes):
            for tube in tubes[label]:
                record = {
                    "label": tube.label,
                    "score": tube.score,
                    "video_id": tube.video_id,
                    "start_frame": tube.start_frame,
                    "end_frame": tube.end_frame,
                    "member_ids": list(tube.member_ids),
                    "boxes": [_box_values(b) for _, b in tube.segments],
                }
                f.write(json.dumps(record, sort_keys=True) + "\n")
    os.replace(tmp, path)
    logger.info(f"Wrote {sum(len(v) for v in tubes.values())} tubes to {path}")
    return path


def read_tubes(path) -> Dict[int, List[Tube]]:
    """Read a tube dump written by write_tubes."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != TUBES_FORMAT or header.get("version") != TUBES_VERSION:
        raise GeometryError(f"{path} is not a {TUBES_FORMAT} v{TUBES_VERSION} file")
    tubes: Dict[int, List[Tube]] = {int(c): [] for c in header["classes"]}
    for line in lines[1:]:
        rec = json.loads(line)
        boxes = [BoundingBox(*b) for b in rec["boxes"]]
        tube = Tube.from_boxes(rec["start_frame"], boxes, rec["label"], rec["score"],
                               rec["video_id"], tuple(rec["member_ids"]))
        tubes.setdefault(tube.label, []).append(tube)
    return tubes
