"""
Frame-AP and Video-AP evaluation.

Both metrics share one matching rule: within a keyframe (Frame AP) or a video
(Video AP), predictions of a class are visited in descending score order and
each takes its best-overlapping unmatched ground truth if the overlap exceeds
the threshold (a tube at exactly half the ground-truth extent does not match
at 0.5). Matches from all keyframes or videos are then ranked together
and summarised by all-points interpolated average precision.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mil_action.errors import ConfigError, EvalError
from mil_action.geometry import BoundingBox, Tube, iou, tube_iou

logger = logging.getLogger("MilAction.Eval")

FRAME_THRESHOLDS = (0.5,)
VIDEO_THRESHOLDS = (0.2, 0.5)

KeyframeId = Tuple[str, int]
KeyframeBoxes = Dict[KeyframeId, Dict[int, List[BoundingBox]]]


@dataclass(frozen=True)
class EvalConfig:
    num_classes: int
    iou_thresholds: Tuple[float, ...] = FRAME_THRESHOLDS

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        problems = []
        if self.num_classes < 1:
            problems.append(f"num_classes must be >= 1, got {self.num_classes}")
        if not self.iou_thresholds:
            problems.append("at least one IoU threshold is required")
        for t in self.iou_thresholds:
            if not 0.0 < t <= 1.0:
                problems.append(f"IoU threshold {t} outside (0, 1]")
        if problems:
            raise ConfigError(problems)

    @classmethod
    def frame(cls, num_classes: int) -> "EvalConfig":
        return cls(num_classes, FRAME_THRESHOLDS)

    @classmethod
    def video(cls, num_classes: int) -> "EvalConfig":
        return cls(num_classes, VIDEO_THRESHOLDS)


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class EvalResult:
    """
    Per-class AP per threshold. Classes without ground truth have AP None and
    are left out of the mean.
    """

    metric: str
    thresholds: Tuple[float, ...]
    per_class_ap: Dict[float, Dict[int, Optional[float]]] = field(default_factory=dict)
    mean_ap: Dict[float, float] = field(default_factory=dict)
    counts: Dict[float, Dict[int, MatchCounts]] = field(default_factory=dict)
    num_gt: Dict[int, int] = field(default_factory=dict)

    def to_dataframe(self) -> pd.DataFrame:
        rows = []
        for thr in self.thresholds:
            for c, ap in sorted(self.per_class_ap[thr].items()):
                counts = self.counts[thr][c]
                rows.append({
                    "metric": self.metric, "threshold": thr, "class": c, "ap": ap,
                    "num_gt": self.num_gt.get(c, 0),
                    "tp": counts.tp, "fp": counts.fp, "fn": counts.fn,
                })
        return pd.DataFrame(rows, columns=["metric", "threshold", "class", "ap",
                                           "num_gt", "tp", "fp", "fn"])

    def to_record(self) -> dict:
        return {
            "metric": self.metric,
            "mean_ap": {f"{t:g}": self.mean_ap[t] for t in self.thresholds},
            "per_class_ap": {
                f"{t:g}": {str(c): ap for c, ap in sorted(self.per_class_ap[t].items())}
                for t in self.thresholds
            },
            "counts": {
                f"{t:g}": {str(c): [m.tp, m.fp, m.fn] for c, m in sorted(self.counts[t].items())}
                for t in self.thresholds
            },
        }

    def format_table(self) -> str:
        lines = [f"{self.metric} AP"]
        header = "class  " + "  ".join(f"@{t:<6g}" for t in self.thresholds)
        lines.append(header)
        classes = sorted(self.per_class_ap[self.thresholds[0]])
        for c in classes:
            cells = []
            for t in self.thresholds:
                ap = self.per_class_ap[t][c]
                cells.append("   -   " if ap is None else f"{100 * ap:6.2f} ")
            lines.append(f"{c:<5d}  " + "  ".join(cells))
        lines.append("mean   " + "  ".join(f"{100 * self.mean_ap[t]:6.2f} " for t in self.thresholds))
        return "\n".join(lines)


def average_precision(scored_matches: Sequence[Tuple[float, bool]], num_gt: int) -> float:
    """
    All-points interpolated average precision.

    Args:
        scored_matches: (score, is_true_positive) pairs; equal scores keep input order
        num_gt: Number of ground-truth instances

    Returns:
        AP in [0, 1]; 0 when num_gt is 0
    """
    if num_gt < 0:
        raise EvalError(f"num_gt must be >= 0, got {num_gt}")
    if num_gt == 0 or not scored_matches:
        return 0.0
    scores = np.array([s for s, _ in scored_matches], dtype=np.float64)
    hits = np.array([bool(m) for _, m in scored_matches])
    order = np.argsort(-scores, kind="stable")
    hits = hits[order]

    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / num_gt
    precision = tp / (tp + fp)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def greedy_match(pred_scores: Sequence[float], overlaps: np.ndarray,
                 threshold: float) -> List[Tuple[float, bool]]:
    """
    Match the predictions of one class in one keyframe or video.

    Args:
        pred_scores: Prediction scores
        overlaps: (num_pred, num_gt) overlap matrix
        threshold: Overlap a true positive must exceed

    Returns:
        (score, is_tp) per prediction in descending score order
    """
    order = np.argsort(-np.asarray(pred_scores, dtype=np.float64), kind="stable")
    matched = np.zeros(overlaps.shape[1], dtype=bool)
    out = []
    for i in order:
        is_tp = False
        if overlaps.shape[1]:
            row = np.where(matched, -1.0, overlaps[i])
            j = int(np.argmax(row))
            if not matched[j] and row[j] > threshold:
                matched[j] = True
                is_tp = True
        out.append((float(pred_scores[i]), is_tp))
    return out


def _evaluate(metric: str, groups: Iterable[Hashable], num_classes: int,
              thresholds: Sequence[float],
              items: Callable[[Hashable, int], Tuple[list, list]],
              score_of: Callable, overlap: Callable) -> EvalResult:
    result = EvalResult(metric, tuple(thresholds))
    groups = list(groups)
    cache = {}
    for c in range(num_classes):
        total = 0
        for g in groups:
            preds, gts = items(g, c)
            total += len(gts)
            cache[(g, c)] = (preds, gts, np.array([[overlap(p, t) for t in gts] for p in preds])
                             .reshape(len(preds), len(gts)))
        result.num_gt[c] = total

    for thr in result.thresholds:
        aps: Dict[int, Optional[float]] = {}
        counts: Dict[int, MatchCounts] = {}
        for c in range(num_classes):
            matches = []
            for g in groups:
                preds, gts, ov = cache[(g, c)]
                matches.extend(greedy_match([score_of(p) for p in preds], ov, thr))
            tp = sum(1 for _, m in matches if m)
            counts[c] = MatchCounts(tp, len(matches) - tp, result.num_gt[c] - tp)
            aps[c] = average_precision(matches, result.num_gt[c]) if result.num_gt[c] else None
        result.per_class_ap[thr] = aps
        result.counts[thr] = counts
        valid = [ap for ap in aps.values() if ap is not None]
        if not valid:
            logger.warning(f"{metric} AP@{thr:g}: no class has ground truth")
        result.mean_ap[thr] = float(np.mean(valid)) if valid else 0.0
    return result


def frame_ap(predictions: KeyframeBoxes, ground_truth: KeyframeBoxes, cfg: EvalConfig) -> EvalResult:
    """
    Frame AP over keyframes.

    Args:
        predictions: {(clip_id, frame): {class: boxes with scores}}
        ground_truth: {(clip_id, frame): {class: boxes}}
        cfg: Classes and thresholds

    Raises:
        EvalError: if a prediction refers to a keyframe missing from the ground truth
    """
    unknown = set(predictions) - set(ground_truth)
    if unknown:
        raise EvalError(f"Predictions for {len(unknown)} keyframes without ground truth, "
                        f"e.g. {sorted(unknown)[0]}")

    def items(key, c):
        return (list(predictions.get(key, {}).get(c, [])),
                list(ground_truth[key].get(c, [])))

    result = _evaluate("frame", sorted(ground_truth), cfg.num_classes, cfg.iou_thresholds,
                       items, lambda b: b.score, iou)
    logger.info("Frame AP " + ", ".join(f"@{t:g}={result.mean_ap[t]:.4f}" for t in result.thresholds))
    return result


def _by_video(tubes: Dict[int, List[Tube]]) -> Dict[Tuple[str, int], List[Tube]]:
    out: Dict[Tuple[str, int], List[Tube]] = {}
    for c, class_tubes in tubes.items():
        for tube in class_tubes:
            out.setdefault((tube.video_id, c), []).append(tube)
    return out


def video_ap(pred_tubes: Dict[int, List[Tube]], gt_tubes: Dict[int, List[Tube]],
             cfg: EvalConfig) -> EvalResult:
    """
    Video AP: tubes are matched within each video by tube_iou, then ranked
    together across all videos per class.
    """
    preds = _by_video(pred_tubes)
    gts = _by_video(gt_tubes)
    videos = sorted({v for v, _ in preds} | {v for v, _ in gts})

    def items(video, c):
        return preds.get((video, c), []), gts.get((video, c), [])

    result = _evaluate("video", videos, cfg.num_classes, cfg.iou_thresholds,
                       items, lambda t: t.score, tube_iou)
    logger.info("Video AP " + ", ".join(f"@{t:g}={result.mean_ap[t]:.4f}" for t in result.thresholds))
    return result


def predictions_at_keyframes(scored_tubelets, keyframes: Iterable[KeyframeId],
                             num_classes: int) -> KeyframeBoxes:
    """
    Frame-AP predictions from scored tubelets: every tubelet covering a keyframe
    contributes its box at that frame once per class, scored by the class score.
    """
    wanted: Dict[str, List[int]] = {}
    for clip_id, frame in keyframes:
        wanted.setdefault(clip_id, []).append(frame)

    out: KeyframeBoxes = {}
    for st in scored_tubelets:
        t = st.tubelet
        for frame in wanted.get(t.clip_id, ()):
            if not t.covers(frame):
                continue
            box = t.box_at(frame)
            per_class = out.setdefault((t.clip_id, frame), {})
            for c in range(num_classes):
                per_class.setdefault(c, []).append(box.with_score(float(st.class_scores[c])))
    return out
