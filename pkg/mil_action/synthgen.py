"""
Synthetic weakly-labelled video worlds.

Generates people moving along piecewise-linear paths, action intervals for the
acting people, a noisy simulated person detector (per-frame misses, occluded
actions, corner jitter, spurious clutter boxes), person tubelets built from the
detections, and MIL bags over windows of keyframes.

Randomness uses numpy's PCG64 generator seeded through SeedSequence entropy
lists, one substream per purpose and clip:
    [seed, 0]        class-mean feature vectors
    [seed, 1, clip]  people, actions and detections of a clip
    [seed, 2, clip]  tubelet feature noise of a clip
    [seed, 3, clip]  which action intervals are hidden from the detector
"""

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from mil_action.errors import SynthError
from mil_action.geometry import (
    BoundingBox,
    Tube,
    Tubelet,
    interpolate_box,
    pairwise_iou,
    tubelet_st_iou,
)
from mil_action.mil import BagLabel
from mil_action.model import Bag

logger = logging.getLogger("MilAction.Synthgen")

WHOLE_CLIP = "whole"
TUBELET_ID_STRIDE = 100_000
LAYOUTS = ("free", "lanes")

_WAYPOINT_SPACING = 32
_TRUE_SCORE_RANGE = (0.5, 1.0)
_CLUTTER_SCORE_RANGE = (0.1, 0.6)


@dataclass(frozen=True)
class SyntheticConfig:
    num_clips: int = 40
    frames_per_clip: int = 96
    num_classes: int = 4
    actors_per_clip_range: Tuple[int, int] = (1, 3)
    bystander_rate: float = 1.0
    feature_dim: int = 64
    fn_rate: float = 0.2
    fp_rate: float = 0.5
    occlusion_rate: float = 0.0
    jitter_std: float = 1.0
    feature_noise_std: float = 0.5
    feature_signal: float = 3.0
    action_duration_range: Tuple[int, int] = (16, 48)
    actions_per_actor_range: Tuple[int, int] = (1, 3)
    single_class_per_clip: bool = False
    actor_layout: str = "free"
    frame_size: Tuple[float, float] = (320.0, 240.0)
    box_size_range: Tuple[float, float] = (30.0, 60.0)
    max_speed: float = 1.5
    tubelet_length: int = 16
    tubelet_stride: int = 0
    frames_per_keyframe: int = 16
    track_link_iou: float = 0.3
    max_missed_frames: int = 1
    dedup_iou: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("actors_per_clip_range", "action_duration_range",
                     "actions_per_actor_range", "frame_size", "box_size_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

        problems = []
        T, K = self.frames_per_clip, self.tubelet_length
        if self.num_clips < 1:
            problems.append("num_clips must be >= 1")
        if K < 1:
            problems.append("tubelet_length must be >= 1")
        if T < K:
            problems.append(f"frames_per_clip ({T}) must be >= tubelet_length ({K})")
        if self.num_classes < 1:
            problems.append("num_classes must be >= 1")
        if self.feature_dim < 1:
            problems.append("feature_dim must be >= 1")
        if not 0.0 <= self.fn_rate < 1.0:
            problems.append(f"fn_rate must be in [0, 1), got {self.fn_rate}")
        if self.fp_rate < 0.0:
            problems.append(f"fp_rate must be >= 0, got {self.fp_rate}")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            problems.append(f"occlusion_rate must be in [0, 1], got {self.occlusion_rate}")
        if self.bystander_rate < 0.0:
            problems.append("bystander_rate must be >= 0")
        if self.jitter_std < 0.0 or self.feature_noise_std < 0.0:
            problems.append("noise standard deviations must be >= 0")
        lo, hi = self.actors_per_clip_range
        if not 0 <= lo <= hi:
            problems.append(f"invalid actors_per_clip_range {self.actors_per_clip_range}")
        lo, hi = self.action_duration_range
        if not 1 <= lo <= hi:
            problems.append(f"invalid action_duration_range {self.action_duration_range}")
        elif hi > T:
            problems.append(f"action_duration_range {self.action_duration_range} exceeds clip length {T}")
        lo, hi = self.actions_per_actor_range
        if not 1 <= lo <= hi:
            problems.append(f"invalid actions_per_actor_range {self.actions_per_actor_range}")
        width, height = self.frame_size
        lo, hi = self.box_size_range
        if not 0.0 < lo <= hi or hi > width or 2.0 * hi > height:
            problems.append(f"box_size_range {self.box_size_range} does not fit frame {self.frame_size}")
        if self.actor_layout not in LAYOUTS:
            problems.append(f"actor_layout must be one of {LAYOUTS}")
        if self.max_speed < 0.0:
            problems.append("max_speed must be >= 0")
        if self.tubelet_stride < 0:
            problems.append("tubelet_stride must be >= 0 (0 means tubelet_length)")
        if self.frames_per_keyframe < 1:
            problems.append("frames_per_keyframe must be >= 1")
        if self.max_missed_frames < 0:
            problems.append("max_missed_frames must be >= 0")
        if problems:
            raise SynthError("; ".join(problems))

    @property
    def stride(self) -> int:
        return self.tubelet_stride or self.tubelet_length

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        return cls(**data)


@dataclass(frozen=True)
class ActorTrack:
    actor_id: int
    boxes: Tuple[BoundingBox, ...]
    bystander: bool = False


@dataclass(frozen=True)
class ActionInterval:
    """Action `label` performed by `actor_id` on frames [start, end)."""

    actor_id: int
    label: int
    start: int
    end: int


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    actor_id: int = -1


ClipDetections = List[List[Detection]]


@dataclass
class GroundTruth:
    """Annotations of one clip: person tracks, action intervals, keyframe labels."""

    clip_id: str
    num_frames: int
    tracks: Tuple[ActorTrack, ...]
    intervals: Tuple[ActionInterval, ...]
    frames_per_keyframe: int = 16
    keyframe_labels: Dict[int, FrozenSet[int]] = field(init=False)

    def __post_init__(self):
        self.tracks = tuple(self.tracks)
        self.intervals = tuple(self.intervals)
        ids = {t.actor_id for t in self.tracks}
        for track in self.tracks:
            if len(track.boxes) != self.num_frames:
                raise SynthError(f"Track {track.actor_id} of {self.clip_id} does not span the clip")
        for interval in self.intervals:
            if interval.actor_id not in ids:
                raise SynthError(f"Interval for unknown actor {interval.actor_id} in {self.clip_id}")
            if not 0 <= interval.start < interval.end <= self.num_frames:
                raise SynthError(f"Interval {interval} outside clip {self.clip_id}")
        self.keyframe_labels = {
            k: frozenset(iv.label for iv in self.intervals if iv.start <= frame < iv.end)
            for k, frame in enumerate(self.keyframe_frames())
        }

    def keyframe_frames(self) -> List[int]:
        step = self.frames_per_keyframe
        return list(range(step // 2, self.num_frames, step))

    def track(self, actor_id: int) -> ActorTrack:
        for t in self.tracks:
            if t.actor_id == actor_id:
                return t
        raise SynthError(f"No actor {actor_id} in {self.clip_id}")

    def labels_at(self, actor_id: int, frame: int) -> FrozenSet[int]:
        return frozenset(iv.label for iv in self.intervals
                         if iv.actor_id == actor_id and iv.start <= frame < iv.end)

    def keyframe_boxes(self, frame: int) -> Dict[int, List[BoundingBox]]:
        """Boxes of the people performing each class at a frame."""
        boxes: Dict[int, List[BoundingBox]] = {}
        for iv in self.intervals:
            if iv.start <= frame < iv.end:
                boxes.setdefault(iv.label, []).append(self.track(iv.actor_id).boxes[frame])
        return boxes

    def action_tubes(self) -> List[Tube]:
        """One ground-truth tube per action interval."""
        tubes = []
        for iv in self.intervals:
            boxes = self.track(iv.actor_id).boxes[iv.start:iv.end]
            tubes.append(Tube.from_boxes(iv.start, boxes, iv.label, 1.0, self.clip_id))
        return tubes


@dataclass(frozen=True)
class FeatureModel:
    """Tubelet features: sum of the class means of the active actions plus noise."""

    class_means: np.ndarray
    noise_std: float

    def feature(self, labels, rng: np.random.Generator) -> np.ndarray:
        base = np.zeros(self.class_means.shape[1])
        for label in sorted(labels):
            base = base + self.class_means[label]
        return base + rng.normal(0.0, 1.0, size=base.shape) * self.noise_std


@dataclass
class SyntheticWorld:
    config: SyntheticConfig
    clips: List[GroundTruth]
    detections: List[ClipDetections]
    class_means: np.ndarray

    def feature_model(self) -> FeatureModel:
        return FeatureModel(self.class_means, self.config.feature_noise_std)


def _class_means(cfg: SyntheticConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0])
    means = rng.normal(size=(cfg.num_classes, cfg.feature_dim))
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    return means / norms * cfg.feature_signal


def _trajectory(cfg: SyntheticConfig, rng: np.random.Generator, slot: int,
                num_slots: int) -> Tuple[BoundingBox, ...]:
    width, height = cfg.frame_size
    T = cfg.frames_per_clip
    w = rng.uniform(*cfg.box_size_range)
    h = 2.0 * w * rng.uniform(0.8, 1.0)

    if cfg.actor_layout == "lanes":
        lane = width / max(num_slots, 1)
        w = min(w, 0.8 * lane)
        x_lo, x_hi = slot * lane, (slot + 1) * lane - w
    else:
        x_lo, x_hi = 0.0, width - w
    y_lo, y_hi = 0.0, height - h

    n_way = T // _WAYPOINT_SPACING + 2
    waypoints = np.empty((n_way, 2))
    waypoints[0] = (rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi))
    for k in range(1, n_way):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        speed = rng.uniform(0.0, cfg.max_speed)
        step = speed * _WAYPOINT_SPACING * np.array([np.cos(angle), np.sin(angle)])
        waypoints[k] = np.clip(waypoints[k - 1] + step, (x_lo, y_lo), (x_hi, y_hi))

    boxes = []
    for f in range(T):
        k, rem = divmod(f, _WAYPOINT_SPACING)
        x, y = waypoints[k] + (waypoints[k + 1] - waypoints[k]) * (rem / _WAYPOINT_SPACING)
        boxes.append(BoundingBox(float(x), float(y), float(x + w), float(y + h), 1.0))
    return tuple(boxes)


def _action_intervals(cfg: SyntheticConfig, rng: np.random.Generator, actor_id: int,
                      clip_class: Optional[int]) -> List[ActionInterval]:
    T = cfg.frames_per_clip
    n = int(rng.integers(cfg.actions_per_actor_range[0], cfg.actions_per_actor_range[1] + 1))
    durations = rng.integers(cfg.action_duration_range[0], cfg.action_duration_range[1] + 1, size=n)
    while n > 1 and durations[:n].sum() > T:
        n -= 1
    durations = durations[:n]
    free = T - int(durations.sum())
    cuts = np.sort(rng.integers(0, free + 1, size=n))
    if clip_class is not None:
        labels = [clip_class] * n
    else:
        labels = rng.choice(cfg.num_classes, size=n, replace=n > cfg.num_classes).tolist()

    intervals = []
    offset = 0
    for i in range(n):
        start = int(cuts[i]) + offset
        end = start + int(durations[i])
        intervals.append(ActionInterval(actor_id, int(labels[i]), start, end))
        offset += int(durations[i])
    return intervals


def _jittered(box: BoundingBox, noise: np.ndarray, score: float) -> BoundingBox:
    x0, x1 = sorted((box.x_min + noise[0], box.x_max + noise[2]))
    y0, y1 = sorted((box.y_min + noise[1], box.y_max + noise[3]))
    x1 = max(x1, x0 + 1.0)
    y1 = max(y1, y0 + 1.0)
    return BoundingBox(float(x0), float(y0), float(x1), float(y1), float(score))


def _clutter_box(cfg: SyntheticConfig, rng: np.random.Generator) -> BoundingBox:
    width, height = cfg.frame_size
    w = rng.uniform(*cfg.box_size_range)
    h = 2.0 * w * rng.uniform(0.8, 1.0)
    x = rng.uniform(0.0, width - w)
    y = rng.uniform(0.0, height - h)
    return BoundingBox(float(x), float(y), float(x + w), float(y + h),
                       float(rng.uniform(*_CLUTTER_SCORE_RANGE)))


def _occluded_intervals(cfg: SyntheticConfig, index: int,
                        intervals: Sequence[ActionInterval]) -> List[ActionInterval]:
    """Intervals during which the acting person is never detected."""
    rng = np.random.default_rng([cfg.seed, 3, index])
    draws = rng.random(len(intervals))
    return [iv for iv, u in zip(intervals, draws) if u < cfg.occlusion_rate]


def _generate_clip(cfg: SyntheticConfig, index: int) -> Tuple[GroundTruth, ClipDetections]:
    rng = np.random.default_rng([cfg.seed, 1, index])
    lo, hi = cfg.actors_per_clip_range
    num_actors = int(rng.integers(lo, hi + 1))
    num_bystanders = int(rng.poisson(cfg.bystander_rate))
    num_people = num_actors + num_bystanders

    tracks = [ActorTrack(pid, _trajectory(cfg, rng, pid, num_people), pid >= num_actors)
              for pid in range(num_people)]
    clip_class = int(rng.integers(cfg.num_classes)) if cfg.single_class_per_clip else None
    intervals = []
    for actor_id in range(num_actors):
        intervals.extend(_action_intervals(cfg, rng, actor_id, clip_class))
    hidden = _occluded_intervals(cfg, index, intervals)

    detections: ClipDetections = []
    for f in range(cfg.frames_per_clip):
        frame_dets = []
        for track in tracks:
            missed = rng.random() < cfg.fn_rate
            noise = rng.normal(0.0, 1.0, size=4) * cfg.jitter_std
            score = rng.uniform(*_TRUE_SCORE_RANGE)
            if any(iv.actor_id == track.actor_id and iv.start <= f < iv.end for iv in hidden):
                missed = True
            if not missed:
                frame_dets.append(Detection(_jittered(track.boxes[f], noise, score), track.actor_id))
        for _ in range(int(rng.poisson(cfg.fp_rate))):
            frame_dets.append(Detection(_clutter_box(cfg, rng), -1))
        detections.append(frame_dets)

    clip = GroundTruth(f"clip_{index:04d}", cfg.frames_per_clip, tuple(tracks),
                       tuple(intervals), cfg.frames_per_keyframe)
    return clip, detections


def generate(cfg: SyntheticConfig) -> SyntheticWorld:
    """
    Generate a synthetic world; identical output for identical config.

    Returns:
        SyntheticWorld with per-clip ground truth and per-clip per-frame detections
    """
    clips, detections = [], []
    for i in range(cfg.num_clips):
        clip, dets = _generate_clip(cfg, i)
        clips.append(clip)
        detections.append(dets)
    world = SyntheticWorld(cfg, clips, detections, _class_means(cfg))
    logger.info(
        f"Generated {cfg.num_clips} clips x {cfg.frames_per_clip} frames "
        f"(seed={cfg.seed}, fn_rate={cfg.fn_rate}, fp_rate={cfg.fp_rate}, "
        f"occlusion_rate={cfg.occlusion_rate})"
    )
    return world


@dataclass
class _Track:
    first_frame: int
    last_frame: int
    detections: Dict[int, Detection]

    @property
    def last_box(self) -> BoundingBox:
        return self.detections[self.last_frame].box


def _associate(detections: ClipDetections, link_iou: float, max_missed: int) -> List[_Track]:
    """Greedy frame-to-frame association by highest IoU with each track's last box."""
    active: List[_Track] = []
    finished: List[_Track] = []
    for f, frame_dets in enumerate(detections):
        still_active = []
        for track in active:
            if f - track.last_frame - 1 > max_missed:
                finished.append(track)
            else:
                still_active.append(track)
        active = still_active

        overlaps = pairwise_iou([t.last_box for t in active], [d.box for d in frame_dets])
        pairs = sorted((-float(overlaps[ti, di]), int(ti), int(di))
                       for ti, di in zip(*np.nonzero(overlaps >= link_iou)))

        used_tracks, used_dets = set(), set()
        for _, ti, di in pairs:
            if ti in used_tracks or di in used_dets:
                continue
            used_tracks.add(ti)
            used_dets.add(di)
            active[ti].detections[f] = frame_dets[di]
            active[ti].last_frame = f

        for di, det in enumerate(frame_dets):
            if di not in used_dets:
                active.append(_Track(f, f, {f: det}))

    finished.extend(active)
    finished.sort(key=lambda t: (t.first_frame, t.detections[t.first_frame].box.coords()))
    return finished


def _track_boxes(track: _Track) -> List[BoundingBox]:
    """Per-frame boxes of a track, interpolating frames the detector missed."""
    frames = sorted(track.detections)
    boxes = []
    for left, right in zip(frames, frames[1:] + [None]):
        boxes.append(track.detections[left].box)
        if right is None:
            break
        a, b = track.detections[left].box, track.detections[right].box
        for f in range(left + 1, right):
            boxes.append(interpolate_box(a, b, (f - left) / (right - left)))
    return boxes


def _majority_actor(track: _Track, start: int, end: int) -> int:
    votes = Counter(d.actor_id for f, d in track.detections.items() if start <= f <= end)
    best = max(votes.values())
    return min(a for a, c in votes.items() if c == best)


def build_tubelets(detections: ClipDetections, K: int, *, stride: Optional[int] = None,
                   link_iou: float = 0.3, max_missed_frames: int = 1,
                   dedup_iou: float = 0.5, clip: Optional[GroundTruth] = None,
                   feature_model: Optional[FeatureModel] = None,
                   rng: Optional[np.random.Generator] = None,
                   clip_id: str = "", start_id: int = 0) -> List[Tubelet]:
    """
    Build K-frame person tubelets from per-frame detections of one clip.

    Detections are linked frame to frame greedily by IoU (gaps of up to
    max_missed_frames are interpolated), each track is cut into K-frame pieces
    every `stride` frames, and pieces with spatio-temporal IoU >= dedup_iou are
    de-duplicated keeping the higher score.

    Args:
        detections: Per-frame detections of the clip
        K: Tubelet length
        stride: Frames between tubelet starts on a track (default K)
        link_iou: Minimum IoU to extend a track
        max_missed_frames: Missed frames a track survives
        dedup_iou: De-duplication threshold
        clip: Ground truth, used to attach features of the acting person
        feature_model: Feature stand-in; without it features are empty vectors
        rng: Generator for feature noise
        clip_id: Clip identifier stored on the tubelets
        start_id: First tubelet id

    Returns:
        Tubelets sorted by (start_frame, tubelet_id)
    """
    if K < 1:
        raise SynthError(f"Tubelet length must be >= 1, got {K}")
    stride = stride or K
    if clip is not None and not clip_id:
        clip_id = clip.clip_id

    candidates: List[Tubelet] = []
    next_id = start_id
    for track in _associate(detections, link_iou, max_missed_frames):
        boxes = _track_boxes(track)
        for offset in range(0, len(boxes) - K + 1, stride):
            start = track.first_frame + offset
            actor = _majority_actor(track, start, start + K - 1)
            candidates.append(Tubelet(start, tuple(boxes[offset:offset + K]), np.zeros(0),
                                      next_id, clip_id, actor))
            next_id += 1

    kept: List[Tubelet] = []
    for cand in sorted(candidates, key=lambda t: (-t.score, t.tubelet_id)):
        duplicate = any(
            k.start_frame <= cand.end_frame and cand.start_frame <= k.end_frame
            and tubelet_st_iou(k, cand) >= dedup_iou
            for k in kept
        )
        if not duplicate:
            kept.append(cand)
    kept.sort(key=lambda t: (t.start_frame, t.tubelet_id))

    if feature_model is None:
        return kept
    rng = rng if rng is not None else np.random.default_rng()
    out = []
    for t in kept:
        labels = clip.labels_at(t.actor_id, t.center_frame) if clip is not None and t.actor_id >= 0 else ()
        out.append(Tubelet(t.start_frame, t.boxes, feature_model.feature(labels, rng),
                           t.tubelet_id, t.clip_id, t.actor_id))
    return out


def build_world_tubelets(world: SyntheticWorld,
                         clip_indices: Optional[Sequence[int]] = None) -> List[Tubelet]:
    """Tubelets with features for the selected clips of a world (all by default)."""
    cfg = world.config
    indices = range(len(world.clips)) if clip_indices is None else clip_indices
    model = world.feature_model()
    tubelets: List[Tubelet] = []
    for i in indices:
        tubelets.extend(build_tubelets(
            world.detections[i], cfg.tubelet_length, stride=cfg.stride,
            link_iou=cfg.track_link_iou, max_missed_frames=cfg.max_missed_frames,
            dedup_iou=cfg.dedup_iou, clip=world.clips[i], feature_model=model,
            rng=np.random.default_rng([cfg.seed, 2, i]), start_id=i * TUBELET_ID_STRIDE,
        ))
    logger.debug(f"Built {len(tubelets)} tubelets for {len(indices)} clips")
    return tubelets


def _group_by_clip(tubelets: Sequence[Tubelet]) -> Dict[str, List[Tubelet]]:
    groups: Dict[str, List[Tubelet]] = {}
    for t in tubelets:
        groups.setdefault(t.clip_id, []).append(t)
    return groups


def build_bags(clips: Sequence[GroundTruth], tubelets: Sequence[Tubelet],
               subclip_seconds: Union[int, str, None], frames_per_second: Optional[int] = None,
               *, num_classes: int) -> List[Bag]:
    """
    Partition clips into windows of N keyframes and make one bag per window.

    A bag holds every tubelet whose centre frame lies in its window and is
    labelled with the union of the keyframe labels in the window. N may be
    WHOLE_CLIP (or None) for one video-level bag per clip. Windows without
    tubelets produce no bag.

    Raises:
        SynthError: if N is smaller than one keyframe
    """
    whole = subclip_seconds is None or subclip_seconds == WHOLE_CLIP
    if not whole:
        if isinstance(subclip_seconds, str) or int(subclip_seconds) < 1:
            raise SynthError(f"Sub-clip window must be >= 1 keyframe or '{WHOLE_CLIP}', got {subclip_seconds!r}")

    by_clip = _group_by_clip(tubelets)
    bags: List[Bag] = []
    skipped = 0
    for clip in clips:
        step = frames_per_second or clip.frames_per_keyframe
        window = clip.num_frames if whole else int(subclip_seconds) * step
        clip_tubelets = by_clip.get(clip.clip_id, [])
        keyframes = clip.keyframe_frames()
        for w_start in range(0, clip.num_frames, window):
            w_end = min(w_start + window, clip.num_frames)
            instances = tuple(t for t in clip_tubelets if w_start <= t.center_frame < w_end)
            labels = set()
            for k, frame in enumerate(keyframes):
                if w_start <= frame < w_end:
                    labels |= clip.keyframe_labels[k]
            if not instances:
                skipped += 1
                continue
            bags.append(Bag(instances, BagLabel.from_classes(labels, num_classes),
                            clip.clip_id, (w_start, w_end), len(bags)))
    if skipped:
        logger.warning(f"Skipped {skipped} windows without tubelets")
    return bags


def build_instance_bags(clips: Sequence[GroundTruth], tubelets: Sequence[Tubelet], *,
                        num_classes: int, iou_threshold: float = 0.5) -> List[Bag]:
    """
    Fully-supervised baseline bags: one singleton bag per tubelet.

    A tubelet takes the labels of the ground-truth person its centre-frame box
    overlaps with IoU >= iou_threshold (best match), and is negative otherwise.
    """
    clip_map = {c.clip_id: c for c in clips}
    bags = []
    for t in tubelets:
        clip = clip_map.get(t.clip_id)
        labels = frozenset()
        if clip is not None:
            overlaps = pairwise_iou([t.box_at(t.center_frame)],
                                    [track.boxes[t.center_frame] for track in clip.tracks])[0]
            # first track wins ties
            if overlaps.size and overlaps.max() > 0.0 and overlaps.max() >= iou_threshold:
                best_actor = clip.tracks[int(np.argmax(overlaps))].actor_id
                labels = clip.labels_at(best_actor, t.center_frame)
        bags.append(Bag((t,), BagLabel.from_classes(labels, num_classes), t.clip_id,
                        (t.start_frame, t.end_frame + 1), len(bags)))
    return bags


def instance_labels(tubelet: Tubelet, clip: GroundTruth) -> FrozenSet[int]:
    """Ground-truth labels of the tubelet's person at its centre frame."""
    if tubelet.actor_id < 0:
        return frozenset()
    return clip.labels_at(tubelet.actor_id, tubelet.center_frame)


def bag_violates_mil(bag: Bag, clip: GroundTruth) -> bool:
    """True if some bag label is carried by none of the bag's instances."""
    carried = set()
    for t in bag.instances:
        carried |= instance_labels(t, clip)
    return any(label not in carried for label in bag.label.classes())


def mil_violation_rate(bags: Sequence[Bag], clips: Sequence[GroundTruth]) -> float:
    if not bags:
        return 0.0
    clip_map = {c.clip_id: c for c in clips}
    return float(np.mean([bag_violates_mil(b, clip_map[b.source_clip]) for b in bags]))


def detector_statistics(world: SyntheticWorld, iou_threshold: float = 0.5,
                        clip_indices: Optional[Sequence[int]] = None) -> Dict[str, float]:
    """
    Recall and precision of the simulated detector against annotated people
    (people performing an action at that frame), greedy IoU matching per frame.
    """
    indices = range(len(world.clips)) if clip_indices is None else clip_indices
    num_gt = num_det = matched = 0
    for i in indices:
        clip = world.clips[i]
        for f, frame_dets in enumerate(world.detections[i]):
            acting = sorted({iv.actor_id for iv in clip.intervals if iv.start <= f < iv.end})
            gt_unique = [clip.track(a).boxes[f] for a in acting]
            num_gt += len(gt_unique)
            num_det += len(frame_dets)
            overlaps = pairwise_iou([d.box for d in frame_dets], gt_unique)
            pairs = sorted((-float(overlaps[di, gi]), di, gi)
                           for di in range(len(frame_dets)) for gi in range(len(gt_unique)))
            used_d, used_g = set(), set()
            for neg, di, gi in pairs:
                if -neg < iou_threshold:
                    break
                if di in used_d or gi in used_g:
                    continue
                used_d.add(di)
                used_g.add(gi)
                matched += 1
    return {
        "recall": matched / num_gt if num_gt else 0.0,
        "precision": matched / num_det if num_det else 0.0,
        "gt_boxes": num_gt,
        "detections": num_det,
    }


def bag_statistics(bags: Sequence[Bag]) -> Dict[str, float]:
    sizes = [len(b) for b in bags]
    return {
        "num_bags": len(bags),
        "mean_bag_size": float(np.mean(sizes)) if sizes else 0.0,
        "background_bags": sum(1 for b in bags if not b.label.classes()),
    }


def keyframe_ground_truth(clips: Sequence[GroundTruth]) -> Dict[Tuple[str, int], Dict[int, List[BoundingBox]]]:
    """Frame-AP ground truth keyed by (clip_id, keyframe frame)."""
    return {(c.clip_id, frame): c.keyframe_boxes(frame)
            for c in clips for frame in c.keyframe_frames()}


def action_tubes(clips: Sequence[GroundTruth], num_classes: int) -> Dict[int, List[Tube]]:
    """Video-AP ground truth tubes grouped by class."""
    tubes: Dict[int, List[Tube]] = {c: [] for c in range(num_classes)}
    for clip in clips:
        for tube in clip.action_tubes():
            tubes[tube.label].append(tube)
    return tubes
