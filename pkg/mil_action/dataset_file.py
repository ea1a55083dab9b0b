"""
JSON-lines container for synthetic worlds.

Line 1 is a header with the format name, version and the generating
SyntheticConfig; every following line is one record tagged by "type":
"class_means", "clip", "detections", "tubelet" or "bag" (a bag index entry
referencing tubelets by id). Keys are sorted and floats
are written with their shortest round-trip repr, so the same world always
produces the same bytes.
"""

import json
import logging
import os
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from mil_action.errors import DatasetFormatError
from mil_action.geometry import BoundingBox, Tubelet
from mil_action.mil import BagLabel
from mil_action.model import Bag
from mil_action.synthgen import (
    ActionInterval,
    ActorTrack,
    Detection,
    GroundTruth,
    SyntheticConfig,
    SyntheticWorld,
)

logger = logging.getLogger("MilAction.Synthgen.File")

DATASET_FORMAT = "mil-action-dataset"
DATASET_VERSION = 1


class DatasetContents(NamedTuple):
    world: SyntheticWorld
    tubelets: Optional[List[Tubelet]]
    bags: Optional[List[Bag]] = None


def _box(box: BoundingBox) -> list:
    return [box.x_min, box.y_min, box.x_max, box.y_max, box.score]


def _unbox(values) -> BoundingBox:
    return BoundingBox(*(float(v) for v in values))


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _records(world: SyntheticWorld, tubelets: Optional[Sequence[Tubelet]],
             bags: Optional[Sequence[Bag]]):
    yield {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "config": world.config.to_dict(),
        "has_tubelets": tubelets is not None,
        "has_bags": bags is not None,
    }
    yield {"type": "class_means", "values": world.class_means.tolist()}
    for clip, dets in zip(world.clips, world.detections):
        yield {
            "type": "clip",
            "clip_id": clip.clip_id,
            "num_frames": clip.num_frames,
            "frames_per_keyframe": clip.frames_per_keyframe,
            "tracks": [
                {"actor_id": t.actor_id, "bystander": t.bystander,
                 "boxes": [_box(b) for b in t.boxes]}
                for t in clip.tracks
            ],
            "intervals": [[iv.actor_id, iv.label, iv.start, iv.end] for iv in clip.intervals],
        }
        yield {
            "type": "detections",
            "clip_id": clip.clip_id,
            "frames": [[_box(d.box) + [d.actor_id] for d in frame] for frame in dets],
        }
    for t in tubelets or ():
        yield {
            "type": "tubelet",
            "tubelet_id": t.tubelet_id,
            "clip_id": t.clip_id,
            "actor_id": t.actor_id,
            "start_frame": t.start_frame,
            "boxes": [_box(b) for b in t.boxes],
            "feature": t.feature.tolist(),
        }
    for b in bags or ():
        yield {
            "type": "bag",
            "bag_id": b.bag_id,
            "clip_id": b.source_clip,
            "window": list(b.window),
            "label": b.label.classes(),
            "instances": [t.tubelet_id for t in b.instances],
        }


def save_dataset(path, world: SyntheticWorld,
                 tubelets: Optional[Sequence[Tubelet]] = None,
                 bags: Optional[Sequence[Bag]] = None) -> Path:
    """
    Write a world (and optionally its tubelets and a bag index over them) to a
    dataset file. Every bag instance must be one of the given tubelets.

    The file is written to a temporary sibling and moved into place.

    Returns:
        Path written

    Raises:
        DatasetFormatError: if a bag references a tubelet that is not written
    """
    if bags is not None:
        known = {t.tubelet_id for t in tubelets or ()}
        for b in bags:
            missing = [t.tubelet_id for t in b.instances if t.tubelet_id not in known]
            if missing:
                raise DatasetFormatError(f"Bag {b.bag_id} references unknown tubelets {missing}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        for record in _records(world, tubelets, bags):
            f.write(_dumps(record))
            f.write("\n")
    os.replace(tmp, path)
    logger.info(f"Dataset with {len(world.clips)} clips saved to {path}")
    return path


def _clip_from_record(record: dict) -> GroundTruth:
    tracks = tuple(
        ActorTrack(int(t["actor_id"]), tuple(_unbox(b) for b in t["boxes"]), bool(t["bystander"]))
        for t in record["tracks"]
    )
    intervals = tuple(ActionInterval(*(int(v) for v in iv)) for iv in record["intervals"])
    return GroundTruth(record["clip_id"], int(record["num_frames"]), tracks, intervals,
                       int(record["frames_per_keyframe"]))


def _bags_from_records(records, tubelets: Sequence[Tubelet], num_classes: int) -> List[Bag]:
    by_id = {t.tubelet_id: t for t in tubelets}
    bags = []
    for lineno, record in records:
        ids = record["instances"]
        if any(i not in by_id for i in ids):
            raise DatasetFormatError(f"Line {lineno}: bag references an unknown tubelet")
        bags.append(Bag(tuple(by_id[i] for i in ids),
                        BagLabel.from_classes(record["label"], num_classes),
                        record["clip_id"], tuple(int(v) for v in record["window"]),
                        int(record["bag_id"])))
    return bags


def load_dataset(path) -> DatasetContents:
    """
    Read a dataset file written by save_dataset.

    Raises:
        DatasetFormatError: on a missing file, a foreign or newer format, or a
            malformed record
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetFormatError(f"Cannot read dataset {path}: {e}") from e
    if not lines:
        raise DatasetFormatError(f"Dataset {path} is empty")

    try:
        header = json.loads(lines[0])
        if header.get("format") != DATASET_FORMAT:
            raise DatasetFormatError(f"{path} is not a {DATASET_FORMAT} file")
        if header.get("version") != DATASET_VERSION:
            raise DatasetFormatError(f"Unsupported dataset version {header.get('version')} in {path}")
        config = SyntheticConfig.from_dict(header["config"])

        class_means = None
        clips: List[GroundTruth] = []
        detections = []
        tubelets: List[Tubelet] = []
        bag_records = []
        for lineno, line in enumerate(lines[1:], start=2):
            record = json.loads(line)
            kind = record.get("type")
            if kind == "class_means":
                class_means = np.array(record["values"], dtype=np.float64)
            elif kind == "clip":
                clips.append(_clip_from_record(record))
            elif kind == "detections":
                if not clips or clips[-1].clip_id != record["clip_id"]:
                    raise DatasetFormatError(f"Line {lineno}: detections without their clip")
                detections.append([
                    [Detection(_unbox(d[:5]), int(d[5])) for d in frame]
                    for frame in record["frames"]
                ])
            elif kind == "tubelet":
                tubelets.append(Tubelet(
                    int(record["start_frame"]), tuple(_unbox(b) for b in record["boxes"]),
                    np.array(record["feature"], dtype=np.float64), int(record["tubelet_id"]),
                    record["clip_id"], int(record["actor_id"]),
                ))
            elif kind == "bag":
                bag_records.append((lineno, record))
            else:
                raise DatasetFormatError(f"Line {lineno}: unknown record type {kind!r}")
        bags = _bags_from_records(bag_records, tubelets, config.num_classes)
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"Malformed dataset {path}: {e}") from e

    if class_means is None or len(clips) != len(detections):
        raise DatasetFormatError(f"Dataset {path} is incomplete")
    world = SyntheticWorld(config, clips, detections, class_means)
    logger.info(f"Dataset with {len(clips)} clips loaded from {path}")
    return DatasetContents(world, tubelets if header.get("has_tubelets") else None,
                           bags if header.get("has_bags") else None)
