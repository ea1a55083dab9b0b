import json

import numpy as np
import pytest

from mil_action.dataset_file import DATASET_FORMAT, load_dataset, save_dataset
from mil_action.errors import DatasetFormatError
from mil_action.experiments import gen_dataset
from mil_action.synthgen import WHOLE_CLIP, SyntheticConfig, build_bags, build_world_tubelets, generate


@pytest.fixture
def world(small_config):
    return generate(small_config)


def test_round_trip(tmp_path, world):
    tubelets = build_world_tubelets(world)
    bags = build_bags(world.clips, tubelets, 2, num_classes=world.config.num_classes)
    path = save_dataset(tmp_path / "data" / "world.jsonl", world, tubelets, bags)
    loaded = load_dataset(path)

    assert loaded.world.config == world.config
    np.testing.assert_array_equal(loaded.world.class_means, world.class_means)
    assert loaded.world.detections == world.detections
    for a, b in zip(loaded.world.clips, world.clips):
        assert (a.clip_id, a.num_frames, a.tracks, a.intervals) == (b.clip_id, b.num_frames, b.tracks, b.intervals)
        assert a.keyframe_labels == b.keyframe_labels
    assert loaded.tubelets == tubelets
    for a, b in zip(loaded.tubelets, tubelets):
        np.testing.assert_array_equal(a.feature, b.feature)
    assert [(b.bag_id, b.source_clip, b.window, b.label) for b in loaded.bags] == \
        [(b.bag_id, b.source_clip, b.window, b.label) for b in bags]
    assert [[t.tubelet_id for t in b.instances] for b in loaded.bags] == \
        [[t.tubelet_id for t in b.instances] for b in bags]


def test_world_without_tubelets(tmp_path, world):
    loaded = load_dataset(save_dataset(tmp_path / "w.jsonl", world))
    assert loaded.tubelets is None
    assert loaded.bags is None


def test_header_and_record_types(tmp_path, small_config):
    path = gen_dataset(small_config, tmp_path / "d.jsonl")
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    assert header["format"] == DATASET_FORMAT
    assert header["version"] == 1
    assert header["has_tubelets"] and header["has_bags"]
    kinds = [json.loads(line)["type"] for line in lines[1:]]
    assert kinds[0] == "class_means"
    assert kinds.count("clip") == small_config.num_clips
    assert kinds.count("bag") == len(load_dataset(path).bags)
    assert not (tmp_path / "d.jsonl.tmp").exists()


def test_same_seed_same_bytes(tmp_path, small_config):
    a = gen_dataset(small_config, tmp_path / "a.jsonl").read_bytes()
    b = gen_dataset(small_config, tmp_path / "b.jsonl").read_bytes()
    assert a == b
    other = SyntheticConfig(**{**small_config.to_dict(), "seed": small_config.seed + 1})
    assert gen_dataset(other, tmp_path / "c.jsonl").read_bytes() != a


def test_whole_clip_bag_index(tmp_path, small_config):
    contents = load_dataset(gen_dataset(small_config, tmp_path / "d.jsonl"))
    assert all(b.window[1] - b.window[0] == small_config.frames_per_clip for b in contents.bags)
    expected = build_bags(contents.world.clips, contents.tubelets, WHOLE_CLIP,
                          num_classes=small_config.num_classes)
    assert [b.label for b in contents.bags] == [b.label for b in expected]


@pytest.mark.parametrize("first_line", [
    '{"format": "something-else", "version": 1}',
    '{"format": "mil-action-dataset", "version": 99}',
    "not json",
])
def test_bad_header(tmp_path, first_line):
    path = tmp_path / "bad.jsonl"
    path.write_text(first_line + "\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_malformed_records(tmp_path, world):
    path = save_dataset(tmp_path / "w.jsonl", world)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + ['{"type": "mystery"}']) + "\n")
    with pytest.raises(DatasetFormatError, match="unknown record type"):
        load_dataset(path)

    path.write_text("\n".join(lines[:2]) + "\n" + '{"type": "clip", "clip_id": "x"}\n')
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_missing_and_empty_files(tmp_path):
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "missing.jsonl")
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(DatasetFormatError):
        load_dataset(empty)


def test_bag_with_unknown_tubelet_is_rejected(tmp_path, world):
    tubelets = build_world_tubelets(world)
    bags = build_bags(world.clips, tubelets, WHOLE_CLIP, num_classes=world.config.num_classes)
    with pytest.raises(DatasetFormatError):
        save_dataset(tmp_path / "w.jsonl", world, tubelets[1:], bags)
