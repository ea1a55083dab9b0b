import json

import pytest

from mil_action.dataset_file import load_dataset
from mil_action.main import EXIT_INVALID_SPEC, EXIT_OK, EXIT_RUNTIME_FAILURE, build_parser, main

TINY_FLAGS = ["--num-clips", "4", "--frames-per-clip", "48", "--num-classes", "2",
              "--feature-dim", "4", "--epochs", "2", "--log-dir", ""]


def _tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({"dataset": {"action_duration_range": [16, 32]}}))
    return ["--config", str(path)]


def test_gen_data(tmp_path):
    target = tmp_path / "data" / "tiny.jsonl"
    status = main(["gen-data", str(target), *TINY_FLAGS, *_tiny_config(tmp_path)])
    assert status == EXIT_OK
    contents = load_dataset(target)
    assert len(contents.world.clips) == 4
    assert contents.bags is not None


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "out"
    common = [*TINY_FLAGS, *_tiny_config(tmp_path), "--output-dir", str(out)]
    assert main(["train", *common]) == EXIT_OK
    assert (out / "model.npz").exists()

    tubes = tmp_path / "tubes.jsonl"
    assert main(["eval", *common, "--tubes", str(tubes)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "frame AP" in printed and "video AP" in printed
    record = json.loads((out / "eval.json").read_text())
    assert set(record["video_ap"]["mean_ap"]) == {"0.2", "0.5"}
    assert tubes.exists()


def test_study(tmp_path):
    out = tmp_path / "study"
    status = main(["study", "--study", "ablation", *TINY_FLAGS, *_tiny_config(tmp_path),
                   "--output-dir", str(out), "--seeds", "0"])
    assert status == EXIT_OK
    assert (out / "aggregate.csv").exists()
    assert len(list((out / "runs").glob("*.json"))) == 6


@pytest.mark.parametrize("argv", [
    ["train", "--epochs", "0", "--log-dir", ""],
    ["study", "--study", "unknown"],
    ["train", "--subclip", "zero", "--log-dir", ""],
    ["train", "--config", "/nonexistent/config.json", "--log-dir", ""],
    ["frobnicate"],
    [],
])
def test_invalid_arguments_exit_with_one(argv, capsys):
    assert main(argv) == EXIT_INVALID_SPEC
    assert capsys.readouterr().err


def test_missing_checkpoint_is_a_runtime_failure(tmp_path):
    argv = ["eval", *TINY_FLAGS, *_tiny_config(tmp_path), "--checkpoint", str(tmp_path / "none.npz")]
    assert main(argv) == EXIT_RUNTIME_FAILURE


def test_flags_map_to_config_keys():
    args = build_parser().parse_args(["train", "--epochs", "5", "--seeds", "1,2", "--subclip", "whole"])
    assert (args.epochs, args.seeds, args.subclip) == (5, [1, 2], "whole")
    args = build_parser().parse_args(["train", "--subclip", "10"])
    assert args.subclip == 10
    args = build_parser().parse_args(["gen-data", "world.jsonl", "--occlusion-rate", "0.3"])
    assert args.occlusion_rate == 0.3
