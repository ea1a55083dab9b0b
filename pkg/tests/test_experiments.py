import json
from pathlib import Path

import numpy as np
import pytest

from mil_action import experiments
from mil_action.config import ConfigManager
from mil_action.database import ResultsDatabase
from mil_action.errors import ConfigError
from mil_action.experiments import (
    FULLY_SUPERVISED,
    ExperimentSpec,
    StudyRunner,
    aggregate,
    dumps_record,
    gen_dataset,
    prepare_data,
    run,
    run_single,
    split_clips,
    training_bags,
)
from mil_action.mil import PoolingKind
from mil_action.model import TrainConfig
from mil_action.synthgen import WHOLE_CLIP, SyntheticConfig, mil_violation_rate

REPO_ROOT = Path(__file__).resolve().parent.parent

TINY_DATASET = SyntheticConfig(num_clips=4, frames_per_clip=48, num_classes=2, feature_dim=4,
                               action_duration_range=(16, 32), actions_per_actor_range=(1, 1),
                               fp_rate=0.2)


def _spec(tmp_path, **changes):
    values = dict(dataset=TINY_DATASET, train=TrainConfig(epochs=3), seeds=[0],
                  output_dir=str(tmp_path / "out"))
    values.update(changes)
    return ExperimentSpec(**values)


def test_split_clips():
    assert split_clips(8, 0.25) == ([0, 1, 2, 3, 4, 5], [6, 7])
    assert split_clips(2, 0.9) == ([0], [1])
    with pytest.raises(ConfigError):
        split_clips(1, 0.5)


class TestExperimentSpec:
    def test_variants(self, tmp_path):
        spec = _spec(tmp_path, lse_r=4.0)
        lse = spec.variant_config("mil-lse")
        assert (lse.pooling.kind, lse.pooling.r, lse.mil, lse.use_uncertainty) == (PoolingKind.LSE, 4.0, True, False)
        naive = spec.variant_config("naive")
        assert not naive.mil
        assert spec.variant_config("mil-max+uncertainty").use_uncertainty
        assert spec.variant_config("mil-mean").pooling.kind is PoolingKind.MEAN
        fs = spec.variant_config(FULLY_SUPERVISED)
        assert fs.pooling.kind is PoolingKind.MAX and not fs.use_uncertainty

    def test_default_sweeps(self, tmp_path):
        ablation = _spec(tmp_path, study="ablation")
        assert [s.name for s in ablation.settings()] == [
            "naive", "mil-lse", "mil-mean", "mil-max", "mil-max+uncertainty", FULLY_SUPERVISED]
        sweep = _spec(tmp_path, study="bag_batch_sweep").settings()
        assert [s.name for s in sweep] == ["4x4", "3x5", "2x8", "1x16"]
        assert (sweep[3].train.bags_per_batch, sweep[3].train.tubelets_per_bag) == (1, 16)
        subclip = _spec(tmp_path, study="subclip_sweep").settings()
        assert [s.subclip_seconds for s in subclip[:-1]] == [1, 5, 10, 30, 60, WHOLE_CLIP]
        assert subclip[-1].variant == FULLY_SUPERVISED

    @pytest.mark.parametrize("changes", [
        {"study": "everything"},
        {"seeds": []},
        {"seeds": [1, 1]},
        {"variant": "mil-median"},
        {"subclip_seconds": 0},
        {"test_fraction": 1.0},
        {"workers": 0},
        {"study": "bag_batch_sweep", "sweep": [[0, 4]]},
        {"study": "subclip_sweep", "sweep": ["half"]},
    ])
    def test_invalid(self, tmp_path, changes):
        with pytest.raises(ConfigError):
            _spec(tmp_path, **changes)


def test_prepare_data_and_bags(tmp_path):
    spec = _spec(tmp_path)
    data = prepare_data(spec, seed=0)
    assert (data.train_idx, data.test_idx) == ([0, 1, 2], [3])
    assert all(t.clip_id != "clip_0003" for t in data.train_tubelets)
    assert all(t.clip_id == "clip_0003" for t in data.test_tubelets)
    weak = training_bags(data, "mil-max", WHOLE_CLIP)
    assert len(weak) <= 3
    strong = training_bags(data, FULLY_SUPERVISED, WHOLE_CLIP)
    assert len(strong) == len(data.train_tubelets)


def test_ablation_preset_violates_mil_on_about_a_third_of_bags():
    spec = ConfigManager(str(REPO_ROOT / "configs" / "ablation.json")).to_experiment_spec()
    rates = []
    for seed in spec.seeds:
        data = prepare_data(spec, seed)
        bags = training_bags(data, "mil-max", spec.subclip_seconds)
        rates.append(mil_violation_rate(bags, data.train_clips))
    assert 0.2 <= float(np.mean(rates)) <= 0.4
    assert all(0.05 <= r <= 0.55 for r in rates)


def test_prepare_data_from_dataset_file(tmp_path):
    path = gen_dataset(TINY_DATASET, tmp_path / "tiny.jsonl")
    spec = _spec(tmp_path, dataset_path=str(path))
    loaded = prepare_data(spec, seed=123)
    generated = prepare_data(_spec(tmp_path), seed=TINY_DATASET.seed)
    assert loaded.train_tubelets == generated.train_tubelets
    assert loaded.test_tubelets == generated.test_tubelets

    other = SyntheticConfig(**{**TINY_DATASET.to_dict(), "num_classes": 3})
    with pytest.raises(ConfigError):
        prepare_data(_spec(tmp_path, dataset_path=str(path), dataset=other), seed=0)


def test_run_single_record(tmp_path):
    spec = _spec(tmp_path)
    setting = spec.settings()[0]
    record = run_single(spec, setting, 0)
    assert record["status"] == "ok"
    assert (record["study"], record["setting"], record["seed"]) == ("single", "mil-max+uncertainty", 0)
    assert set(record["video_ap"]["mean_ap"]) == {"0.2", "0.5"}
    assert 0.0 <= record["frame_ap"]["mean_ap"]["0.5"] <= 1.0
    for key in ("mil_violation_rate", "detector_recall", "final_loss", "identity_swaps"):
        assert key in record["diagnostics"]
    assert record["config"]["train"]["seed"] == 0
    json.loads(dumps_record(record))
    assert dumps_record(run_single(spec, setting, 0)) == dumps_record(record)


def _fake_record(setting, variant, seed, value):
    return {
        "setting": setting, "variant": variant, "seed": seed,
        "frame_ap": {"mean_ap": {"0.5": value}},
        "video_ap": {"mean_ap": {"0.2": value, "0.5": value}},
        "diagnostics": {"mil_violation_rate": 0.0},
    }


def test_aggregate_medians_and_relative_columns():
    records = [_fake_record("mil-max", "mil-max", s, v) for s, v in [(0, 0.2), (1, 0.6), (2, 0.4)]]
    records += [_fake_record(FULLY_SUPERVISED, FULLY_SUPERVISED, 0, 0.8)]
    table = aggregate(records, ["mil-max", FULLY_SUPERVISED])
    assert list(table["setting"]) == ["mil-max", FULLY_SUPERVISED]
    assert table.loc[0, "video_map_05"] == pytest.approx(0.4)
    assert table.loc[0, "num_seeds"] == 3
    assert table.loc[0, "video_map_05_of_fs"] == pytest.approx(0.5)
    assert table.loc[0, "seeds"] == "0:0.2000 1:0.6000 2:0.4000"
    assert aggregate([], []).empty


def test_study_writes_results_and_skips_completed_runs(tmp_path):
    spec = _spec(tmp_path, study="ablation", sweep=["mil-max", "naive"], seeds=[0, 1])
    assert run(spec) == 0
    out = tmp_path / "out"
    for name in ("resolved_config.json", "aggregate.csv", "aggregate.txt", "results.db"):
        assert (out / name).exists()
    runs = sorted(p.name for p in (out / "runs").glob("*.json"))
    assert runs == ["mil-max_seed0.json", "mil-max_seed1.json", "naive_seed0.json", "naive_seed1.json"]
    assert ResultsDatabase(str(out / "results.db")).get_stats()["completed_runs"] == 4

    marker = out / "runs" / "naive_seed1.json"
    record = json.loads(marker.read_text())
    record["diagnostics"]["final_loss"] = -1.0
    marker.write_text(dumps_record(record))
    result = StudyRunner(spec).run()
    assert result.ok
    assert json.loads(marker.read_text())["diagnostics"]["final_loss"] == -1.0
    assert list(result.table["setting"]) == ["mil-max", "naive"]


def test_study_resumes_from_the_database(tmp_path, monkeypatch):
    spec = _spec(tmp_path, study="ablation", sweep=["mil-max"], seeds=[0, 1])
    first = StudyRunner(spec).run()
    assert first.ok
    out = tmp_path / "out"

    def never(*args):
        raise AssertionError("completed run executed again")

    monkeypatch.setattr(experiments, "run_single", never)
    (out / "runs" / "mil-max_seed1.json").unlink()
    again = StudyRunner(spec).run()
    assert again.ok
    assert (out / "runs" / "mil-max_seed1.json").exists()
    assert [(r["seed"], r["video_ap"]["mean_ap"]["0.5"]) for r in again.records] == \
        [(r["seed"], r["video_ap"]["mean_ap"]["0.5"]) for r in first.records]

    (out / "results.db").unlink()
    restored = StudyRunner(spec).run()
    assert restored.ok
    database = ResultsDatabase(str(out / "results.db"))
    assert database.has_run("ablation", "mil-max", 0) and database.has_run("ablation", "mil-max", 1)
    assert database.get_stats()["completed_runs"] == 2


def test_failed_runs_are_reported_and_retried(tmp_path, monkeypatch):
    spec = _spec(tmp_path, study="ablation", sweep=["mil-max", "naive"])
    original = experiments.run_single

    def flaky(spec_, setting, seed):
        if setting.name == "naive":
            raise RuntimeError("out of luck")
        return original(spec_, setting, seed)

    monkeypatch.setattr(experiments, "run_single", flaky)
    result = StudyRunner(spec).run()
    assert not result.ok
    assert result.failures[0][:2] == ("naive", 0)
    assert run(spec) == 2
    database = ResultsDatabase(str(tmp_path / "out" / "results.db"))
    assert database.get_stats()["failed_runs"] == 1

    monkeypatch.setattr(experiments, "run_single", original)
    assert run(spec) == 0
    assert database.get_stats() == {"completed_runs": 2, "failed_runs": 0, "studies": 1,
                                    "db_path": str(tmp_path / "out" / "results.db")}
