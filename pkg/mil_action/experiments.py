"""
Study runner: dataset generation, training, evaluation and result files.

A study expands into settings (a method variant, a bag/batch pair or a
sub-clip duration), each run once per seed. Every run writes a self-describing
JSON record; the aggregate table holds the median over seeds per setting.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mil_action.database import ResultsDatabase
from mil_action.dataset_file import load_dataset, save_dataset
from mil_action.errors import ConfigError
from mil_action.evaluation import (
    EvalConfig,
    frame_ap,
    predictions_at_keyframes,
    video_ap,
)
from mil_action.linking import LinkConfig, link_all, score_tubelets
from mil_action.mil import LogVarTransform, PoolingConfig, PoolingKind
from mil_action.model import TrainConfig, train
from mil_action.synthgen import (
    WHOLE_CLIP,
    SyntheticConfig,
    SyntheticWorld,
    action_tubes,
    bag_statistics,
    build_bags,
    build_instance_bags,
    build_world_tubelets,
    detector_statistics,
    generate,
    keyframe_ground_truth,
    mil_violation_rate,
)

logger = logging.getLogger("MilAction.Experiments")

STUDIES = ("single", "ablation", "bag_batch_sweep", "subclip_sweep")
FULLY_SUPERVISED = "fully-supervised"
UNCERTAINTY_SUFFIX = "+uncertainty"
BASE_VARIANTS = ("naive", "mil-max", "mil-mean", "mil-lse")

DEFAULT_SWEEPS = {
    "single": None,
    "ablation": ["naive", "mil-lse", "mil-mean", "mil-max", "mil-max+uncertainty", FULLY_SUPERVISED],
    "bag_batch_sweep": [[4, 4], [3, 5], [2, 8], [1, 16]],
    "subclip_sweep": [1, 5, 10, 30, 60, WHOLE_CLIP, "fs"],
}

RUN_RECORD_VERSION = 1


def is_valid_variant(name: str) -> bool:
    if name == FULLY_SUPERVISED:
        return True
    base = name[:-len(UNCERTAINTY_SUFFIX)] if name.endswith(UNCERTAINTY_SUFFIX) else name
    return base in BASE_VARIANTS


@dataclass(frozen=True)
class Setting:
    """One row of a study: what is trained and on which bags."""

    name: str
    variant: str
    train: TrainConfig
    subclip_seconds: Any = WHOLE_CLIP


@dataclass
class ExperimentSpec:
    dataset: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    frame_eval: Optional[EvalConfig] = None
    video_eval: Optional[EvalConfig] = None
    study: str = "single"
    sweep: Optional[List[Any]] = None
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: str = "results"
    variant: str = "mil-max+uncertainty"
    subclip_seconds: Any = WHOLE_CLIP
    test_fraction: float = 0.25
    workers: int = 1
    lse_r: float = 5.0
    mean_r: float = 1.0
    dataset_path: Optional[str] = None

    def __post_init__(self):
        C = self.dataset.num_classes
        if self.frame_eval is None:
            self.frame_eval = EvalConfig.frame(C)
        if self.video_eval is None:
            self.video_eval = EvalConfig.video(C)
        if self.sweep is None and self.study in DEFAULT_SWEEPS:
            default = DEFAULT_SWEEPS[self.study]
            self.sweep = list(default) if default is not None else None
        self.seeds = [int(s) for s in self.seeds]

        problems = []
        if self.study not in STUDIES:
            problems.append(f"study must be one of {STUDIES}, got {self.study!r}")
        if not self.seeds:
            problems.append("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            problems.append("seeds must be distinct")
        if not is_valid_variant(self.variant):
            problems.append(f"unknown variant {self.variant!r}")
        if not _valid_subclip(self.subclip_seconds):
            problems.append(f"subclip_seconds must be >= 1 or '{WHOLE_CLIP}'")
        if not 0.0 < self.test_fraction < 1.0:
            problems.append(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if self.lse_r <= 0 or self.mean_r <= 0:
            problems.append("pooling sharpness must be > 0")
        for cfg in (self.frame_eval, self.video_eval):
            if cfg.num_classes != C:
                problems.append("eval num_classes must match the dataset")
        if self.study in STUDIES:
            problems.extend(self._sweep_problems())
        if problems:
            raise ConfigError(problems)

    def _sweep_problems(self) -> List[str]:
        sweep = self.sweep or []
        if self.study == "single":
            return []
        if not sweep:
            return [f"study {self.study} needs sweep values"]
        if self.study == "ablation":
            return [f"unknown variant {v!r}" for v in sweep if not is_valid_variant(str(v))]
        if self.study == "bag_batch_sweep":
            return [f"bag/batch pair {v!r} must be two integers >= 1" for v in sweep
                    if not (isinstance(v, (list, tuple)) and len(v) == 2
                            and all(isinstance(x, int) and x >= 1 for x in v))]
        return [f"sub-clip value {v!r} must be >= 1, '{WHOLE_CLIP}' or 'fs'" for v in sweep
                if not (v == "fs" or _valid_subclip(v))]

    def variant_config(self, variant: str) -> TrainConfig:
        """Training configuration of a method variant."""
        uncertainty = variant.endswith(UNCERTAINTY_SUFFIX)
        base = variant[:-len(UNCERTAINTY_SUFFIX)] if uncertainty else variant
        if base == FULLY_SUPERVISED:
            return self.train.with_overrides(pooling=PoolingConfig(), use_uncertainty=False, mil=True)
        if base == "naive":
            return self.train.with_overrides(pooling=PoolingConfig(), use_uncertainty=uncertainty, mil=False)
        kind = PoolingKind(base.split("-", 1)[1])
        r = {PoolingKind.LSE: self.lse_r, PoolingKind.MEAN: self.mean_r}.get(kind, 1.0)
        return self.train.with_overrides(pooling=PoolingConfig(kind, r), use_uncertainty=uncertainty, mil=True)

    def settings(self) -> List[Setting]:
        if self.study == "single":
            return [Setting(self.variant, self.variant, self.variant_config(self.variant), self.subclip_seconds)]
        if self.study == "ablation":
            return [Setting(v, v, self.variant_config(v), self.subclip_seconds) for v in self.sweep]
        if self.study == "bag_batch_sweep":
            base = self.variant_config(self.variant)
            return [Setting(f"{b}x{t}", self.variant,
                            base.with_overrides(bags_per_batch=b, tubelets_per_bag=t),
                            self.subclip_seconds)
                    for b, t in self.sweep]
        out = []
        for n in self.sweep:
            if n == "fs":
                out.append(Setting("fs", FULLY_SUPERVISED, self.variant_config(FULLY_SUPERVISED)))
            else:
                out.append(Setting(str(n), self.variant, self.variant_config(self.variant), n))
        return out

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "train": train_config_to_dict(self.train),
            "link": asdict(self.link),
            "frame_eval": list(self.frame_eval.iou_thresholds),
            "video_eval": list(self.video_eval.iou_thresholds),
            "study": self.study,
            "sweep": self.sweep,
            "seeds": self.seeds,
            "output_dir": self.output_dir,
            "variant": self.variant,
            "subclip_seconds": self.subclip_seconds,
            "test_fraction": self.test_fraction,
            "workers": self.workers,
            "lse_r": self.lse_r,
            "mean_r": self.mean_r,
            "dataset_path": self.dataset_path,
        }


def _valid_subclip(value) -> bool:
    if value == WHOLE_CLIP:
        return True
    return isinstance(value, int) and not isinstance(value, bool) and value >= 1


def train_config_to_dict(cfg: TrainConfig) -> dict:
    data = asdict(cfg)
    data["pooling"] = cfg.pooling.kind.value
    data["r"] = cfg.pooling.r
    data["log_var_transform"] = cfg.log_var_transform.value
    return data


def split_clips(num_clips: int, test_fraction: float) -> Tuple[List[int], List[int]]:
    """Hold out the last clips for testing; both sides keep at least one clip."""
    if num_clips < 2:
        raise ConfigError(f"Need at least 2 clips to split, got {num_clips}")
    num_test = min(max(1, int(round(num_clips * test_fraction))), num_clips - 1)
    cut = num_clips - num_test
    return list(range(cut)), list(range(cut, num_clips))


def gen_dataset(cfg: SyntheticConfig, path) -> Path:
    """Generate a world with its tubelets and whole-clip bag index and write it as a dataset file."""
    world = generate(cfg)
    tubelets = build_world_tubelets(world)
    bags = build_bags(world.clips, tubelets, WHOLE_CLIP, num_classes=cfg.num_classes)
    return save_dataset(path, world, tubelets, bags)


@dataclass
class SplitData:
    """A world split into training and held-out clips, with their tubelets."""

    world: SyntheticWorld
    train_idx: List[int]
    test_idx: List[int]
    train_tubelets: list
    test_tubelets: list

    @property
    def num_classes(self) -> int:
        return self.world.config.num_classes

    @property
    def train_clips(self):
        return [self.world.clips[i] for i in self.train_idx]

    @property
    def test_clips(self):
        return [self.world.clips[i] for i in self.test_idx]


def prepare_data(spec: ExperimentSpec, seed: int) -> SplitData:
    """Generate (or load) the world of a seed and build tubelets for both splits."""
    stored = None
    if spec.dataset_path:
        contents = load_dataset(spec.dataset_path)
        world, stored = contents.world, contents.tubelets
        if world.config.num_classes != spec.dataset.num_classes:
            raise ConfigError(f"Dataset {spec.dataset_path} has {world.config.num_classes} classes, "
                              f"spec expects {spec.dataset.num_classes}")
    else:
        world = generate(replace(spec.dataset, seed=seed))
    train_idx, test_idx = split_clips(len(world.clips), spec.test_fraction)

    def tubelets_for(indices):
        if stored is None:
            return build_world_tubelets(world, indices)
        ids = {world.clips[i].clip_id for i in indices}
        return [t for t in stored if t.clip_id in ids]

    return SplitData(world, train_idx, test_idx, tubelets_for(train_idx), tubelets_for(test_idx))


def training_bags(data: SplitData, variant: str, subclip_seconds) -> list:
    if variant == FULLY_SUPERVISED:
        bags = build_instance_bags(data.train_clips, data.train_tubelets, num_classes=data.num_classes)
    else:
        bags = build_bags(data.train_clips, data.train_tubelets, subclip_seconds,
                          num_classes=data.num_classes)
    if not bags:
        raise ConfigError(f"Variant {variant} produced no training bags")
    return bags


def evaluate_model(spec: ExperimentSpec, params, data: SplitData,
                   log_var_transform=LogVarTransform.SOFTPLUS):
    """
    Frame AP and Video AP of a trained model on the held-out clips.

    Returns:
        (frame result, video result, tubes per class, identity swaps)
    """
    C = data.num_classes
    scored = score_tubelets(params, data.test_tubelets, log_var_transform)
    gt_frames = keyframe_ground_truth(data.test_clips)
    frame_result = frame_ap(predictions_at_keyframes(scored, gt_frames.keys(), C), gt_frames, spec.frame_eval)
    tubes, swaps = link_all(scored, C, spec.link)
    video_result = video_ap(tubes, action_tubes(data.test_clips, C), spec.video_eval)
    return frame_result, video_result, tubes, swaps


def run_single(spec: ExperimentSpec, setting: Setting, seed: int) -> dict:
    """
    Train and evaluate one setting for one seed.

    Returns:
        Run record (JSON-serialisable)
    """
    data = prepare_data(spec, seed)
    bags = training_bags(data, setting.variant, setting.subclip_seconds)
    tcfg = setting.train.with_overrides(seed=seed)
    params, log = train(bags, tcfg)
    frame_result, video_result, _, swaps = evaluate_model(spec, params, data, tcfg.log_var_transform)

    diagnostics = dict(bag_statistics(bags))
    diagnostics["mil_violation_rate"] = mil_violation_rate(bags, data.train_clips)
    detector = detector_statistics(data.world, clip_indices=data.train_idx)
    diagnostics["detector_recall"] = detector["recall"]
    diagnostics["detector_precision"] = detector["precision"]
    diagnostics["train_tubelets"] = len(data.train_tubelets)
    diagnostics["test_tubelets"] = len(data.test_tubelets)
    diagnostics["identity_swaps"] = len(swaps)
    diagnostics["final_loss"] = log.final_loss

    return {
        "version": RUN_RECORD_VERSION,
        "study": spec.study,
        "setting": setting.name,
        "variant": setting.variant,
        "seed": seed,
        "status": "ok",
        "config": {
            "spec": spec.to_dict(),
            "train": train_config_to_dict(tcfg),
            "subclip_seconds": setting.subclip_seconds,
        },
        "frame_ap": frame_result.to_record(),
        "video_ap": video_result.to_record(),
        "diagnostics": diagnostics,
    }


def _run_job(job) -> Tuple[Optional[dict], Optional[str]]:
    spec, setting, seed = job
    try:
        return run_single(spec, setting, seed), None
    except Exception as e:
        logging.getLogger("MilAction.Experiments").error(
            f"Run {setting.name} seed {seed} failed: {e}", exc_info=True)
        return None, f"{type(e).__name__}: {e}"


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, indent=2, allow_nan=True) + "\n"


def atomic_write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def _metric_row(record: dict) -> dict:
    video = record["video_ap"]["mean_ap"]
    return {
        "setting": record["setting"],
        "variant": record["variant"],
        "seed": record["seed"],
        "frame_map": record["frame_ap"]["mean_ap"].get("0.5"),
        "video_map_02": video.get("0.2"),
        "video_map_05": video.get("0.5"),
        "mil_violation_rate": record["diagnostics"]["mil_violation_rate"],
    }


METRIC_COLUMNS = ["frame_map", "video_map_02", "video_map_05", "mil_violation_rate"]


def aggregate(records: Sequence[dict], order: Sequence[str]) -> pd.DataFrame:
    """
    Median over seeds per setting, with the per-seed values kept as a column.

    Settings keep the study order. When a fully-supervised row exists, each
    mean-AP median is also given as a fraction of that row's median.
    """
    columns = ["setting", "variant", "num_seeds"] + METRIC_COLUMNS + ["seeds"]
    if not records:
        return pd.DataFrame(columns=columns)
    runs = pd.DataFrame([_metric_row(r) for r in records])
    rows = []
    for name in order:
        group = runs[runs["setting"] == name].sort_values("seed")
        if group.empty:
            continue
        row = {"setting": name, "variant": group["variant"].iloc[0], "num_seeds": len(group)}
        for col in METRIC_COLUMNS:
            row[col] = float(group[col].median())
        row["seeds"] = " ".join(
            f"{s}:{v:.4f}" for s, v in zip(group["seed"], group["video_map_05"]))
        rows.append(row)
    table = pd.DataFrame(rows, columns=columns)

    fs = table[table["variant"] == FULLY_SUPERVISED]
    if not fs.empty:
        for col in ("frame_map", "video_map_02", "video_map_05"):
            ref = fs[col].iloc[0]
            table[f"{col}_of_fs"] = table[col] / ref if ref else np.nan
    return table


@dataclass
class StudyResult:
    records: List[dict]
    table: pd.DataFrame
    failures: List[Tuple[str, int, str]]

    @property
    def ok(self) -> bool:
        return not self.failures


class StudyRunner:
    """Runs every (setting, seed) job of a spec and writes the result files."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.output_dir = Path(spec.output_dir)
        self.runs_dir = self.output_dir / "runs"
        self.logger = logging.getLogger("MilAction.Experiments.Runner")

    def run_path(self, setting: Setting, seed: int) -> Path:
        return self.runs_dir / f"{setting.name}_seed{seed}.json"

    def _execute(self, pending: List[Tuple[Setting, int]]) -> List[Tuple[Optional[dict], Optional[str]]]:
        jobs = [(self.spec, setting, seed) for setting, seed in pending]
        if self.spec.workers > 1 and len(jobs) > 1:
            self.logger.info(f"Running {len(jobs)} jobs on {self.spec.workers} workers")
            with ProcessPoolExecutor(max_workers=self.spec.workers) as pool:
                return list(pool.map(_run_job, jobs))
        return [_run_job(job) for job in jobs]

    def run(self) -> StudyResult:
        spec = self.spec
        self.output_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.output_dir / "resolved_config.json",
                          json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
        database = ResultsDatabase(self.output_dir / "results.db")

        settings = spec.settings()
        records: Dict[Tuple[str, int], dict] = {}
        pending = []
        for setting in settings:
            for seed in spec.seeds:
                path = self.run_path(setting, seed)
                if database.has_run(spec.study, setting.name, seed):
                    self.logger.info(f"Keeping completed run {setting.name} seed {seed}")
                    record = database.get_record(spec.study, setting.name, seed)
                    if not path.exists():
                        atomic_write_text(path, dumps_record(record))
                    records[(setting.name, seed)] = record
                elif path.exists():
                    # run file without a database row, e.g. the database was removed
                    self.logger.info(f"Restoring completed run {path.name} into the database")
                    record = json.loads(path.read_text(encoding="utf-8"))
                    database.insert_run(record)
                    records[(setting.name, seed)] = record
                else:
                    pending.append((setting, seed))

        failures = []
        for (setting, seed), (record, error) in zip(pending, self._execute(pending)):
            if record is None:
                failures.append((setting.name, seed, error))
                database.insert_failure(spec.study, setting.name, setting.variant, seed, error)
                continue
            atomic_write_text(self.run_path(setting, seed), dumps_record(record))
            database.insert_run(record)
            records[(setting.name, seed)] = record
            self.logger.info(
                f"Run {setting.name} seed {seed}: frame mAP {record['frame_ap']['mean_ap'].get('0.5', 0):.4f}, "
                f"video mAP@0.5 {record['video_ap']['mean_ap'].get('0.5', 0):.4f}"
            )

        ordered = [records[(s.name, seed)] for s in settings for seed in spec.seeds
                   if (s.name, seed) in records]
        table = aggregate(ordered, [s.name for s in settings])
        atomic_write_text(self.output_dir / "aggregate.csv", table.to_csv(index=False, float_format="%.6f"))
        atomic_write_text(self.output_dir / "aggregate.txt", table.to_string(index=False) + "\n")

        if failures:
            self.logger.error(f"{len(failures)} of {len(settings) * len(spec.seeds)} runs failed")
        return StudyResult(ordered, table, failures)


def run(spec: ExperimentSpec) -> int:
    """Run a study; 0 when every run succeeded, 2 otherwise."""
    result = StudyRunner(spec).run()
    return 0 if result.ok else 2
