"""
Command-line entry point for mil_action.

Subcommands:
    gen-data  generate a synthetic world and write the dataset file
    train     train one variant and write a checkpoint
    eval      evaluate a checkpoint on the held-out clips
    study     run a study (single, ablation, bag_batch_sweep, subclip_sweep)

Exit codes: 0 success, 1 invalid spec or arguments, 2 runtime failure.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

from mil_action import __version__
from mil_action.config import ConfigManager
from mil_action.errors import ConfigError
from mil_action.experiments import (
    STUDIES,
    atomic_write_text,
    evaluate_model,
    gen_dataset,
    prepare_data,
    run,
    training_bags,
)
from mil_action.linking import write_tubes
from mil_action.logger import VALID_LOG_LEVELS, setup_logging
from mil_action.model import load_checkpoint, save_checkpoint, train
from mil_action.synthgen import WHOLE_CLIP

EXIT_OK = 0
EXIT_INVALID_SPEC = 1
EXIT_RUNTIME_FAILURE = 2


class _ArgumentParser(argparse.ArgumentParser):
    """Reports argument errors as ConfigError so they map to exit code 1."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _subclip(value: str):
    if value == WHOLE_CLIP:
        return value
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1 or '{WHOLE_CLIP}', got {value!r}")
    return n


def _seeds(value: str) -> List[int]:
    try:
        return [int(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


# flag destination -> dotted configuration key
FLAG_KEYS = {
    "num_clips": "dataset.num_clips",
    "frames_per_clip": "dataset.frames_per_clip",
    "num_classes": "dataset.num_classes",
    "feature_dim": "dataset.feature_dim",
    "fn_rate": "dataset.fn_rate",
    "fp_rate": "dataset.fp_rate",
    "occlusion_rate": "dataset.occlusion_rate",
    "jitter_std": "dataset.jitter_std",
    "feature_noise_std": "dataset.feature_noise_std",
    "dataset_seed": "dataset.seed",
    "epochs": "train.epochs",
    "bags_per_batch": "train.bags_per_batch",
    "tubelets_per_bag": "train.tubelets_per_bag",
    "learning_rate": "train.learning_rate",
    "momentum": "train.momentum",
    "link_iou": "link.link_iou_threshold",
    "max_gap": "link.max_gap",
    "study": "experiment.study",
    "variant": "experiment.variant",
    "seeds": "experiment.seeds",
    "output_dir": "experiment.output_dir",
    "subclip": "experiment.subclip_seconds",
    "test_fraction": "experiment.test_fraction",
    "workers": "experiment.workers",
    "dataset": "experiment.dataset_path",
    "log_level": "log_level",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="mil-action",
                             description="Uncertainty-aware MIL for weakly supervised action detection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (overrides flags)")
    common.add_argument("--log-level", dest="log_level", choices=VALID_LOG_LEVELS)
    common.add_argument("--log-dir", dest="log_dir", help="log directory ('' disables the log file)")

    data = common.add_argument_group("dataset")
    data.add_argument("--num-clips", type=int)
    data.add_argument("--frames-per-clip", type=int)
    data.add_argument("--num-classes", type=int)
    data.add_argument("--feature-dim", type=int)
    data.add_argument("--fn-rate", type=float)
    data.add_argument("--fp-rate", type=float)
    data.add_argument("--occlusion-rate", type=float)
    data.add_argument("--jitter-std", type=float)
    data.add_argument("--feature-noise-std", type=float)
    data.add_argument("--dataset-seed", type=int)
    data.add_argument("--dataset", help="load this dataset file instead of generating")

    training = common.add_argument_group("training")
    training.add_argument("--epochs", type=int)
    training.add_argument("--bags-per-batch", type=int)
    training.add_argument("--tubelets-per-bag", type=int)
    training.add_argument("--learning-rate", type=float)
    training.add_argument("--momentum", type=float)
    training.add_argument("--variant", help="naive, mil-max, mil-mean, mil-lse, "
                                            "any of these with +uncertainty, or fully-supervised")
    training.add_argument("--subclip", type=_subclip, help=f"bag window in keyframes or '{WHOLE_CLIP}'")

    evaluation = common.add_argument_group("evaluation")
    evaluation.add_argument("--link-iou", type=float)
    evaluation.add_argument("--max-gap", type=int)
    evaluation.add_argument("--test-fraction", type=float)

    experiment = common.add_argument_group("experiment")
    experiment.add_argument("--seeds", type=_seeds, help="comma-separated seeds")
    experiment.add_argument("--output-dir")
    experiment.add_argument("--workers", type=int)

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="generate a dataset file")
    gen.add_argument("path", help="dataset file to write")

    tr = sub.add_parser("train", parents=[common], help="train one variant")
    tr.add_argument("--checkpoint", help="checkpoint path (default <output-dir>/model.npz)")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint path (default <output-dir>/model.npz)")
    ev.add_argument("--tubes", help="also write the linked tubes to this file")

    st = sub.add_parser("study", parents=[common], help="run a study")
    st.add_argument("--study", choices=STUDIES)

    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict:
    overrides = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    return overrides


class MilActionApp:
    """Resolves configuration and logging once, then runs one subcommand."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = ConfigManager(args.config, overrides_from_args(args))
        self.logger = setup_logging(self.config, args.log_dir)
        self.spec = self.config.to_experiment_spec()
        self.output_dir = Path(self.spec.output_dir)

    def _checkpoint_path(self) -> Path:
        return Path(self.args.checkpoint) if self.args.checkpoint else self.output_dir / "model.npz"

    def gen_data(self) -> int:
        path = gen_dataset(self.spec.dataset, self.args.path)
        print(f"Dataset written to {path}")
        return EXIT_OK

    def train(self) -> int:
        spec = self.spec
        seed = spec.seeds[0]
        data = prepare_data(spec, seed)
        bags = training_bags(data, spec.variant, spec.subclip_seconds)
        tcfg = spec.variant_config(spec.variant).with_overrides(seed=seed)
        params, log = train(bags, tcfg)
        path = save_checkpoint(self._checkpoint_path(), params, tcfg.loss_config())
        print(f"Trained {spec.variant} on {len(bags)} bags: final loss {log.final_loss:.6f}")
        print(f"Checkpoint written to {path}")
        return EXIT_OK

    def evaluate(self) -> int:
        spec = self.spec
        params, loss_cfg = load_checkpoint(self._checkpoint_path())
        data = prepare_data(spec, spec.seeds[0])
        frame_result, video_result, tubes, swaps = evaluate_model(
            spec, params, data, loss_cfg.log_var_transform)
        print(frame_result.format_table())
        print()
        print(video_result.format_table())

        record = {
            "checkpoint": str(self._checkpoint_path()),
            "config": spec.to_dict(),
            "frame_ap": frame_result.to_record(),
            "video_ap": video_result.to_record(),
            "identity_swaps": len(swaps),
        }
        atomic_write_text(self.output_dir / "eval.json",
                          json.dumps(record, sort_keys=True, indent=2) + "\n")
        if self.args.tubes:
            write_tubes(self.args.tubes, tubes)
        return EXIT_OK

    def study(self) -> int:
        status = run(self.spec)
        print(f"Results written to {self.output_dir}")
        return status

    def dispatch(self) -> int:
        commands = {
            "gen-data": self.gen_data,
            "train": self.train,
            "eval": self.evaluate,
            "study": self.study,
        }
        return commands[self.args.command]()


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        app = MilActionApp(args)
    except ConfigError as e:
        print(f"Invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID_SPEC

    try:
        return app.dispatch()
    except ConfigError as e:
        app.logger.error(f"Invalid configuration: {e}")
        return EXIT_INVALID_SPEC
    except Exception as e:
        app.logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_RUNTIME_FAILURE


if __name__ == "__main__":
    sys.exit(main())
