"""
Configuration management for mil_action.

Handles loading, merging, validating and saving the experiment configuration.
Values resolve as defaults <- command-line overrides <- config file.
"""

import copy
import json
import logging
import os
import threading
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Optional

from mil_action.errors import ConfigError, MilActionError
from mil_action.evaluation import EvalConfig
from mil_action.experiments import ExperimentSpec, train_config_to_dict
from mil_action.linking import LinkConfig
from mil_action.logger import VALID_LOG_LEVELS
from mil_action.mil import PoolingConfig
from mil_action.model import TrainConfig
from mil_action.synthgen import WHOLE_CLIP, SyntheticConfig

logger = logging.getLogger("MilAction.Config")


def _deep_merge(base: Dict, updates: Dict, prefix: str = "") -> list:
    """Merge updates into base in place; returns the unknown keys."""
    unknown = []
    for key, value in updates.items():
        if key not in base:
            unknown.append(prefix + key)
        elif isinstance(base[key], dict) and isinstance(value, dict):
            unknown.extend(_deep_merge(base[key], value, f"{prefix}{key}."))
        else:
            base[key] = value
    return unknown


def _expand_dotted(updates: Dict) -> Dict:
    nested: Dict = {}
    for key, value in updates.items():
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


class ConfigManager:
    """Thread-safe configuration manager."""

    DEFAULT_CONFIG = {
        "log_level": "INFO",
        "log_dir": "data/logs",
        "dataset": SyntheticConfig().to_dict(),
        "train": train_config_to_dict(TrainConfig()),
        "link": asdict(LinkConfig()),
        "eval": {
            "frame_thresholds": [0.5],
            "video_thresholds": [0.2, 0.5],
        },
        "experiment": {
            "study": "single",
            "variant": "mil-max+uncertainty",
            "sweep": None,
            "seeds": [0],
            "output_dir": "results",
            "subclip_seconds": WHOLE_CLIP,
            "test_fraction": 0.25,
            "workers": 1,
            "lse_r": 5.0,
            "mean_r": 1.0,
            "dataset_path": None,
        },
    }

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Dict] = None):
        """
        Initialize configuration manager.

        Args:
            config_path: JSON configuration file; None uses defaults and overrides only
            overrides: Flag values keyed by dotted path (e.g. "train.epochs")

        Raises:
            ConfigError: on an unreadable file, unknown keys or invalid values
        """
        self.config_path = Path(config_path) if config_path else None
        self.overrides = dict(overrides or {})
        self.lock = threading.Lock()
        self.config = self._load_config()

    def _load_config(self) -> Dict:
        config = copy.deepcopy(self.DEFAULT_CONFIG)
        unknown = _deep_merge(config, _expand_dotted(self.overrides))

        if self.config_path is not None:
            try:
                with open(self.config_path, 'r', encoding='utf-8') as f:
                    user_config = json.load(f)
            except FileNotFoundError as e:
                raise ConfigError(f"Config file not found: {self.config_path}") from e
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"Error parsing config file {self.config_path}: {e}") from e
            if not isinstance(user_config, dict):
                raise ConfigError(f"Config file {self.config_path} must hold a JSON object")
            unknown.extend(_deep_merge(config, user_config))
            logger.info(f"Configuration loaded from {self.config_path}")

        if unknown:
            raise ConfigError([f"unknown configuration key {k!r}" for k in unknown])
        return self._validate_config(config)

    def _validate_config(self, config: Dict) -> Dict:
        """
        Validate configuration values.

        An unknown log level falls back to INFO; anything else that does not
        build a valid ExperimentSpec raises ConfigError.
        """
        if config.get("log_level") not in VALID_LOG_LEVELS:
            logger.warning(f"Unknown log level {config.get('log_level')!r}, using INFO")
            config["log_level"] = "INFO"
        self._build_spec(config)
        return config

    @staticmethod
    def _build_spec(config: Dict) -> ExperimentSpec:
        try:
            dataset = SyntheticConfig.from_dict(config["dataset"])
            train_cfg = dict(config["train"])
            pooling = PoolingConfig(train_cfg.pop("pooling"), float(train_cfg.pop("r")))
            train = TrainConfig(pooling=pooling, **train_cfg)
            link = LinkConfig(**config["link"])
            C = dataset.num_classes
            frame_eval = EvalConfig(C, tuple(config["eval"]["frame_thresholds"]))
            video_eval = EvalConfig(C, tuple(config["eval"]["video_thresholds"]))
            exp = config["experiment"]
            return ExperimentSpec(
                dataset=dataset, train=train, link=link,
                frame_eval=frame_eval, video_eval=video_eval,
                study=exp["study"], sweep=exp["sweep"], seeds=list(exp["seeds"]),
                output_dir=exp["output_dir"], variant=exp["variant"],
                subclip_seconds=exp["subclip_seconds"], test_fraction=float(exp["test_fraction"]),
                workers=int(exp["workers"]), lse_r=float(exp["lse_r"]), mean_r=float(exp["mean_r"]),
                dataset_path=exp["dataset_path"],
            )
        except ConfigError:
            raise
        except (MilActionError, TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value.

        Args:
            key: Configuration key, dotted for nested sections
            default: Default value if key not found

        Returns:
            Configuration value
        """
        with self.lock:
            node = self.config
            for part in key.split("."):
                if not isinstance(node, dict) or part not in node:
                    return default
                node = node[part]
            return copy.deepcopy(node)

    def get_all(self) -> Dict:
        with self.lock:
            return copy.deepcopy(self.config)

    def update(self, updates: Dict):
        """
        Update several values at once (dotted keys allowed).

        Raises:
            ConfigError: if the result is invalid; the current configuration is kept
        """
        with self.lock:
            new_config = copy.deepcopy(self.config)
            unknown = _deep_merge(new_config, _expand_dotted(updates))
            if unknown:
                raise ConfigError([f"unknown configuration key {k!r}" for k in unknown])
            self.config = self._validate_config(new_config)
            logger.info(f"Configuration updated: {list(updates.keys())}")

    def set(self, key: str, value: Any):
        self.update({key: value})

    def save(self, path: Optional[str] = None) -> Path:
        """
        Save configuration to file (atomically).

        Returns:
            Path written
        """
        with self.lock:
            target = Path(path) if path else self.config_path
            if target is None:
                raise ConfigError("No path to save the configuration to")
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_name(target.name + ".tmp")
            with open(tmp, 'w', encoding='utf-8') as f:
                json.dump(self.config, f, indent=2, sort_keys=True)
                f.write("\n")
            os.replace(tmp, target)
            logger.info(f"Configuration saved to {target}")
            return target

    def export_to_dict(self) -> Dict:
        return self.get_all()

    def to_experiment_spec(self) -> ExperimentSpec:
        """Typed experiment spec built from the resolved configuration."""
        with self.lock:
            return self._build_spec(self.config)
