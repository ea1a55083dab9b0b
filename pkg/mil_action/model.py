"""
Desk-scale tubelet classifier trained with Multiple Instance Learning.

A per-class linear logistic head and a per-class linear uncertainty head over
tubelet features, uniform bag sampling, and momentum SGD over mini-batches of
bags. The same code path trains the naive baseline (mil=False), where every
sampled tubelet is supervised directly with its bag label.
"""

import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from mil_action.errors import ConfigError, ModelError
from mil_action.geometry import Tubelet
from mil_action.mil import (
    BagLabel,
    InstancePrediction,
    LogVarTransform,
    LossConfig,
    PoolingConfig,
    PoolingKind,
    aggregate_probs,
    bag_loss as mil_bag_loss,
    instance_loss,
    instance_loss_gradients,
    log_var_forward,
    loss_gradients,
)

logger = logging.getLogger("MilAction.Model")

CHECKPOINT_FORMAT = "mil-action-checkpoint"
CHECKPOINT_VERSION = 1

_PARAM_FIELDS = ("W_cls", "b_cls", "W_unc", "b_unc")


@dataclass
class ModelParams:
    """Classifier and uncertainty heads: logits = W_cls x + b_cls, raw v = W_unc x + b_unc."""

    W_cls: np.ndarray
    b_cls: np.ndarray
    W_unc: np.ndarray
    b_unc: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int, feature_dim: int) -> "ModelParams":
        return cls(np.zeros((num_classes, feature_dim)), np.zeros(num_classes),
                   np.zeros((num_classes, feature_dim)), np.zeros(num_classes))

    @classmethod
    def initialize(cls, num_classes: int, feature_dim: int, rng: np.random.Generator,
                   scale: float = 0.01) -> "ModelParams":
        params = cls.zeros(num_classes, feature_dim)
        params.W_cls = rng.normal(0.0, scale, size=(num_classes, feature_dim))
        return params

    @property
    def num_classes(self) -> int:
        return self.W_cls.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W_cls.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(*(getattr(self, f).copy() for f in _PARAM_FIELDS))

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return tuple(getattr(self, f) for f in _PARAM_FIELDS)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass(frozen=True)
class Bag:
    """A set of tubelet instances with one bag-level label."""

    instances: Tuple[Tubelet, ...]
    label: BagLabel
    source_clip: str = ""
    window: Tuple[int, int] = (0, 0)
    bag_id: int = 0

    def __post_init__(self):
        if not isinstance(self.instances, tuple):
            object.__setattr__(self, "instances", tuple(self.instances))

    def __len__(self) -> int:
        return len(self.instances)

    def features(self) -> np.ndarray:
        return np.stack([t.feature for t in self.instances])


@dataclass
class TrainConfig:
    bags_per_batch: int = 4
    tubelets_per_bag: int = 4
    learning_rate: float = 0.1
    momentum: float = 0.9
    epochs: int = 200
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    use_uncertainty: bool = False
    log_var_transform: LogVarTransform = LogVarTransform.SOFTPLUS
    mil: bool = True
    lr_schedule: str = "cosine"
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.bags_per_batch < 1:
            problems.append(f"bags_per_batch must be >= 1, got {self.bags_per_batch}")
        if self.tubelets_per_bag < 1:
            problems.append(f"tubelets_per_bag must be >= 1, got {self.tubelets_per_bag}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr_schedule not in ("cosine", "constant"):
            problems.append(f"lr_schedule must be cosine or constant, got {self.lr_schedule}")
        if problems:
            raise ConfigError(problems)
        self.log_var_transform = LogVarTransform(self.log_var_transform)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.pooling, self.use_uncertainty, self.log_var_transform)

    def with_overrides(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class TrainingLog:
    epoch_losses: List[float] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else math.nan


class ForwardResult(NamedTuple):
    bag_probs: np.ndarray
    selected_log_var: np.ndarray
    per_instance: List[InstancePrediction]


def _outputs(params: ModelParams, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != params.feature_dim:
        raise ModelError(
            f"Feature dimension {features.shape[1]} does not match model dimension "
            f"{params.feature_dim}"
        )
    logits = features @ params.W_cls.T + params.b_cls
    raw = features @ params.W_unc.T + params.b_unc
    return logits, raw


def sample_bag(bag: Bag, cap: int, rng: np.random.Generator) -> Bag:
    """
    Uniformly sample min(cap, |bag|) instances without replacement.

    The bag-level label is kept unchanged. Chosen instances keep their bag order.
    """
    if len(bag) == 0:
        raise ModelError("Cannot sample from an empty bag")
    if cap < 1:
        raise ModelError(f"Sampling cap must be >= 1, got {cap}")
    n = len(bag)
    if cap >= n:
        return bag
    chosen = np.sort(rng.choice(n, size=cap, replace=False))
    return replace(bag, instances=tuple(bag.instances[i] for i in chosen))


def predict_tubelets(params: ModelParams, tubelets: Sequence[Tubelet],
                     log_var_transform: LogVarTransform = LogVarTransform.SOFTPLUS
                     ) -> List[InstancePrediction]:
    """Per-tubelet class probabilities and log-variances, without pooling."""
    if len(tubelets) == 0:
        return []
    logits, raw = _outputs(params, np.stack([t.feature for t in tubelets]))
    v = log_var_forward(raw, log_var_transform)
    return [InstancePrediction.from_outputs(logits[i], v[i]) for i in range(len(tubelets))]


def forward(params: ModelParams, bag: Bag, pooling: PoolingConfig,
            log_var_transform: LogVarTransform = LogVarTransform.SOFTPLUS) -> ForwardResult:
    """
    Instance predictions, their aggregation, and the per-class log-variance of the
    instance selected by the per-class argmax.
    """
    if len(bag) == 0:
        raise ModelError("Cannot run forward on an empty bag")
    per_instance = predict_tubelets(params, bag.instances, log_var_transform)
    probs = np.stack([p.probs for p in per_instance])
    bag_probs, argmax = aggregate_probs(probs, pooling)
    log_var = np.stack([p.log_var for p in per_instance])
    selected = log_var[argmax, np.arange(params.num_classes)]
    return ForwardResult(bag_probs, selected, per_instance)


def bag_loss(params: ModelParams, bag: Bag, loss_cfg: LossConfig, mil: bool = True) -> float:
    """Scalar training loss of one bag under the current parameters."""
    logits, raw = _outputs(params, bag.features())
    if mil:
        return mil_bag_loss(logits, raw, bag.label, loss_cfg)
    return instance_loss(logits, raw, bag.label, loss_cfg)


def bag_gradients(params: ModelParams, bag: Bag, loss_cfg: LossConfig,
                  mil: bool = True) -> Tuple[float, ModelParams]:
    """
    Loss of one bag and its gradient w.r.t. every parameter block.

    Returns:
        (loss, gradients packed as a ModelParams)
    """
    features = bag.features()
    logits, raw = _outputs(params, features)
    if mil:
        loss = mil_bag_loss(logits, raw, bag.label, loss_cfg)
        d_logits, d_raw = loss_gradients(logits, raw, bag.label, loss_cfg)
    else:
        loss = instance_loss(logits, raw, bag.label, loss_cfg)
        d_logits, d_raw = instance_loss_gradients(logits, raw, bag.label, loss_cfg)
    grads = ModelParams(d_logits.T @ features, d_logits.sum(axis=0),
                        d_raw.T @ features, d_raw.sum(axis=0))
    return loss, grads


class MILTrainer:
    """
    Momentum SGD over shuffled mini-batches of down-sampled bags.

    Per-bag gradients are reduced in batch order and averaged, so the effective
    step size does not depend on bags_per_batch.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.loss_config = config.loss_config()
        self.logger = logging.getLogger("MilAction.Model.Trainer")

    def _learning_rate(self, step: int, total_steps: int) -> float:
        base = self.config.learning_rate
        if self.config.lr_schedule == "constant" or total_steps <= 1:
            return base
        return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))

    def _check_dataset(self, dataset: Sequence[Bag]) -> Tuple[int, int]:
        if not dataset:
            raise ModelError("Cannot train on an empty dataset")
        num_classes = dataset[0].label.num_classes
        feature_dim = dataset[0].instances[0].feature.shape[0] if len(dataset[0]) else 0
        for bag in dataset:
            if len(bag) == 0:
                raise ModelError(f"Bag {bag.bag_id} from {bag.source_clip} is empty")
            if bag.label.num_classes != num_classes:
                raise ModelError("Bags disagree on the number of classes")
            for t in bag.instances:
                if t.feature.shape != (feature_dim,):
                    raise ModelError("Tubelet features disagree on dimension")
        return num_classes, feature_dim

    def fit(self, dataset: Sequence[Bag],
            params: Optional[ModelParams] = None) -> Tuple[ModelParams, TrainingLog]:
        """
        Train on a list of bags.

        Args:
            dataset: Training bags, all with the same C and D
            params: Optional starting parameters (copied)

        Returns:
            (trained parameters, training log)
        """
        cfg = self.config
        num_classes, feature_dim = self._check_dataset(dataset)
        rng = np.random.default_rng(cfg.seed)
        if params is None:
            params = ModelParams.initialize(num_classes, feature_dim, rng, cfg.init_scale)
        else:
            params = params.copy()
        velocity = ModelParams.zeros(num_classes, feature_dim)

        n = len(dataset)
        steps_per_epoch = math.ceil(n / cfg.bags_per_batch)
        total_steps = cfg.epochs * steps_per_epoch
        log = TrainingLog()
        step = 0

        self.logger.info(
            f"Training on {n} bags: epochs={cfg.epochs}, batch={cfg.bags_per_batch}, "
            f"cap={cfg.tubelets_per_bag}, pooling={cfg.pooling.kind.value}, "
            f"uncertainty={cfg.use_uncertainty}, mil={cfg.mil}"
        )

        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            epoch_total = 0.0
            for start in range(0, n, cfg.bags_per_batch):
                batch = order[start:start + cfg.bags_per_batch]
                grad_sum = ModelParams.zeros(num_classes, feature_dim)
                loss_sum = 0.0
                for idx in batch:
                    sampled = sample_bag(dataset[idx], cfg.tubelets_per_bag, rng)
                    loss, grads = bag_gradients(params, sampled, self.loss_config, mil=cfg.mil)
                    loss_sum += loss
                    for name in _PARAM_FIELDS:
                        acc = getattr(grad_sum, name)
                        acc += getattr(grads, name)

                lr = self._learning_rate(step, total_steps)
                scale = 1.0 / len(batch)
                for name in _PARAM_FIELDS:
                    v = getattr(velocity, name)
                    v *= cfg.momentum
                    v += lr * scale * getattr(grad_sum, name)
                    p = getattr(params, name)
                    p -= v

                log.step_losses.append(loss_sum / len(batch))
                epoch_total += loss_sum
                step += 1

            log.epoch_losses.append(epoch_total / n)
            self.logger.debug(f"Epoch {epoch + 1}/{cfg.epochs}: loss={log.epoch_losses[-1]:.6f}")

            if not params.is_finite():
                raise ModelError(f"Parameters diverged at epoch {epoch + 1}")

        self.logger.info(f"Training finished: final loss {log.final_loss:.6f}")
        return params, log


def train(dataset: Sequence[Bag], cfg: TrainConfig) -> Tuple[ModelParams, TrainingLog]:
    """Train a fresh model; fully deterministic given cfg.seed."""
    return MILTrainer(cfg).fit(dataset)


def _loss_config_to_dict(cfg: LossConfig) -> dict:
    return {
        "pooling": cfg.pooling.kind.value,
        "r": cfg.pooling.r,
        "use_uncertainty": cfg.use_uncertainty,
        "log_var_transform": cfg.log_var_transform.value,
    }


def _loss_config_from_dict(data: dict) -> LossConfig:
    return LossConfig(PoolingConfig(PoolingKind(data["pooling"]), float(data["r"])),
                      bool(data["use_uncertainty"]), LogVarTransform(data["log_var_transform"]))


def save_checkpoint(path, params: ModelParams, loss_cfg: LossConfig) -> Path:
    """
    Write a versioned checkpoint (.npz) holding C, D, the four parameter blocks
    and the loss configuration.

    Returns:
        Path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "num_classes": params.num_classes,
        "feature_dim": params.feature_dim,
        "loss": _loss_config_to_dict(loss_cfg),
    }
    buffer = io.BytesIO()
    np.savez(buffer, meta=np.array(json.dumps(meta, sort_keys=True)),
             **{name: getattr(params, name) for name in _PARAM_FIELDS})
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buffer.getvalue())
    tmp.replace(path)
    logger.info(f"Checkpoint saved to {path}")
    return path


def load_checkpoint(path) -> Tuple[ModelParams, LossConfig]:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        ModelError: if the file is missing, of another format or version
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            arrays = {name: np.array(data[name]) for name in _PARAM_FIELDS}
    except (OSError, KeyError, ValueError) as e:
        raise ModelError(f"Unreadable checkpoint {path}: {e}") from e

    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"Unsupported checkpoint {path}: {meta.get('format')} v{meta.get('version')}")
    params = ModelParams(**arrays)
    if (params.num_classes, params.feature_dim) != (meta["num_classes"], meta["feature_dim"]):
        raise ModelError(f"Checkpoint {path} shape does not match its header")
    return params, _loss_config_from_dict(meta["loss"])
