"""
Multiple Instance Learning core.

Bag aggregation (max, generalised mean, log-sum-exp), the bag-level binary
cross-entropy, the uncertainty-weighted loss exp(-v) * bce + v applied per class,
and the analytic backward pass through pooling, sigmoid and the log-variance
transform.

Arrays of instance outputs are shaped (num_instances, num_classes).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from mil_action.errors import MILError

logger = logging.getLogger("MilAction.Mil")

EPSILON = 1e-7


class PoolingKind(str, Enum):
    """Bag aggregation function."""
    MAX = "max"
    MEAN = "mean"
    LSE = "lse"


class LogVarTransform(str, Enum):
    """How the raw uncertainty output becomes v = log sigma^2."""
    SOFTPLUS = "softplus"   # v = log(1 + exp(x)) >= 0
    IDENTITY = "identity"   # v = x
    ZERO = "zero"           # v = 0, sigma^2 = 1


@dataclass(frozen=True)
class PoolingConfig:
    kind: PoolingKind = PoolingKind.MAX
    r: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PoolingKind(self.kind))
        if not (np.isfinite(self.r) and self.r > 0):
            raise MILError(f"Pooling sharpness r must be > 0, got {self.r}")


@dataclass(frozen=True)
class LossConfig:
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    use_uncertainty: bool = False
    log_var_transform: LogVarTransform = LogVarTransform.SOFTPLUS

    def __post_init__(self):
        object.__setattr__(self, "log_var_transform", LogVarTransform(self.log_var_transform))


@dataclass(frozen=True)
class BagLabel:
    """Binary multi-label vector of a bag; all-zero is a background bag."""

    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 1 or not np.all((y == 0) | (y == 1)):
            raise MILError(f"Bag label must be a 0/1 vector, got {self.y!r}")
        object.__setattr__(self, "y", y.astype(np.float64))

    @classmethod
    def from_classes(cls, classes, num_classes: int) -> "BagLabel":
        y = np.zeros(num_classes)
        for c in classes:
            y[int(c)] = 1.0
        return cls(y)

    @property
    def num_classes(self) -> int:
        return self.y.shape[0]

    def classes(self) -> List[int]:
        return [int(c) for c in np.flatnonzero(self.y)]

    def __eq__(self, other):
        return isinstance(other, BagLabel) and np.array_equal(self.y, other.y)

    def __hash__(self):
        return hash(tuple(self.y.tolist()))


@dataclass(frozen=True)
class InstancePrediction:
    """Per-class probabilities, log-variances and logits of one tubelet."""

    probs: np.ndarray
    log_var: np.ndarray
    logits: np.ndarray

    @classmethod
    def from_outputs(cls, logits: np.ndarray, log_var: np.ndarray) -> "InstancePrediction":
        logits = np.asarray(logits, dtype=np.float64)
        probs = np.clip(expit(logits), EPSILON, 1.0 - EPSILON)
        return cls(probs, np.asarray(log_var, dtype=np.float64), logits)


def log_var_forward(raw: np.ndarray, transform: LogVarTransform) -> np.ndarray:
    transform = LogVarTransform(transform)
    if transform is LogVarTransform.SOFTPLUS:
        return np.logaddexp(0.0, raw)
    if transform is LogVarTransform.IDENTITY:
        return np.array(raw, dtype=np.float64)
    return np.zeros_like(raw, dtype=np.float64)


def log_var_derivative(raw: np.ndarray, transform: LogVarTransform) -> np.ndarray:
    transform = LogVarTransform(transform)
    if transform is LogVarTransform.SOFTPLUS:
        return expit(raw)
    if transform is LogVarTransform.IDENTITY:
        return np.ones_like(raw, dtype=np.float64)
    return np.zeros_like(raw, dtype=np.float64)


def _check_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise MILError("empty bag")
    if not np.all(np.isfinite(probs)):
        raise MILError("Non-finite instance probability")
    return probs


def aggregate_probs(probs: np.ndarray, cfg: PoolingConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Aggregate instance probabilities of shape (N, C) into bag probabilities.

    Args:
        probs: Instance probabilities
        cfg: Pooling function and sharpness

    Returns:
        (bag_probs of shape (C,), per-class argmax instance index of shape (C,));
        argmax ties resolve to the lowest index
    """
    probs = _check_probs(probs)
    n = probs.shape[0]
    argmax = np.argmax(probs, axis=0)

    if cfg.kind is PoolingKind.MAX:
        bag = probs.max(axis=0)
    elif cfg.kind is PoolingKind.MEAN:
        with np.errstate(divide="ignore"):
            log_p = np.log(probs)
        bag = np.exp((logsumexp(cfg.r * log_p, axis=0) - np.log(n)) / cfg.r)
    else:
        bag = (logsumexp(cfg.r * probs, axis=0) - np.log(n)) / cfg.r
    return bag, argmax


def aggregate(preds: Sequence[InstancePrediction], cfg: PoolingConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Aggregate a list of instance predictions (see aggregate_probs)."""
    if not preds:
        raise MILError("empty bag")
    return aggregate_probs(np.stack([p.probs for p in preds]), cfg)


def pooling_weights(probs: np.ndarray, bag_probs: np.ndarray, argmax: np.ndarray,
                    cfg: PoolingConfig) -> np.ndarray:
    """
    Partial derivatives d g_l / d p_jl of the pooling function.

    Max pooling routes everything to the per-class argmax instance.
    """
    n, c = probs.shape
    if cfg.kind is PoolingKind.MAX:
        weights = np.zeros((n, c))
        weights[argmax, np.arange(c)] = 1.0
        return weights
    if cfg.kind is PoolingKind.MEAN:
        if cfg.r == 1.0:
            return np.full((n, c), 1.0 / n)
        # g^(1-r) p_j^(r-1) / N, evaluated in log space
        with np.errstate(divide="ignore", invalid="ignore"):
            log_ratio = np.log(probs) - np.log(bag_probs)[None, :]
        return np.exp((cfg.r - 1.0) * log_ratio) / n
    scaled = cfg.r * probs
    return np.exp(scaled - logsumexp(scaled, axis=0)[None, :])


def per_class_bce(bag_probs: np.ndarray, label: BagLabel) -> np.ndarray:
    """Per-class binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""
    p = np.clip(bag_probs, EPSILON, 1.0 - EPSILON)
    y = label.y
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def _bce_grad(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Derivative of the clamped cross-entropy w.r.t. the unclamped probability."""
    p = np.clip(probs, EPSILON, 1.0 - EPSILON)
    grad = -y / p + (1.0 - y) / (1.0 - p)
    inside = (probs > EPSILON) & (probs < 1.0 - EPSILON)
    return np.where(inside, grad, 0.0)


def bag_bce(bag_probs: np.ndarray, label: BagLabel) -> float:
    """Binary cross-entropy of one bag, summed over classes."""
    return float(np.sum(per_class_bce(bag_probs, label)))


def uncertainty_loss(bag_probs: np.ndarray, selected_log_var: np.ndarray, label: BagLabel) -> float:
    """
    Uncertainty-weighted bag loss: sum over classes of exp(-v_l) * bce_l + v_l.

    With v == 0 this equals bag_bce bit for bit.

    Raises:
        MILError: if any log-variance is non-finite
    """
    v = np.asarray(selected_log_var, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise MILError("Non-finite log-variance")
    terms = per_class_bce(bag_probs, label)
    return float(np.sum(np.exp(-v) * terms + v))


def _check_outputs(logits: np.ndarray, log_var_raw: np.ndarray, label: BagLabel):
    logits = np.asarray(logits, dtype=np.float64)
    log_var_raw = np.asarray(log_var_raw, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise MILError("empty bag")
    if logits.shape != log_var_raw.shape or logits.shape[1] != label.num_classes:
        raise MILError(
            f"Shape mismatch: logits {logits.shape}, log_var {log_var_raw.shape}, "
            f"classes {label.num_classes}"
        )
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(log_var_raw))):
        raise MILError("Non-finite network output")
    return logits, log_var_raw


def _select_log_var(log_var_raw: np.ndarray, argmax: np.ndarray, cfg: LossConfig):
    cols = np.arange(log_var_raw.shape[1])
    raw_selected = log_var_raw[argmax, cols]
    return raw_selected, log_var_forward(raw_selected, cfg.log_var_transform)


def bag_loss(logits: np.ndarray, log_var_raw: np.ndarray, label: BagLabel, cfg: LossConfig) -> float:
    """
    Loss of one bag from raw network outputs.

    Args:
        logits: Instance logits, shape (N, C)
        log_var_raw: Raw uncertainty outputs, shape (N, C)
        label: Bag label
        cfg: Pooling, uncertainty flag and log-variance transform

    Returns:
        bag_bce, or uncertainty_loss on the argmax-selected log-variance
    """
    logits, log_var_raw = _check_outputs(logits, log_var_raw, label)
    bag_probs, argmax = aggregate_probs(expit(logits), cfg.pooling)
    if not cfg.use_uncertainty:
        return bag_bce(bag_probs, label)
    _, v = _select_log_var(log_var_raw, argmax, cfg)
    return uncertainty_loss(bag_probs, v, label)


def loss_gradients(logits: np.ndarray, log_var_raw: np.ndarray, label: BagLabel,
                   cfg: LossConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact gradients of bag_loss w.r.t. every logit and raw uncertainty output.

    Returns:
        (d_logits, d_log_var_raw), both shaped like the inputs
    """
    logits, log_var_raw = _check_outputs(logits, log_var_raw, label)
    probs = expit(logits)
    bag_probs, argmax = aggregate_probs(probs, cfg.pooling)
    d_bag = _bce_grad(bag_probs, label.y)
    d_raw = np.zeros_like(log_var_raw)

    if cfg.use_uncertainty:
        raw_selected, v = _select_log_var(log_var_raw, argmax, cfg)
        weight = np.exp(-v)
        d_bag = weight * d_bag
        d_v = 1.0 - weight * per_class_bce(bag_probs, label)
        cols = np.arange(log_var_raw.shape[1])
        d_raw[argmax, cols] = d_v * log_var_derivative(raw_selected, cfg.log_var_transform)

    d_probs = d_bag[None, :] * pooling_weights(probs, bag_probs, argmax, cfg.pooling)
    return d_probs * probs * (1.0 - probs), d_raw


def instance_loss(logits: np.ndarray, log_var_raw: np.ndarray, label: BagLabel,
                  cfg: LossConfig) -> float:
    """
    No-MIL loss: every instance is supervised with the bag label.

    Per-instance losses (summed over classes) are averaged over the instances.
    Pooling settings in cfg are ignored.
    """
    logits, log_var_raw = _check_outputs(logits, log_var_raw, label)
    probs = expit(logits)
    terms = per_class_bce(probs, label)
    if cfg.use_uncertainty:
        v = log_var_forward(log_var_raw, cfg.log_var_transform)
        terms = np.exp(-v) * terms + v
    return float(np.mean(np.sum(terms, axis=1)))


def instance_loss_gradients(logits: np.ndarray, log_var_raw: np.ndarray, label: BagLabel,
                            cfg: LossConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of instance_loss, shaped like the inputs."""
    logits, log_var_raw = _check_outputs(logits, log_var_raw, label)
    n = logits.shape[0]
    probs = expit(logits)
    d_probs = np.broadcast_to(label.y, probs.shape)
    d_probs = _bce_grad(probs, d_probs)
    d_raw = np.zeros_like(log_var_raw)

    if cfg.use_uncertainty:
        v = log_var_forward(log_var_raw, cfg.log_var_transform)
        weight = np.exp(-v)
        d_probs = weight * d_probs
        d_v = 1.0 - weight * per_class_bce(probs, label)
        d_raw = d_v * log_var_derivative(log_var_raw, cfg.log_var_transform) / n

    d_probs = d_probs / n
    return d_probs * probs * (1.0 - probs), d_raw
