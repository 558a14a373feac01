"""Class weighting, class-weighted focal loss and a small dense network trainer."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import _kernels
from ._io import atomic_open
from .errors import (
    CheckpointError,
    DimensionError,
    DivergenceError,
    ValidationError,
    ZeroProbabilityError,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


# --------------------------------------------------------------------------
# class weights and focal loss
# --------------------------------------------------------------------------


def compute_class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse relative frequency: ``w_i = N / N_i`` with ``N = sum(counts)``."""
    counts = np.asarray(counts)
    if counts.ndim != 1 or counts.size == 0:
        raise ValidationError("counts must be a non-empty vector")
    if np.any(counts <= 0):
        missing = [int(i) for i in np.flatnonzero(counts <= 0)]
        raise ValidationError(f"class(es) {missing} have no samples")
    counts = counts.astype(np.float64)
    return counts.sum() / counts


@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0
    class_weights: Optional[tuple] = None  # None means all ones

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")
        if self.class_weights is not None:
            w = tuple(float(v) for v in self.class_weights)
            if not all(v > 0 and math.isfinite(v) for v in w):
                raise ValidationError("class weights must be positive and finite")
            object.__setattr__(self, "class_weights", w)

    def weights(self, n_classes: int) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(n_classes)
        if len(self.class_weights) != n_classes:
            raise DimensionError(
                f"{len(self.class_weights)} class weights for {n_classes} classes"
            )
        return np.asarray(self.class_weights)

    @classmethod
    def inverse_frequency(cls, labels, n_classes: int, gamma: float = 2.0) -> "FocalLossConfig":
        counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
        return cls(gamma, tuple(compute_class_weights(counts)))


def focal_loss(probs_true, labels, config: FocalLossConfig = FocalLossConfig()) -> float:
    """Mean class-weighted focal loss given each sample's true-class probability.

    ``probs_true[i]`` is the probability assigned to ``labels[i]``.
    """
    p = np.asarray(probs_true, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape or p.ndim != 1 or p.size == 0:
        raise DimensionError("probs_true and labels must be equal-length non-empty vectors")
    if np.any(p == 0):
        raise ZeroProbabilityError(f"true-class probability is 0 at sample {int(np.flatnonzero(p == 0)[0])}")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValidationError("true-class probabilities must lie in (0, 1]")
    n_classes = int(y.max()) + 1 if config.class_weights is None else len(config.class_weights)
    if y.min() < 0 or y.max() >= n_classes:
        raise ValidationError("label outside the class-weight vector")
    w = config.weights(n_classes)[y]
    return float(-np.mean(w * (1.0 - p) ** config.gamma * np.log(p)))


def focal_loss_from_logits(logits, labels, config: FocalLossConfig = FocalLossConfig()) -> float:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    loss, _, _ = _kernels.focal_loss_grad(logits, labels, config.weights(logits.shape[1]), config.gamma)
    return loss


def focal_loss_gradient(logits, labels, config: FocalLossConfig = FocalLossConfig()) -> np.ndarray:
    """Gradient of the mean focal loss of ``softmax(logits)`` w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not np.all(np.isfinite(logits)):
        raise ValidationError("non-finite logits")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError("one label per logit row required")
    _, grad, _ = _kernels.focal_loss_grad(logits, labels, config.weights(logits.shape[1]), config.gamma)
    if not np.all(np.isfinite(grad)):
        raise ValidationError("non-finite gradient")
    return grad


def oversample_schedule(labels, seed, epoch_len: Optional[int] = None) -> np.ndarray:
    """Indices drawn with replacement, each sample weighted by its class weight.

    Every class is drawn equally often in expectation. ``seed`` may be an int
    or a ``numpy.random.Generator``.
    """
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise ValidationError("cannot oversample an empty label set")
    counts = np.bincount(y)
    w = np.zeros(counts.size)
    present = counts > 0
    w[present] = y.size / counts[present]
    p = w[y]
    p /= p.sum()
    rng = np.random.default_rng(seed)
    return rng.choice(y.size, size=y.size if epoch_len is None else int(epoch_len), replace=True, p=p)


# --------------------------------------------------------------------------
# dense network
# --------------------------------------------------------------------------


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class MlpModel:
    """Dense ReLU network with a softmax (C outputs) or sigmoid (1 output) head.

    ``weights[l]`` has shape ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
    """

    layer_dims: list
    weights: list
    biases: list
    output: str = "softmax"
    seed: Optional[int] = None
    train_config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise DimensionError(f"bad architecture {self.layer_dims}")
        if self.output not in ("softmax", "sigmoid"):
            raise ValidationError(f"output must be softmax or sigmoid, got {self.output!r}")
        if self.output == "sigmoid" and self.layer_dims[-1] != 1:
            raise DimensionError("sigmoid head needs exactly one output")
        if self.output == "softmax" and self.layer_dims[-1] < 2:
            raise DimensionError("softmax head needs at least two outputs")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise DimensionError("one weight matrix and bias per layer required")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != want or b.shape != (want[1],):
                raise DimensionError(
                    f"layer {i}: weights {w.shape} / bias {b.shape} do not chain {want}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i}: non-finite parameter")

    @classmethod
    def init(cls, layer_dims, output="softmax", seed=0) -> "MlpModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_dims), weights, biases, output, seed)

    @classmethod
    def zeros(cls, layer_dims, output="softmax") -> "MlpModel":
        return cls(
            list(layer_dims),
            [np.zeros((a, b)) for a, b in zip(layer_dims[:-1], layer_dims[1:])],
            [np.zeros(b) for b in layer_dims[1:]],
            output,
        )

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        """Number of classes the head scores (2 for a sigmoid head)."""
        return 2 if self.output == "sigmoid" else self.layer_dims[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.output,
            self.seed,
            dict(self.train_config),
        )

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_inputs:
            raise DimensionError(f"model expects {self.n_inputs} inputs, got {x.shape[-1]}")
        return x

    def _activations(self, x):
        acts = [x]
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = z if i == last else np.maximum(z, 0.0)
            acts.append(a)
        return acts

    def logits(self, x) -> np.ndarray:
        x = self._check_input(x)
        return self._activations(np.atleast_2d(x))[-1].reshape(*x.shape[:-1], -1)

    def class_logits(self, x) -> np.ndarray:
        """Logits over ``n_classes``; a sigmoid head maps to ``[0, z]``."""
        z = np.atleast_2d(self.logits(x))
        if self.output == "sigmoid":
            return np.concatenate([np.zeros_like(z), z], axis=1)
        return z

    def forward(self, x) -> np.ndarray:
        """Class probabilities (softmax) or the scalar sigmoid output per row."""
        z = self.logits(x)
        if not np.all(np.isfinite(z)):
            raise ValidationError("non-finite logits")
        if self.output == "sigmoid":
            return _sigmoid(z[..., 0])
        return _softmax(z)

    def predict_proba(self, x) -> np.ndarray:
        """(n, n_classes) probability matrix for either head type."""
        return _softmax(self.class_logits(x))

    def backward(self, x, dlogits):
        """Parameter gradients given dL/d(final-layer output)."""
        acts = self._activations(x)
        grads_w, grads_b = [None] * len(self.weights), [None] * len(self.weights)
        delta = dlogits
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0)
        return grads_w, grads_b

    def loss_and_grads(self, x, labels, weights, gamma):
        """Focal loss over a batch plus parameter gradients and the floor-hit count."""
        z = self._activations(x)[-1]
        if self.output == "sigmoid":
            z2 = np.concatenate([np.zeros_like(z), z], axis=1)
            loss, g2, n_floor = _kernels.focal_loss_grad(z2, labels, weights, gamma)
            dz = g2[:, 1:]
        else:
            loss, dz, n_floor = _kernels.focal_loss_grad(z, labels, weights, gamma)
        gw, gb = self.backward(x, dz)
        return loss, gw, gb, n_floor

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "arch": list(self.layer_dims),
            "output": self.output,
            "seed": self.seed,
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(self.weights, self.biases)],
            "train_config": self.train_config,
        }

    @classmethod
    def from_json(cls, obj) -> "MlpModel":
        if not isinstance(obj, dict) or "schema" not in obj:
            raise CheckpointError("not a model checkpoint")
        if obj["schema"] != SCHEMA_VERSION:
            raise CheckpointError(f"schema {obj['schema']!r} unsupported (expected {SCHEMA_VERSION})")
        try:
            arch = [int(d) for d in obj["arch"]]
            layers = obj["layers"]
            weights = [np.asarray(l["w"], dtype=np.float64) for l in layers]
            biases = [np.asarray(l["b"], dtype=np.float64) for l in layers]
            output = obj["output"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from None
        for i, w in enumerate(weights):
            if w.ndim != 2:
                raise DimensionError(f"layer {i}: weight matrix is not 2-D")
        for i in range(len(weights) - 1):
            if weights[i].shape[1] != weights[i + 1].shape[0]:
                raise DimensionError(
                    f"layer chain broken: layer {i} emits {weights[i].shape[1]}, "
                    f"layer {i + 1} expects {weights[i + 1].shape[0]}"
                )
        return cls(arch, weights, biases, output, obj.get("seed"), obj.get("train_config") or {})


def save_model(model: MlpModel, path) -> None:
    # json float repr is the shortest string that round-trips the binary value
    with atomic_open(path) as f:
        json.dump(model.to_json(), f)
        f.write("\n")


def load_model(path) -> MlpModel:
    try:
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc.msg})") from None
    return MlpModel.from_json(obj)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    oversample: bool = True
    focal: FocalLossConfig = FocalLossConfig()

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


class TrainResult(NamedTuple):
    model: MlpModel
    loss_trace: list  # full-set loss at init, then after each epoch
    floor_hits: int


def _full_loss(model, x, y, weights, gamma):
    z = model.class_logits(x)
    loss, _, _ = _kernels.focal_loss_grad(z, y, weights, gamma)
    return loss


def train(x, y, layer_dims, config: TrainConfig = TrainConfig(), output: str = "softmax",
          init: Optional[MlpModel] = None) -> TrainResult:
    """Mini-batch gradient descent with momentum on the class-weighted focal loss.

    Deterministic for a given ``config.seed``: the same generator seeds the
    initialization and then every epoch's shuffle or oversampling draw.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("training set must be a non-empty (n, d) array")
    if y.shape != (x.shape[0],):
        raise DimensionError("one label per training row required")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite training features")
    rng = np.random.default_rng(config.seed)
    if init is None:
        model = MlpModel.init(layer_dims, output, seed=rng)
        model.seed = config.seed
    else:
        model = init.copy()
    if model.n_inputs != x.shape[1]:
        raise DimensionError(f"model expects {model.n_inputs} inputs, data has {x.shape[1]}")
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ValidationError(f"labels must lie in [0, {model.n_classes})")
    weights = config.focal.weights(model.n_classes)
    gamma = config.focal.gamma

    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    trace = [_full_loss(model, x, y, weights, gamma)]
    floor_hits = 0
    n = x.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = oversample_schedule(y, rng, n) if config.oversample else rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, gw, gb, hits = model.loss_and_grads(x[idx], y[idx], weights, gamma)
            floor_hits += hits
            if not math.isfinite(loss):
                raise DivergenceError(epoch)
            for i in range(len(model.weights)):
                vel_w[i] = config.momentum * vel_w[i] - config.learning_rate * gw[i]
                vel_b[i] = config.momentum * vel_b[i] - config.learning_rate * gb[i]
                model.weights[i] += vel_w[i]
                model.biases[i] += vel_b[i]
        epoch_loss = _full_loss(model, x, y, weights, gamma)
        if not math.isfinite(epoch_loss):
            raise DivergenceError(epoch)
        trace.append(epoch_loss)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    if floor_hits:
        log.warning("true-class probability fell below %g in %d batch rows", _kernels.P_FLOOR, floor_hits)
    model.train_config = config.to_json()
    return TrainResult(model, trace, floor_hits)
