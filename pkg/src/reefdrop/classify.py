"""Classifier backends producing patch-grid and whole-frame probabilities.

Three backends share one small interface:

* ``MockBackend`` - deterministic pseudo-random distributions keyed on
  ``(seed, frame_id, patch_index)``, or a constant distribution.
* ``PredictionsBackend`` - lookup into probabilities exported by an external model.
* ``NativeBackend`` - an :class:`~reefdrop.learn.MlpModel` applied to feature vectors.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._io import iter_jsonl
from .core import (
    DEFAULT_GRID,
    N_PATCH_CLASSES,
    ClassDistribution,
    FrameRecord,
    GridSpec,
    PatchClass,
    validate_prob_rows,
)
from .errors import BackendError, DimensionError, ValidationError
from .learn import MlpModel


@dataclass(frozen=True, eq=False)
class GridClassification:
    """One frame's patch-grid probabilities (row-major) and argmax classes."""

    frame_id: str
    grid: GridSpec
    probs: np.ndarray

    def __post_init__(self):
        probs = validate_prob_rows(self.probs, f"frame {self.frame_id}")
        if probs.shape[0] != self.grid.n_patches:
            raise DimensionError(
                f"frame {self.frame_id}: {probs.shape[0]} patches for grid {self.grid}"
            )
        probs = probs.copy()
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        pred = np.argmax(probs, axis=1)
        pred.setflags(write=False)
        object.__setattr__(self, "predicted", pred)

    @property
    def distributions(self) -> list[ClassDistribution]:
        return [ClassDistribution(tuple(row)) for row in self.probs]

    @property
    def predicted_classes(self) -> list[PatchClass]:
        return [PatchClass(int(c)) for c in self.predicted]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.predicted, minlength=N_PATCH_CLASSES)


@dataclass(frozen=True)
class FrameClassification:
    frame_id: str
    deploy_prob: float

    def __post_init__(self):
        if not (0.0 <= self.deploy_prob <= 1.0):
            raise ValidationError(f"deploy_prob {self.deploy_prob} outside [0, 1]")

    @property
    def no_deploy_prob(self) -> float:
        return 1.0 - self.deploy_prob


class Backend:
    """Base class. Subclasses override whichever of the two outputs they provide."""

    supports_patches = False
    supports_frames = False
    # the stream harness may share instances that declare this
    concurrent_read_safe = True

    def patch_probs(self, frame: FrameRecord, grid: GridSpec) -> np.ndarray:
        raise BackendError(f"{type(self).__name__} does not produce patch distributions")

    def frame_deploy_prob(self, frame: FrameRecord) -> float:
        raise BackendError(f"{type(self).__name__} does not produce whole-frame decisions")


def classify_patches(backend: Backend, frame: FrameRecord, grid: GridSpec = DEFAULT_GRID) -> GridClassification:
    if not backend.supports_patches:
        raise BackendError(f"{type(backend).__name__} does not produce patch distributions")
    return GridClassification(frame.frame_id, grid, backend.patch_probs(frame, grid))


def classify_frame(backend: Backend, frame: FrameRecord) -> FrameClassification:
    if not backend.supports_frames:
        raise BackendError(f"{type(backend).__name__} does not produce whole-frame decisions")
    return FrameClassification(frame.frame_id, float(backend.frame_deploy_prob(frame)))


def softmax_forward(model: MlpModel, features) -> ClassDistribution:
    """Distribution from a softmax model's logits, computed with max subtraction."""
    if model.output != "softmax":
        raise ValidationError("softmax_forward needs a softmax-output model")
    z = np.asarray(model.logits(np.asarray(features, dtype=np.float64)), dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError("softmax_forward takes a single feature vector")
    if not np.all(np.isfinite(z)):
        raise ValidationError("non-finite logits")
    return ClassDistribution.from_logits(z)


# --------------------------------------------------------------------------
# mock
# --------------------------------------------------------------------------


def _unit_floats(seed: int, frame_id: str, patch_index: int, k: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x00{frame_id}\x00{patch_index}".encode(), digest_size=8 * k).digest()
    ints = np.frombuffer(digest, dtype="<u8")
    # (0, 1], never exactly zero so -log is finite
    return (ints >> np.uint64(11)).astype(np.float64) * 2.0 ** -53 + 2.0 ** -54


class MockBackend(Backend):
    """Deterministic stand-in for a trained classifier.

    Each patch gets a flat-Dirichlet draw derived from a hash of
    ``(seed, frame_id, patch_index)``; ``constant`` overrides that with a fixed
    distribution for every patch.
    """

    supports_patches = True
    supports_frames = True

    def __init__(self, seed: int = 0, constant=None, deploy_prob: Optional[float] = None):
        self.seed = int(seed)
        self.constant = None if constant is None else np.asarray(ClassDistribution(tuple(constant)))
        self.deploy_prob = deploy_prob

    def patch_probs(self, frame, grid):
        if self.constant is not None:
            return np.tile(self.constant, (grid.n_patches, 1))
        out = np.empty((grid.n_patches, N_PATCH_CLASSES))
        for i in range(grid.n_patches):
            g = -np.log(_unit_floats(self.seed, frame.frame_id, i, N_PATCH_CLASSES))
            out[i] = g / g.sum()
        return out

    def frame_deploy_prob(self, frame):
        if self.deploy_prob is not None:
            return self.deploy_prob
        return float(_unit_floats(self.seed, frame.frame_id, -1, 1)[0])


# --------------------------------------------------------------------------
# predictions file
# --------------------------------------------------------------------------


class PredictionsBackend(Backend):
    """Pure lookup into per-patch probabilities and/or per-frame deploy probabilities."""

    def __init__(self, patch_probs: Optional[dict] = None, frame_probs: Optional[dict] = None):
        self._patches = patch_probs or {}
        self._frames = frame_probs or {}
        self.supports_patches = bool(self._patches)
        self.supports_frames = bool(self._frames)

    @classmethod
    def load(cls, path) -> "PredictionsBackend":
        """Read a JSONL predictions file in patch mode, frame mode, or both."""
        patches: dict = {}
        frames: dict = {}
        for lineno, obj in iter_jsonl(path):
            try:
                fid = obj["frame_id"]
                if "probs" in obj:
                    probs = np.asarray(ClassDistribution(tuple(obj["probs"])))
                    patches.setdefault(fid, {})[int(obj["patch_index"])] = probs
                elif "deploy_prob" in obj:
                    frames[fid] = float(FrameClassification(fid, float(obj["deploy_prob"])).deploy_prob)
                else:
                    raise ValidationError("needs 'probs' or 'deploy_prob'")
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
        return cls(patches, frames)

    @property
    def frame_ids(self) -> list[str]:
        return list(dict.fromkeys([*self._patches, *self._frames]))

    def patch_probs(self, frame, grid):
        entries = self._patches.get(frame.frame_id)
        if entries is None:
            raise BackendError(f"no patch predictions for frame {frame.frame_id!r}")
        missing = [i for i in range(grid.n_patches) if i not in entries]
        if missing:
            raise BackendError(f"frame {frame.frame_id!r} missing patch predictions {missing}")
        extra = sorted(set(entries) - set(range(grid.n_patches)))
        if extra:
            raise BackendError(f"frame {frame.frame_id!r} has patch indices {extra} outside grid {grid}")
        return np.stack([entries[i] for i in range(grid.n_patches)])

    def frame_deploy_prob(self, frame):
        try:
            return self._frames[frame.frame_id]
        except KeyError:
            raise BackendError(f"no deploy_prob for frame {frame.frame_id!r}") from None


# --------------------------------------------------------------------------
# native head over feature vectors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchFeatures:
    frame_id: str
    patch_index: Optional[int]
    values: np.ndarray


def load_features(path) -> list[PatchFeatures]:
    """Read a feature JSONL file; every vector must share one dimensionality."""
    out = []
    dim = None
    for lineno, obj in iter_jsonl(path):
        try:
            values = np.asarray(obj["values"], dtype=np.float64)
            pi = obj.get("patch_index")
            feat = PatchFeatures(str(obj["frame_id"]), None if pi is None else int(pi), values)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise ValidationError(f"{path}:{lineno}: values must be a finite vector")
        if dim is None:
            dim = values.size
        elif values.size != dim:
            raise DimensionError(f"{path}:{lineno}: dimension {values.size}, expected {dim}")
        out.append(feat)
    return out


class NativeBackend(Backend):
    """Apply an in-process model to feature vectors looked up by frame and patch.

    ``patch_model`` must be a 3-class softmax head; ``frame_model`` is either a
    sigmoid head or a 2-class softmax head whose class 1 is Deploy.
    """

    def __init__(self, features, patch_model: Optional[MlpModel] = None,
                 frame_model: Optional[MlpModel] = None):
        self._features = {(f.frame_id, f.patch_index): f.values for f in features}
        if patch_model is not None and (patch_model.output != "softmax" or patch_model.layer_dims[-1] != N_PATCH_CLASSES):
            raise DimensionError("patch model must be a 3-class softmax head")
        if frame_model is not None and frame_model.n_classes != 2:
            raise DimensionError("frame model must be a binary head")
        self.patch_model = patch_model
        self.frame_model = frame_model
        self.supports_patches = patch_model is not None
        self.supports_frames = frame_model is not None

    def _vector(self, frame_id, patch_index, model):
        try:
            v = self._features[(frame_id, patch_index)]
        except KeyError:
            where = "frame" if patch_index is None else f"patch {patch_index} of"
            raise BackendError(f"no features for {where} frame {frame_id!r}") from None
        if v.size != model.n_inputs:
            raise DimensionError(f"features have dimension {v.size}, model expects {model.n_inputs}")
        return v

    def patch_probs(self, frame, grid):
        x = np.stack([self._vector(frame.frame_id, i, self.patch_model) for i in range(grid.n_patches)])
        z = self.patch_model.logits(x)
        if not np.all(np.isfinite(z)):
            raise ValidationError("non-finite logits")
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def frame_deploy_prob(self, frame):
        x = self._vector(frame.frame_id, None, self.frame_model)
        p = self.frame_model.predict_proba(x)[0, 1]
        if not math.isfinite(p):
            raise ValidationError("non-finite frame probability")
        return float(p)


class DelayedBackend(Backend):
    """Wrap a backend and spend ``delay_s`` on the supplied clock per call."""

    def __init__(self, inner: Backend, delay_s: float, clock=None):
        from .stream import WallClock

        self.inner = inner
        self.delay_s = float(delay_s)
        self.clock = clock or WallClock()
        self.supports_patches = inner.supports_patches
        self.supports_frames = inner.supports_frames
        self.concurrent_read_safe = inner.concurrent_read_safe

    def patch_probs(self, frame, grid):
        self.clock.sleep(self.delay_s)
        return self.inner.patch_probs(frame, grid)

    def frame_deploy_prob(self, frame):
        self.clock.sleep(self.delay_s)
        return self.inner.frame_deploy_prob(frame)
