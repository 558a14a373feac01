"""Per-frame dispensing decisions from patch grids or whole-frame probabilities."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import _kernels
from .classify import FrameClassification, GridClassification
from .core import FrameLabel, FrameRecord, PatchClass
from .errors import DecisionError, DimensionError, ReefDropError, ValidationError
from .learn import MlpModel

WHOLE_IMAGE_ALPHA = 0.5


class Rule(str, enum.Enum):
    THRESHOLD = "thresholding_with_patches"
    AGGREGATION = "spatial_patch_aggregation"
    WHOLE_IMAGE = "whole_image"

    @classmethod
    def parse(cls, value) -> "Rule":
        if isinstance(value, Rule):
            return value
        aliases = {"threshold": cls.THRESHOLD, "aggregation": cls.AGGREGATION, "whole": cls.WHOLE_IMAGE}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ValidationError(f"unknown rule {value!r}") from None


class Ratio(str, enum.Enum):
    """How the thresholding rule turns patch counts into a score."""

    VS_REST = "vs_rest"  # n_deploy / (n_no_deploy + n_coral)
    FRACTION = "fraction"  # n_deploy / n_patches


@dataclass(frozen=True)
class DecisionConfig:
    rule: Rule = Rule.THRESHOLD
    alpha: float = 0.4
    aggregation_model: Optional[MlpModel] = None
    ratio: Ratio = Ratio.VS_REST

    def __post_init__(self):
        object.__setattr__(self, "rule", Rule.parse(self.rule))
        object.__setattr__(self, "ratio", Ratio(self.ratio))
        _check_alpha(self.alpha)
        needs_model = self.rule is Rule.AGGREGATION
        if needs_model and self.aggregation_model is None:
            raise DecisionError("spatial_patch_aggregation needs an aggregation model")
        if not needs_model and self.aggregation_model is not None:
            raise DecisionError(f"{self.rule.value} does not take an aggregation model")


@dataclass(frozen=True)
class FrameDecision:
    frame_id: str
    decision: FrameLabel
    score: float
    alpha: float
    rule: str

    @property
    def deploy(self) -> bool:
        return self.decision is FrameLabel.DEPLOY

    def to_json(self, record: Optional[FrameRecord] = None) -> dict:
        out = {
            "frame_id": self.frame_id,
            "decision": self.decision.wire,
            "score": float(self.score),
            "alpha": float(self.alpha),
            "rule": self.rule,
        }
        if record is not None:
            if record.geo is not None:
                out["lat"] = record.geo.lat
                out["lon"] = record.geo.lon
            if record.timestamp_ms is not None:
                out["timestamp_ms"] = record.timestamp_ms
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FrameDecision":
        try:
            return cls(
                str(obj["frame_id"]),
                FrameLabel.from_wire(obj["decision"]),
                float(obj["score"]),
                float(obj["alpha"]),
                Rule.parse(obj["rule"]).value,
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad decision record: {exc}") from None


def _check_alpha(alpha):
    if not (0.0 <= alpha <= 1.0):
        raise DecisionError(f"alpha must lie in [0, 1], got {alpha}")


def _verdict(score, alpha) -> FrameLabel:
    return FrameLabel.DEPLOY if score >= alpha else FrameLabel.NO_DEPLOY


def threshold_scores(counts: np.ndarray, ratio: Ratio = Ratio.VS_REST) -> np.ndarray:
    """Deploy scores from (frames, 3) class counts, saturated to at most 1.

    With ``vs_rest`` a frame with no No-Deploy or Coral patches has an infinite
    ratio, stored as 1.0.
    """
    counts = np.asarray(counts, dtype=np.float64)
    n_deploy = counts[:, PatchClass.DEPLOY]
    if Ratio(ratio) is Ratio.FRACTION:
        return n_deploy / counts.sum(axis=1)
    rest = counts[:, PatchClass.NO_DEPLOY] + counts[:, PatchClass.CORAL]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = n_deploy / rest
    return np.where(rest > 0, np.minimum(r, 1.0), 1.0)


def threshold_decision(gc: GridClassification, alpha: float, ratio: Ratio = Ratio.VS_REST) -> FrameDecision:
    _check_alpha(alpha)
    if gc.grid.n_patches == 0:
        raise DecisionError(f"frame {gc.frame_id}: empty grid")
    score = float(threshold_scores(gc.class_counts()[None, :], ratio)[0])
    return FrameDecision(gc.frame_id, _verdict(score, alpha), score, float(alpha), Rule.THRESHOLD.value)


def aggregation_inputs(grids: Sequence[GridClassification]) -> np.ndarray:
    """Row-major concatenation of each grid's probability vectors."""
    if not grids:
        return np.zeros((0, 0))
    return np.stack([g.probs.reshape(-1) for g in grids])


def _check_aggregation_model(model: MlpModel, n_inputs: int):
    if model.output != "sigmoid":
        raise DimensionError("aggregation model needs a single sigmoid output")
    if model.n_inputs != n_inputs:
        raise DimensionError(f"aggregation model expects {model.n_inputs} inputs, grid provides {n_inputs}")


def aggregation_scores(grids: Sequence[GridClassification], model: MlpModel) -> np.ndarray:
    x = aggregation_inputs(grids)
    if x.shape[0] == 0:
        return np.zeros(0)
    _check_aggregation_model(model, x.shape[1])
    # row by row: a batched matmul may round differently from the single-frame path
    return np.array([model.forward(row[None, :])[0] for row in x], dtype=np.float64)


def aggregation_decision(gc: GridClassification, model: MlpModel, alpha: float) -> FrameDecision:
    _check_alpha(alpha)
    score = float(aggregation_scores([gc], model)[0])
    return FrameDecision(gc.frame_id, _verdict(score, alpha), score, float(alpha), Rule.AGGREGATION.value)


def decide(item: Union[GridClassification, FrameClassification], config: DecisionConfig) -> FrameDecision:
    """Apply the configured rule to one frame."""
    if config.rule is Rule.WHOLE_IMAGE:
        if not isinstance(item, FrameClassification):
            raise DecisionError("whole_image rule needs a FrameClassification")
        p = float(item.deploy_prob)
        return FrameDecision(item.frame_id, _verdict(p, WHOLE_IMAGE_ALPHA), p, WHOLE_IMAGE_ALPHA, Rule.WHOLE_IMAGE.value)
    if not isinstance(item, GridClassification):
        raise DecisionError(f"{config.rule.value} rule needs a GridClassification")
    if config.rule is Rule.THRESHOLD:
        return threshold_decision(item, config.alpha, config.ratio)
    return aggregation_decision(item, config.aggregation_model, config.alpha)


def scores_for(grids: Sequence[GridClassification], rule, model: Optional[MlpModel] = None,
               ratio: Ratio = Ratio.VS_REST) -> np.ndarray:
    """Vectorized per-frame scores for a patch rule."""
    rule = Rule.parse(rule)
    if not grids:
        return np.zeros(0)
    grid = grids[0].grid
    for g in grids:
        if g.grid != grid:
            raise DecisionError(f"frame {g.frame_id}: grid {g.grid} differs from {grid}")
    if rule is Rule.THRESHOLD:
        counts = _kernels.grid_class_counts(np.stack([g.probs for g in grids]))
        return threshold_scores(counts, ratio)
    if rule is Rule.AGGREGATION:
        if model is None:
            raise DecisionError("spatial_patch_aggregation needs an aggregation model")
        return aggregation_scores(grids, model)
    raise DecisionError("whole_image rule has no patch score")


def decide_batch(items: Sequence, config: DecisionConfig) -> list[FrameDecision]:
    """Order-preserving ``decide`` over many frames."""
    items = list(items)
    if not items:
        return []
    if config.rule is Rule.WHOLE_IMAGE:
        out = []
        for it in items:
            try:
                out.append(decide(it, config))
            except ReefDropError as exc:
                raise type(exc)(f"frame {getattr(it, 'frame_id', '?')}: {exc}") from None
        return out
    for it in items:
        if not isinstance(it, GridClassification):
            raise DecisionError(f"frame {getattr(it, 'frame_id', '?')}: {config.rule.value} rule needs a GridClassification")
    scores = scores_for(items, config.rule, config.aggregation_model, config.ratio)
    rule = config.rule.value
    return [
        FrameDecision(g.frame_id, _verdict(float(s), config.alpha), float(s), float(config.alpha), rule)
        for g, s in zip(items, scores)
    ]
