"""Patch-grid seafloor classification and coral-device dispensing decisions."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    DEFAULT_GRID,
    ClassDistribution,
    DatasetManifest,
    FrameLabel,
    FrameRecord,
    GeoPoint,
    GridSpec,
    PatchClass,
    class_counts,
    load_manifest,
    write_manifest,
)
from .decision import DecisionConfig, FrameDecision, Ratio, Rule, decide, decide_batch  # noqa: E402

__all__ = [
    "DEFAULT_GRID",
    "ClassDistribution",
    "DatasetManifest",
    "DecisionConfig",
    "FrameDecision",
    "FrameLabel",
    "FrameRecord",
    "GeoPoint",
    "GridSpec",
    "PatchClass",
    "Ratio",
    "Rule",
    "class_counts",
    "decide",
    "decide_batch",
    "load_manifest",
    "write_manifest",
]
