"""Domain types, class vocabulary and dataset manifests."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from ._io import atomic_open, dump_line, iter_jsonl
from .errors import GridError, ManifestError, ValidationError

PROB_ATOL = 1e-6


class PatchClass(enum.IntEnum):
    """Patch-level classes; codes match the VLM prompt numbering."""

    NO_DEPLOY = 0
    CORAL = 1
    DEPLOY = 2

    @property
    def triggers_release(self) -> bool:
        return self is PatchClass.DEPLOY


N_PATCH_CLASSES = len(PatchClass)


class FrameLabel(enum.IntEnum):
    """Whole-frame dispensing verdict (index order is No-Deploy, Deploy)."""

    NO_DEPLOY = 0
    DEPLOY = 1

    @property
    def wire(self) -> str:
        return "deploy" if self is FrameLabel.DEPLOY else "no_deploy"

    @classmethod
    def from_wire(cls, value: str) -> "FrameLabel":
        try:
            return {"deploy": cls.DEPLOY, "no_deploy": cls.NO_DEPLOY}[value]
        except (KeyError, TypeError):
            raise ValidationError(f"unknown frame label {value!r}") from None


def argmax_class(probs) -> PatchClass:
    """Argmax with ties broken toward the lowest class code."""
    # np.argmax already returns the first maximal index
    return PatchClass(int(np.argmax(np.asarray(probs))))


@dataclass(frozen=True)
class ClassDistribution:
    probs: tuple

    def __post_init__(self):
        p = tuple(float(v) for v in self.probs)
        if len(p) != N_PATCH_CLASSES:
            raise ValidationError(f"expected {N_PATCH_CLASSES} probabilities, got {len(p)}")
        if not all(math.isfinite(v) and -PROB_ATOL <= v <= 1.0 + PROB_ATOL for v in p):
            raise ValidationError(f"probabilities out of [0, 1]: {p}")
        if abs(sum(p) - 1.0) > PROB_ATOL:
            raise ValidationError(f"probabilities sum to {sum(p)!r}, not 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_logits(cls, logits) -> "ClassDistribution":
        z = np.asarray(logits, dtype=np.float64)
        e = np.exp(z - z.max())
        return cls(tuple(e / e.sum()))

    @property
    def argmax(self) -> PatchClass:
        return argmax_class(self.probs)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.probs, dtype=dtype)


def validate_prob_rows(probs: np.ndarray, what: str = "distribution") -> np.ndarray:
    """Check each row of an (n, 3) array satisfies the ClassDistribution invariants."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != N_PATCH_CLASSES:
        raise ValidationError(f"{what}: expected shape (n, 3), got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise ValidationError(f"{what}: non-finite probability")
    if np.any(probs < -PROB_ATOL) or np.any(probs > 1.0 + PROB_ATOL):
        raise ValidationError(f"{what}: probability out of [0, 1]")
    bad = np.flatnonzero(np.abs(probs.sum(axis=1) - 1.0) > PROB_ATOL)
    if bad.size:
        raise ValidationError(f"{what}: row {int(bad[0])} does not sum to 1")
    return probs


@dataclass(frozen=True)
class GridSpec:
    rows: int = 4
    cols: int = 7

    def __post_init__(self):
        if int(self.rows) < 1 or int(self.cols) < 1:
            raise GridError(f"grid must be positive, got {self.rows}x{self.cols}")

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """Parse ``"4x7"`` (rows x cols)."""
        try:
            rows, cols = (int(v) for v in text.lower().split("x"))
        except ValueError:
            raise GridError(f"grid must look like ROWSxCOLS, got {text!r}") from None
        return cls(rows, cols)

    def __str__(self):
        return f"{self.rows}x{self.cols}"


DEFAULT_GRID = GridSpec()


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float
    depth_m: Optional[float] = None

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValidationError(f"latitude {self.lat} out of range")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValidationError(f"longitude {self.lon} out of range")
        if self.depth_m is not None and self.depth_m < 0:
            raise ValidationError(f"depth {self.depth_m} is negative")


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    source: str = ""
    timestamp_ms: Optional[int] = None
    geo: Optional[GeoPoint] = None
    ecologist_label: Optional[FrameLabel] = None
    patch_labels: Optional[tuple] = None

    @classmethod
    def from_json(cls, obj: dict) -> "FrameRecord":
        if not isinstance(obj, dict):
            raise ValidationError("record is not a JSON object")
        unknown = set(obj) - _RECORD_KEYS
        if unknown:
            raise ValidationError(f"unknown keys {sorted(unknown)}")
        frame_id = obj.get("frame_id")
        if not isinstance(frame_id, str) or not frame_id:
            raise ValidationError("frame_id must be a non-empty string")
        lat, lon = obj.get("lat"), obj.get("lon")
        if (lat is None) != (lon is None):
            raise ValidationError(f"{frame_id}: lat and lon must appear together")
        geo = None
        if lat is not None:
            geo = GeoPoint(float(lat), float(lon), _opt_float(obj.get("depth_m")))
        label = obj.get("ecologist_label")
        patches = obj.get("patch_labels")
        if patches is not None:
            if not isinstance(patches, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in patches
            ):
                raise ValidationError(f"{frame_id}: patch_labels must be a list of integers")
            try:
                patches = tuple(PatchClass(v) for v in patches)
            except ValueError:
                raise ValidationError(f"{frame_id}: patch label outside {{0, 1, 2}}") from None
        ts = obj.get("timestamp_ms")
        return cls(
            frame_id=frame_id,
            source=str(obj.get("source", "")),
            timestamp_ms=None if ts is None else int(ts),
            geo=geo,
            ecologist_label=None if label is None else FrameLabel.from_wire(label),
            patch_labels=patches,
        )

    def to_json(self) -> dict:
        out = {"frame_id": self.frame_id, "source": self.source}
        if self.timestamp_ms is not None:
            out["timestamp_ms"] = self.timestamp_ms
        if self.geo is not None:
            out["lat"] = self.geo.lat
            out["lon"] = self.geo.lon
            if self.geo.depth_m is not None:
                out["depth_m"] = self.geo.depth_m
        if self.ecologist_label is not None:
            out["ecologist_label"] = self.ecologist_label.wire
        if self.patch_labels is not None:
            out["patch_labels"] = [int(v) for v in self.patch_labels]
        return out


_RECORD_KEYS = {
    "frame_id", "source", "timestamp_ms", "lat", "lon", "depth_m", "ecologist_label", "patch_labels",
}


def _opt_float(v):
    return None if v is None else float(v)


@dataclass(frozen=True)
class DatasetManifest:
    grid: GridSpec
    records: tuple = ()
    patch_counts: tuple = field(init=False)
    frame_counts: tuple = field(init=False)

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        seen = set()
        patch = np.zeros(N_PATCH_CLASSES, dtype=np.int64)
        frame = np.zeros(len(FrameLabel), dtype=np.int64)
        for rec in records:
            if rec.frame_id in seen:
                raise ManifestError(f"duplicate frame_id {rec.frame_id!r}")
            seen.add(rec.frame_id)
            if rec.patch_labels is not None:
                if len(rec.patch_labels) != self.grid.n_patches:
                    raise ManifestError(
                        f"frame {rec.frame_id!r} has {len(rec.patch_labels)} patch labels, "
                        f"grid {self.grid} needs {self.grid.n_patches}"
                    )
                patch += np.bincount(np.asarray(rec.patch_labels, dtype=np.int64),
                                     minlength=N_PATCH_CLASSES)
            if rec.ecologist_label is not None:
                frame[int(rec.ecologist_label)] += 1
        object.__setattr__(self, "patch_counts", tuple(int(v) for v in patch))
        object.__setattr__(self, "frame_counts", tuple(int(v) for v in frame))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict:
        return {r.frame_id: r for r in self.records}

    @property
    def n_labeled(self) -> int:
        return sum(self.patch_counts) + sum(self.frame_counts)


def load_manifest(path, grid: GridSpec = DEFAULT_GRID) -> DatasetManifest:
    """Read a JSONL manifest, validating every record and recounting labels."""
    records = []
    try:
        for lineno, obj in iter_jsonl(path):
            try:
                records.append(FrameRecord.from_json(obj))
            except ValidationError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    except ManifestError:
        raise
    except ValidationError as exc:
        raise ManifestError(str(exc)) from None
    return DatasetManifest(grid, records)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with atomic_open(path) as f:
        for rec in manifest.records:
            f.write(dump_line(rec.to_json()))
            f.write("\n")


def class_counts(manifest: DatasetManifest, level: str = "patch") -> np.ndarray:
    """Label counts at ``level`` ("patch" or "frame"), indexed by class code."""
    if level == "patch":
        if not any(r.patch_labels is not None for r in manifest.records):
            raise ManifestError("no patch labels")
        return np.asarray(manifest.patch_counts, dtype=np.int64)
    if level == "frame":
        if not any(r.ecologist_label is not None for r in manifest.records):
            raise ManifestError("no frame labels")
        return np.asarray(manifest.frame_counts, dtype=np.int64)
    raise ValidationError(f"level must be 'patch' or 'frame', got {level!r}")


def records_from(items: Iterable) -> Sequence[FrameRecord]:
    """Accept FrameRecords or bare frame ids."""
    return [it if isinstance(it, FrameRecord) else FrameRecord(str(it)) for it in items]
