"""GPS-bound decision tracks and their GeoJSON / CSV exports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional, Sequence

from ._io import atomic_open
from .core import DatasetManifest, FrameLabel, GeoPoint
from .decision import FrameDecision
from .errors import GeoError

CSV_DECIMALS = 7


@dataclass(frozen=True)
class TrackEntry:
    geo: GeoPoint
    decision: FrameDecision
    ecologist_label: Optional[FrameLabel] = None
    timestamp_ms: Optional[int] = None

    @property
    def agree(self) -> Optional[bool]:
        if self.ecologist_label is None:
            return None
        return self.decision.decision is self.ecologist_label


@dataclass(frozen=True)
class GeoTrack:
    entries: tuple

    def __post_init__(self):
        last = None
        for e in self.entries:
            if e.timestamp_ms is None:
                continue
            if last is not None and e.timestamp_ms < last:
                raise GeoError(f"timestamps go backwards at frame {e.decision.frame_id!r}")
            last = e.timestamp_ms

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def bind(decisions: Sequence[FrameDecision], manifest: DatasetManifest) -> GeoTrack:
    """Attach positions and ecologist labels; the track follows manifest order."""
    by_id = manifest.by_id()
    unknown = [d.frame_id for d in decisions if d.frame_id not in by_id]
    if unknown:
        raise GeoError(f"decided frames not in manifest: {unknown}")
    no_geo = [d.frame_id for d in decisions if by_id[d.frame_id].geo is None]
    if no_geo:
        raise GeoError(f"decided frames without a GPS position: {no_geo}")
    decided = {d.frame_id: d for d in decisions}
    entries = []
    for rec in manifest.records:
        d = decided.get(rec.frame_id)
        if d is not None:
            entries.append(TrackEntry(rec.geo, d, rec.ecologist_label, rec.timestamp_ms))
    return GeoTrack(tuple(entries))


def to_feature_collection(track: GeoTrack, decimals: Optional[int] = None) -> dict:
    """GeoJSON FeatureCollection of Point features ([lon, lat] order).

    Coordinates are written at full float precision unless ``decimals`` is given.
    """
    def fmt(v):
        return v if decimals is None else round(v, decimals)

    features = []
    for e in track:
        d = e.decision
        props = {
            "frame_id": d.frame_id,
            "decision": d.decision.wire,
            "score": d.score,
            "alpha": d.alpha,
            "rule": d.rule,
        }
        if e.ecologist_label is not None:
            props["ecologist_label"] = e.ecologist_label.wire
            props["agree"] = e.agree
        if e.timestamp_ms is not None:
            props["timestamp_ms"] = e.timestamp_ms
        if e.geo.depth_m is not None:
            props["depth_m"] = e.geo.depth_m
        features.append({
            "type": "Feature",
            "geometry": {
                "type": "Point",
                "coordinates": [fmt(e.geo.lon), fmt(e.geo.lat)],
            },
            "properties": props,
        })
    return {"type": "FeatureCollection", "features": features}


def export_geojson(track: GeoTrack, path, decimals: Optional[int] = None) -> None:
    try:
        with atomic_open(path) as f:
            json.dump(to_feature_collection(track, decimals), f, indent=1)
            f.write("\n")
    except OSError as exc:
        raise GeoError(f"cannot write {path}: {exc}") from None


def export_csv(track: GeoTrack, path) -> None:
    try:
        with atomic_open(path, newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["frame_id", "lat", "lon", "decision", "score", "ecologist_label", "agree"])
            for e in track:
                w.writerow([
                    e.decision.frame_id,
                    f"{e.geo.lat:.{CSV_DECIMALS}f}",
                    f"{e.geo.lon:.{CSV_DECIMALS}f}",
                    e.decision.decision.wire,
                    repr(e.decision.score),
                    "" if e.ecologist_label is None else e.ecologist_label.wire,
                    "" if e.agree is None else str(e.agree).lower(),
                ])
    except OSError as exc:
        raise GeoError(f"cannot write {path}: {exc}") from None
