"""Real-time replay harness: frames -> classify -> decide -> log, with latency accounting.

Frames from ``source`` are offered at ``capture_fps`` (or at their own
timestamps). A single classify stage owns the backend. Under ``latest_wins``,
frames that arrive while the stage is busy replace one another so only the
newest waits. Decisions are handed to a log writer thread over a bounded queue.
"""

from __future__ import annotations

import enum
import io
import math
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from ._io import dump_line
from .classify import Backend, GridClassification, classify_frame
from .core import DEFAULT_GRID, FrameRecord, GridSpec
from .decision import DecisionConfig, FrameDecision, Rule, decide
from .errors import ReefDropError, ValidationError


class WallClock:
    def now(self) -> float:
        return time.perf_counter()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def sleep_until(self, t: float) -> None:
        self.sleep(t - self.now())


class VirtualClock:
    """Deterministic clock; time only moves when something sleeps."""

    def __init__(self, start: float = 0.0):
        self.t = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        return self.t

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            with self._lock:
                self.t += seconds

    def sleep_until(self, t: float) -> None:
        with self._lock:
            self.t = max(self.t, t)


class DropPolicy(str, enum.Enum):
    LATEST_WINS = "latest_wins"
    PROCESS_ALL = "process_all"


@dataclass(frozen=True)
class StreamConfig:
    capture_fps: float = 5.5
    drop_policy: DropPolicy = DropPolicy.LATEST_WINS
    queue_capacity: int = 8
    max_frames: Optional[int] = None
    duration_s: Optional[float] = None
    use_timestamps: bool = False
    grid: GridSpec = DEFAULT_GRID

    def __post_init__(self):
        object.__setattr__(self, "drop_policy", DropPolicy(self.drop_policy))
        if not (self.capture_fps > 0 and math.isfinite(self.capture_fps)):
            raise ValidationError("capture_fps must be a positive finite number")
        if self.queue_capacity < 1:
            raise ValidationError("queue_capacity must be >= 1")
        if self.max_frames is not None and self.max_frames < 0:
            raise ValidationError("max_frames must be >= 0")
        if self.duration_s is not None and self.duration_s < 0:
            raise ValidationError("duration_s must be >= 0")


@dataclass
class TimingStats:
    frames_offered: int = 0
    frames_processed: int = 0
    frames_dropped: int = 0
    latency_ms: list = field(default_factory=list)  # arrival -> decision
    inference_ms: list = field(default_factory=list)  # backend call only
    overhead_ms: list = field(default_factory=list)  # service time minus backend call
    elapsed_s: float = 0.0
    dropped_ids: list = field(default_factory=list)

    @property
    def achieved_fps(self) -> float:
        return self.frames_processed / self.elapsed_s if self.elapsed_s > 0 else 0.0

    def _pct(self, samples, q) -> float:
        return float(np.percentile(samples, q)) if samples else 0.0

    @property
    def p50_ms(self) -> float:
        return self._pct(self.latency_ms, 50)

    @property
    def p95_ms(self) -> float:
        return self._pct(self.latency_ms, 95)

    @property
    def max_ms(self) -> float:
        return max(self.latency_ms) if self.latency_ms else 0.0

    def conserved(self) -> bool:
        return self.frames_offered == self.frames_processed + self.frames_dropped


class StreamAborted(ReefDropError):
    code = "stream_aborted"

    def __init__(self, message, decisions, stats):
        super().__init__(message)
        self.decisions = decisions
        self.stats = stats


class _LogWriter:
    """Single writer of the decision log, fed through a bounded queue."""

    _STOP = object()

    def __init__(self, fileobj, capacity: int):
        self._f = fileobj
        self._q = queue.Queue(maxsize=capacity)
        self._error = None
        self._thread = threading.Thread(target=self._run, name="decision-log", daemon=True)
        self._thread.start()

    def _run(self):
        while True:
            item = self._q.get()
            if item is self._STOP:
                return
            try:
                self._f.write(dump_line(item) + "\n")
                self._f.flush()
            except Exception as exc:  # surfaced on close
                self._error = exc

    def put(self, record: dict):
        self._q.put(record)

    def close(self):
        self._q.put(self._STOP)
        self._thread.join()
        if self._error is not None:
            raise self._error


def run_stream(source: Iterable[FrameRecord], backend: Backend, decision_config: DecisionConfig,
               config: StreamConfig = StreamConfig(), clock=None, log_file: Optional[io.TextIOBase] = None):
    """Replay ``source`` through the pipeline. Returns ``(decisions, stats)``."""
    clock = clock or WallClock()
    whole_image = decision_config.rule is Rule.WHOLE_IMAGE
    if whole_image and not backend.supports_frames:
        raise ValidationError(f"{type(backend).__name__} does not produce whole-frame decisions")
    if not whole_image and not backend.supports_patches:
        raise ValidationError(f"{type(backend).__name__} does not produce patch distributions")
    frames = iter(source)
    interval = 1.0 / config.capture_fps
    stats = TimingStats()
    decisions: list[FrameDecision] = []
    pending: deque = deque()
    writer = _LogWriter(log_file, config.queue_capacity) if log_file is not None else None

    start = clock.now()
    first_ts = None
    offered = 0
    lookahead = None  # (arrival_time, frame)

    def pull():
        nonlocal first_ts, offered
        if config.max_frames is not None and offered >= config.max_frames:
            return None
        frame = next(frames, None)
        if frame is None:
            return None
        if config.use_timestamps and frame.timestamp_ms is not None:
            if first_ts is None:
                first_ts = frame.timestamp_ms
            at = start + (frame.timestamp_ms - first_ts) / 1000.0
        else:
            at = start + offered * interval
        if config.duration_s is not None and at - start >= config.duration_s:
            return None
        offered += 1
        return at, frame

    def admit(now):
        nonlocal lookahead
        while lookahead is not None and lookahead[0] <= now:
            if config.drop_policy is DropPolicy.PROCESS_ALL and len(pending) >= config.queue_capacity:
                break
            if config.drop_policy is DropPolicy.LATEST_WINS:
                while pending:
                    _, old = pending.popleft()
                    stats.frames_dropped += 1
                    stats.dropped_ids.append(old.frame_id)
            pending.append(lookahead)
            lookahead = pull()

    lookahead = pull()
    last_done = start
    try:
        while True:
            admit(clock.now())
            if not pending:
                if lookahead is None:
                    break
                clock.sleep_until(lookahead[0])
                continue
            arrival, frame = pending.popleft()
            t0 = clock.now()
            try:
                if whole_image:
                    b0 = clock.now()
                    item = classify_frame(backend, frame)
                    b1 = clock.now()
                else:
                    b0 = clock.now()
                    probs = backend.patch_probs(frame, config.grid)
                    b1 = clock.now()
                    item = GridClassification(frame.frame_id, config.grid, probs)
                d = decide(item, decision_config)
            except Exception as exc:
                # unprocessed frames, including this one, count as dropped
                stats.frames_offered = offered
                stats.frames_dropped += len(pending) + (lookahead is not None) + 1
                stats.elapsed_s = clock.now() - start
                raise StreamAborted(f"frame {frame.frame_id}: {exc}", decisions, stats) from exc
            if writer is not None:
                writer.put(d.to_json(frame))
            t1 = clock.now()
            decisions.append(d)
            stats.frames_processed += 1
            stats.latency_ms.append((t1 - arrival) * 1000.0)
            stats.inference_ms.append((b1 - b0) * 1000.0)
            stats.overhead_ms.append(((t1 - t0) - (b1 - b0)) * 1000.0)
            last_done = t1
    finally:
        if writer is not None:
            writer.close()
    stats.frames_offered = offered
    stats.elapsed_s = last_done - start
    return decisions, stats


def summarize(stats: TimingStats, deterministic: bool = False) -> str:
    """Human-readable timing report."""
    lines = [
        f"frames offered    {stats.frames_offered}",
        f"frames processed  {stats.frames_processed}",
        f"frames dropped    {stats.frames_dropped}",
    ]
    if not deterministic:
        inf = stats.inference_ms
        ovh = stats.overhead_ms
        lines += [
            f"elapsed           {stats.elapsed_s:.3f} s",
            f"achieved fps      {stats.achieved_fps:.2f}",
            f"latency p50       {stats.p50_ms:.1f} ms",
            f"latency p95       {stats.p95_ms:.1f} ms",
            f"latency max       {stats.max_ms:.1f} ms",
            f"inference mean    {(sum(inf) / len(inf)) if inf else 0.0:.1f} ms",
            f"overhead mean     {(sum(ovh) / len(ovh)) if ovh else 0.0:.3f} ms",
        ]
    return "\n".join(lines)


def summarize_csv(stats: TimingStats) -> str:
    header = "frames_offered,frames_processed,frames_dropped,elapsed_s,achieved_fps,p50_ms,p95_ms,max_ms"
    row = (
        f"{stats.frames_offered},{stats.frames_processed},{stats.frames_dropped},"
        f"{stats.elapsed_s!r},{stats.achieved_fps!r},{stats.p50_ms!r},{stats.p95_ms!r},{stats.max_ms!r}"
    )
    return header + "\n" + row + "\n"
