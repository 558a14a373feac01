import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reefdrop.classify import Backend, DelayedBackend, MockBackend, classify_patches
from reefdrop.core import FrameRecord, GridSpec
from reefdrop.decision import DecisionConfig, Rule, decide
from reefdrop.errors import ValidationError
from reefdrop.stream import (
    DropPolicy,
    StreamAborted,
    StreamConfig,
    VirtualClock,
    run_stream,
    summarize,
    summarize_csv,
)

THRESH = DecisionConfig(Rule.THRESHOLD, 0.4)


def frames(n, **kw):
    return [FrameRecord(f"f{i:04d}", **kw) for i in range(n)]


def test_virtual_clock_latest_wins_frozen():
    clock = VirtualClock()
    backend = DelayedBackend(MockBackend(1), 0.1, clock)
    cfg = StreamConfig(capture_fps=20, duration_s=5.0)
    decisions, stats = run_stream(frames(1000), backend, THRESH, cfg, clock)
    assert (stats.frames_offered, stats.frames_processed, stats.frames_dropped) == (100, 51, 49)
    assert stats.conserved()
    # processed frames are the newest available at each service start
    assert [d.frame_id for d in decisions[:4]] == ["f0000", "f0002", "f0004", "f0006"]
    assert stats.dropped_ids[:2] == ["f0001", "f0003"]
    assert stats.inference_ms[0] == pytest.approx(100.0)


def test_decisions_match_offline_path():
    clock = VirtualClock()
    backend = DelayedBackend(MockBackend(5), 0.01, clock)
    decisions, stats = run_stream(frames(20), backend, THRESH, StreamConfig(capture_fps=10), clock)
    assert stats.frames_dropped == 0
    offline = [decide(classify_patches(MockBackend(5), f), THRESH) for f in frames(20)]
    assert decisions == offline


def test_process_all_never_drops():
    clock = VirtualClock()
    backend = DelayedBackend(MockBackend(), 0.5, clock)
    decisions, stats = run_stream(frames(30), backend, THRESH,
                                  StreamConfig(capture_fps=10, drop_policy=DropPolicy.PROCESS_ALL, queue_capacity=2),
                                  clock)
    assert stats.frames_processed == 30 and stats.frames_dropped == 0
    assert [d.frame_id for d in decisions] == [f.frame_id for f in frames(30)]
    assert stats.max_ms > stats.p50_ms


@settings(max_examples=40, deadline=None)
@given(st.floats(1, 50), st.floats(0, 0.3), st.integers(0, 80), st.sampled_from(list(DropPolicy)),
       st.integers(1, 5))
def test_conservation(fps, delay, n, policy, cap):
    clock = VirtualClock()
    backend = DelayedBackend(MockBackend(), delay, clock)
    decisions, stats = run_stream(frames(n), backend, THRESH,
                                  StreamConfig(capture_fps=fps, drop_policy=policy, queue_capacity=cap), clock)
    assert stats.frames_offered == n
    assert stats.conserved()
    assert len(decisions) == stats.frames_processed
    assert len(stats.dropped_ids) == stats.frames_dropped
    assert all(v >= 0 for v in stats.latency_ms)


def test_timestamps_drive_arrivals():
    clock = VirtualClock()
    backend = DelayedBackend(MockBackend(), 0.15, clock)
    recs = [FrameRecord(f"f{i}", timestamp_ms=1000 + 100 * i) for i in range(10)]
    cfg = StreamConfig(capture_fps=1000, use_timestamps=True)
    _, stats = run_stream(recs, backend, THRESH, cfg, clock)
    # 150 ms service against 100 ms arrivals: every third frame is superseded
    assert stats.frames_processed == 7 and stats.dropped_ids == ["f2", "f5", "f8"]
    assert stats.elapsed_s == pytest.approx(1.05)


def test_limits():
    clock = VirtualClock()
    _, stats = run_stream(frames(50), MockBackend(), THRESH, StreamConfig(max_frames=7), clock)
    assert stats.frames_offered == 7
    _, stats = run_stream(frames(50), MockBackend(), THRESH, StreamConfig(capture_fps=10, duration_s=1.0), VirtualClock())
    assert stats.frames_offered == 10
    _, stats = run_stream([], MockBackend(), THRESH, StreamConfig(), VirtualClock())
    assert stats.frames_offered == 0 and stats.achieved_fps == 0.0 and stats.p95_ms == 0.0


def test_log_writer_output():
    buf = io.StringIO()
    recs = frames(5)
    run_stream(recs, MockBackend(), THRESH, StreamConfig(capture_fps=5), VirtualClock(), log_file=buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["frame_id"] for r in rows] == [r.frame_id for r in recs]
    assert {"decision", "score", "alpha", "rule"} <= set(rows[0])


class _Exploding(Backend):
    supports_patches = True

    def __init__(self, at):
        self.at, self.n = at, 0

    def patch_probs(self, frame, grid):
        self.n += 1
        if self.n == self.at:
            raise RuntimeError("camera unplugged")
        return np.full((grid.n_patches, 3), 1 / 3)


def test_backend_failure_aborts_with_partial_results():
    with pytest.raises(StreamAborted) as info:
        run_stream(frames(10), _Exploding(4), THRESH,
                   StreamConfig(capture_fps=10, drop_policy=DropPolicy.PROCESS_ALL), VirtualClock())
    err = info.value
    assert len(err.decisions) == 3
    assert err.stats.conserved()
    assert "f0003" in str(err)


def test_capability_checks():
    only_frames = MockBackend()
    only_frames.supports_patches = False
    with pytest.raises(ValidationError):
        run_stream(frames(1), only_frames, THRESH, StreamConfig(), VirtualClock())
    whole = DecisionConfig(Rule.WHOLE_IMAGE)
    decisions, _ = run_stream(frames(3), MockBackend(deploy_prob=0.9), whole, StreamConfig(), VirtualClock())
    assert all(d.deploy for d in decisions)


def test_config_validation():
    for kw in ({"capture_fps": 0}, {"capture_fps": float("inf")}, {"queue_capacity": 0},
               {"max_frames": -1}, {"duration_s": -1}, {"drop_policy": "oldest"}):
        with pytest.raises((ValidationError, ValueError)):
            StreamConfig(**kw)


def test_summaries():
    clock = VirtualClock()
    _, stats = run_stream(frames(10), DelayedBackend(MockBackend(), 0.05, clock), THRESH,
                          StreamConfig(capture_fps=10, grid=GridSpec(2, 2)), clock)
    full = summarize(stats)
    assert "achieved fps" in full and "p95" in full
    det = summarize(stats, deterministic=True)
    assert det.splitlines() == ["frames offered    10", "frames processed  10", "frames dropped    0"]
    header, row = summarize_csv(stats).splitlines()
    assert header.startswith("frames_offered") and row.startswith("10,10,0,")
