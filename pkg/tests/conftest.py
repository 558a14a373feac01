import json

import numpy as np
import pytest

from reefdrop.classify import GridClassification
from reefdrop.core import DEFAULT_GRID, FrameLabel, FrameRecord, GeoPoint

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    _ACCEPTANCE.append((props["criterion"], props.get("title", ""), report.outcome, props.get("detail", "")))


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", m.args[0]))
        item.user_properties.append(("title", m.args[1]))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, outcome, detail in sorted(_ACCEPTANCE):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n} [{verdict}] {title}: {detail}")


def random_probs(rng, shape, concentration=1.0):
    return rng.dirichlet(np.full(3, concentration), size=shape)


def random_grid(rng, frame_id="f", grid=DEFAULT_GRID):
    """Grid whose deploy share varies from frame to frame."""
    z = rng.normal(size=(grid.n_patches, 3))
    z[:, 2] += rng.uniform(-3, 3)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    return GridClassification(frame_id, grid, p / p.sum(axis=1, keepdims=True))


def make_records(n, rng=None, labels=True, geo=True, t0=1_700_000_000_000):
    rng = rng or np.random.default_rng(0)
    out = []
    for i in range(n):
        out.append(FrameRecord(
            frame_id=f"f{i:04d}",
            source=f"frames/f{i:04d}.jpg",
            timestamp_ms=t0 + 182 * i,
            geo=GeoPoint(float(rng.uniform(-25, -10)), float(rng.uniform(140, 155))) if geo else None,
            ecologist_label=FrameLabel(int(rng.integers(0, 2))) if labels else None,
        ))
    return out


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
