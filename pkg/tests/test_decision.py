import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reefdrop.classify import FrameClassification, GridClassification
from reefdrop.core import DEFAULT_GRID, FrameLabel, FrameRecord, GeoPoint, GridSpec
from reefdrop.decision import (
    DecisionConfig,
    FrameDecision,
    Ratio,
    Rule,
    aggregation_decision,
    aggregation_inputs,
    aggregation_scores,
    decide,
    decide_batch,
    scores_for,
    threshold_decision,
    threshold_scores,
)
from reefdrop.errors import DecisionError, DimensionError, ValidationError
from reefdrop.learn import MlpModel

from conftest import random_grid


def grid_from_classes(classes, frame_id="g", grid=DEFAULT_GRID):
    probs = np.full((len(classes), 3), 0.1)
    probs[np.arange(len(classes)), classes] = 0.8
    return GridClassification(frame_id, grid, probs)


def test_threshold_scores_frozen():
    counts = np.array([[10, 8, 10], [14, 0, 14], [0, 0, 28], [28, 0, 0], [5, 5, 18]])
    assert threshold_scores(counts).tolist() == [10 / 18, 1.0, 1.0, 0.0, 1.0]
    assert threshold_scores(counts, Ratio.FRACTION).tolist() == [10 / 28, 0.5, 1.0, 0.0, 18 / 28]


def test_threshold_decision_boundary():
    # 8 deploy vs 20 others: r = 0.4 exactly
    gc = grid_from_classes([2] * 8 + [0] * 10 + [1] * 10)
    assert threshold_decision(gc, 0.4).decision is FrameLabel.DEPLOY
    assert threshold_decision(gc, 0.41).decision is FrameLabel.NO_DEPLOY
    assert threshold_decision(gc, 0.4).score == 0.4
    assert threshold_decision(gc, 0.0).deploy


def test_all_deploy_grid_deploys_at_alpha_one():
    d = threshold_decision(grid_from_classes([2] * 28), 1.0)
    assert d.deploy and d.score == 1.0


def test_ratio_conventions_differ():
    gc = grid_from_classes([2] * 10 + [0] * 18)
    assert threshold_decision(gc, 0.5).deploy
    assert not threshold_decision(gc, 0.5, Ratio.FRACTION).deploy


@settings(max_examples=200)
@given(st.lists(st.integers(0, 2), min_size=28, max_size=28), st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone_in_alpha(classes, a1, a2):
    lo, hi = sorted((a1, a2))
    gc = grid_from_classes(classes)
    for ratio in Ratio:
        if threshold_decision(gc, hi, ratio).deploy:
            assert threshold_decision(gc, lo, ratio).deploy


@settings(max_examples=200)
@given(st.lists(st.integers(0, 2), min_size=28, max_size=28), st.integers(0, 27), st.floats(0, 1))
def test_threshold_monotone_in_deploy_patches(classes, i, alpha):
    # turning one more patch into Deploy can never revoke a Deploy decision
    gc = grid_from_classes(classes)
    more = list(classes)
    more[i] = 2
    if threshold_decision(gc, alpha).deploy:
        assert threshold_decision(grid_from_classes(more), alpha).deploy


def test_alpha_validation():
    gc = grid_from_classes([0] * 28)
    for bad in (-0.1, 1.1, float("nan")):
        with pytest.raises(DecisionError):
            threshold_decision(gc, bad)
        with pytest.raises(DecisionError):
            DecisionConfig(Rule.THRESHOLD, bad)


def test_rule_parse():
    assert Rule.parse("threshold") is Rule.THRESHOLD
    assert Rule.parse("spatial_patch_aggregation") is Rule.AGGREGATION
    assert Rule.parse(Rule.WHOLE_IMAGE) is Rule.WHOLE_IMAGE
    with pytest.raises(ValidationError):
        Rule.parse("vote")


def test_config_model_pairing():
    model = MlpModel.init([84, 32, 1], "sigmoid")
    with pytest.raises(DecisionError):
        DecisionConfig(Rule.AGGREGATION)
    with pytest.raises(DecisionError):
        DecisionConfig(Rule.THRESHOLD, 0.4, model)
    assert DecisionConfig("aggregation", 0.5, model).rule is Rule.AGGREGATION


def test_aggregation_input_is_row_major(rng):
    gc = random_grid(rng)
    x = aggregation_inputs([gc])
    assert x.shape == (1, 84)
    assert np.array_equal(x[0, 3 * 9:3 * 10], gc.probs[9])


def test_aggregation_frozen_network():
    # zero weights except a bias of ln 3 on the output: sigmoid = 0.75 everywhere
    model = MlpModel.zeros([84, 32, 1], "sigmoid")
    model.biases[1][:] = np.log(3.0)
    gc = grid_from_classes([0] * 28)
    d = aggregation_decision(gc, model, 0.75)
    assert d.score == pytest.approx(0.75, rel=1e-15)
    assert d.deploy
    assert not aggregation_decision(gc, model, 0.76).deploy


def test_aggregation_counts_deploy_mass():
    # a linear model summing the Deploy probabilities of all patches
    w1 = np.zeros((84, 1))
    w1[2::3, 0] = 1.0
    # 8 Deploy patches give mass 8.4, 7 give 7.7; cut at 8.05
    model = MlpModel([84, 1, 1], [w1, np.array([[10.0]])], [np.array([-8.05]), np.array([-0.5])], "sigmoid")
    hits = grid_from_classes([2] * 8 + [0] * 20)
    misses = grid_from_classes([2] * 7 + [0] * 21)
    assert aggregation_decision(hits, model, 0.5).deploy
    assert not aggregation_decision(misses, model, 0.5).deploy


def test_aggregation_batch_equals_single(rng):
    model = MlpModel.init([84, 32, 1], "sigmoid", seed=4)
    grids = [random_grid(rng, f"f{i}") for i in range(40)]
    batch = aggregation_scores(grids, model)
    single = [aggregation_decision(g, model, 0.5).score for g in grids]
    assert batch.tolist() == single


def test_aggregation_dimension_checks(rng):
    with pytest.raises(DimensionError):
        aggregation_scores([random_grid(rng)], MlpModel.init([83, 1], "sigmoid"))
    with pytest.raises(DimensionError):
        aggregation_scores([random_grid(rng)], MlpModel.init([84, 3]))
    small = GridSpec(2, 2)
    gc = grid_from_classes([0, 1, 2, 2], grid=small)
    assert aggregation_scores([gc], MlpModel.init([12, 1], "sigmoid")).shape == (1,)


def test_whole_image_rule():
    cfg = DecisionConfig(Rule.WHOLE_IMAGE)
    assert decide(FrameClassification("a", 0.5), cfg).deploy
    assert not decide(FrameClassification("a", 0.49), cfg).deploy
    with pytest.raises(DecisionError):
        decide(grid_from_classes([2] * 28), cfg)
    with pytest.raises(DecisionError):
        decide(FrameClassification("a", 0.9), DecisionConfig())
    with pytest.raises(ValidationError):
        FrameClassification("a", 1.2)


def test_decide_batch_preserves_order(rng):
    grids = [random_grid(rng, f"f{i}") for i in range(30)]
    out = decide_batch(grids, DecisionConfig(alpha=0.3))
    assert [d.frame_id for d in out] == [g.frame_id for g in grids]
    assert [d.decision for d in out] == [decide(g, DecisionConfig(alpha=0.3)).decision for g in grids]


def test_scores_for_matches_per_frame(rng):
    grids = [random_grid(rng, f"f{i}") for i in range(30)]
    vec = scores_for(grids, Rule.THRESHOLD)
    assert vec.tolist() == [threshold_decision(g, 0.0).score for g in grids]
    with pytest.raises(DecisionError):
        scores_for(grids + [grid_from_classes([0, 1, 2, 2], "s", GridSpec(2, 2))], Rule.THRESHOLD)
    with pytest.raises(DecisionError):
        scores_for(grids, Rule.WHOLE_IMAGE)


def test_decision_json():
    d = FrameDecision("a", FrameLabel.DEPLOY, 0.5, 0.4, Rule.THRESHOLD.value)
    rec = FrameRecord("a", timestamp_ms=10, geo=GeoPoint(-16.25, 145.5))
    obj = d.to_json(rec)
    assert obj == {"frame_id": "a", "decision": "deploy", "score": 0.5, "alpha": 0.4,
                   "rule": "thresholding_with_patches", "lat": -16.25, "lon": 145.5, "timestamp_ms": 10}
    assert FrameDecision.from_json(obj) == d
    with pytest.raises(ValidationError):
        FrameDecision.from_json({"frame_id": "a"})
