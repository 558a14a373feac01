import numpy as np
import pytest

from reefdrop.classify import (
    DelayedBackend,
    GridClassification,
    MockBackend,
    NativeBackend,
    PatchFeatures,
    PredictionsBackend,
    classify_frame,
    classify_patches,
    load_features,
    softmax_forward,
)
from reefdrop.core import DEFAULT_GRID, FrameRecord, GridSpec, PatchClass
from reefdrop.errors import BackendError, DimensionError, ValidationError
from reefdrop.learn import MlpModel
from reefdrop.stream import VirtualClock

from conftest import write_jsonl


def test_grid_classification_is_read_only(rng):
    probs = rng.dirichlet(np.ones(3), size=28)
    gc = GridClassification("a", DEFAULT_GRID, probs)
    probs[0] = [1, 0, 0]
    assert not np.array_equal(gc.probs[0], probs[0])
    with pytest.raises(ValueError):
        gc.probs[0, 0] = 0.5
    assert gc.class_counts().sum() == 28
    assert gc.predicted_classes[3] is PatchClass(int(gc.predicted[3]))
    assert len(gc.distributions) == 28


def test_grid_classification_validation():
    with pytest.raises(DimensionError):
        GridClassification("a", DEFAULT_GRID, np.full((27, 3), 1 / 3))
    with pytest.raises(ValidationError, match="row 2"):
        GridClassification("a", GridSpec(1, 3), np.array([[1, 0, 0], [0, 1, 0], [0.5, 0.6, 0]]))


def test_mock_is_deterministic_and_valid():
    m = MockBackend(seed=3)
    a = classify_patches(m, FrameRecord("x"))
    b = classify_patches(MockBackend(seed=3), FrameRecord("x"))
    c = classify_patches(MockBackend(seed=4), FrameRecord("x"))
    assert np.array_equal(a.probs, b.probs)
    assert not np.array_equal(a.probs, c.probs)
    assert 0 < classify_frame(m, FrameRecord("x")).deploy_prob <= 1


def test_mock_constant():
    m = MockBackend(constant=(0.2, 0.3, 0.5), deploy_prob=0.7)
    gc = classify_patches(m, FrameRecord("x"), GridSpec(2, 2))
    assert gc.probs.shape == (4, 3)
    assert gc.class_counts().tolist() == [0, 0, 4]
    assert classify_frame(m, FrameRecord("x")).deploy_prob == 0.7
    with pytest.raises(ValidationError):
        MockBackend(constant=(0.5, 0.5, 0.5))


def test_mock_class_mix_is_roughly_uniform():
    m = MockBackend(seed=0)
    counts = sum(classify_patches(m, FrameRecord(f"f{i}")).class_counts() for i in range(200))
    np.testing.assert_allclose(counts / counts.sum(), 1 / 3, atol=0.03)


def test_predictions_backend(tmp_path):
    rows = [{"frame_id": "a", "patch_index": i, "probs": [0.1, 0.2, 0.7]} for i in range(4)]
    rows.append({"frame_id": "b", "deploy_prob": 0.25})
    rows.append({"frame_id": "c", "patch_index": 0, "probs": [1.0, 0.0, 0.0]})
    b = PredictionsBackend.load(write_jsonl(tmp_path / "p.jsonl", rows))
    assert b.frame_ids == ["a", "c", "b"]
    grid = GridSpec(2, 2)
    assert classify_patches(b, FrameRecord("a"), grid).class_counts().tolist() == [0, 0, 4]
    assert classify_frame(b, FrameRecord("b")).deploy_prob == 0.25
    with pytest.raises(BackendError, match=r"missing patch predictions \[1, 2, 3\]"):
        classify_patches(b, FrameRecord("c"), grid)
    with pytest.raises(BackendError, match="no patch predictions"):
        classify_patches(b, FrameRecord("zz"), grid)
    with pytest.raises(BackendError, match="outside grid"):
        classify_patches(b, FrameRecord("a"), GridSpec(1, 3))
    with pytest.raises(BackendError):
        classify_frame(b, FrameRecord("a"))


@pytest.mark.parametrize("row", [
    {"frame_id": "a", "patch_index": 0, "probs": [0.5, 0.5, 0.5]},
    {"frame_id": "a", "deploy_prob": 1.5},
    {"frame_id": "a"},
    {"patch_index": 0, "probs": [1, 0, 0]},
])
def test_predictions_rejects(tmp_path, row):
    with pytest.raises(ValidationError, match="p.jsonl:1"):
        PredictionsBackend.load(write_jsonl(tmp_path / "p.jsonl", [row]))


def test_backend_capabilities():
    only_frames = PredictionsBackend(frame_probs={"a": 0.5})
    with pytest.raises(BackendError):
        classify_patches(only_frames, FrameRecord("a"))


def test_softmax_forward_stability():
    model = MlpModel([2, 3], [np.array([[1000.0, 0.0, -1000.0], [0.0, 0.0, 0.0]])], [np.zeros(3)])
    d = softmax_forward(model, [1.0, 0.0])
    assert d.probs[0] == 1.0 and d.argmax is PatchClass.NO_DEPLOY
    with pytest.raises(ValidationError):
        softmax_forward(MlpModel.init([2, 1], "sigmoid"), [1.0, 0.0])
    with pytest.raises(DimensionError):
        softmax_forward(model, [1.0, 0.0, 0.0])


def test_native_backend(rng):
    feats = [PatchFeatures("a", i, rng.normal(size=5)) for i in range(4)] + [PatchFeatures("a", None, rng.normal(size=5))]
    patch_model = MlpModel.init([5, 3], seed=1)
    frame_model = MlpModel.init([5, 1], "sigmoid", seed=2)
    b = NativeBackend(feats, patch_model, frame_model)
    gc = classify_patches(b, FrameRecord("a"), GridSpec(2, 2))
    np.testing.assert_allclose(gc.probs[1], patch_model.forward(feats[1].values[None])[0], rtol=1e-12)
    assert classify_frame(b, FrameRecord("a")).deploy_prob == pytest.approx(float(frame_model.forward(feats[4].values[None])[0]))
    with pytest.raises(BackendError, match="patch 1 of frame 'b'"):
        NativeBackend([PatchFeatures("b", 0, np.zeros(5))], patch_model).patch_probs(FrameRecord("b"), GridSpec(1, 3))
    with pytest.raises(DimensionError):
        NativeBackend(feats, MlpModel.init([5, 2]))
    with pytest.raises(DimensionError):
        NativeBackend(feats, frame_model=MlpModel.init([5, 3]))


def test_load_features(tmp_path):
    path = write_jsonl(tmp_path / "f.jsonl", [
        {"frame_id": "a", "patch_index": 0, "values": [1, 2]},
        {"frame_id": "a", "values": [3, 4]},
    ])
    feats = load_features(path)
    assert feats[1].patch_index is None and feats[1].values.tolist() == [3.0, 4.0]
    write_jsonl(path, [{"frame_id": "a", "values": [1, 2]}, {"frame_id": "b", "values": [1, 2, 3]}])
    with pytest.raises(DimensionError, match="f.jsonl:2"):
        load_features(path)
    write_jsonl(path, [{"frame_id": "a", "values": [1, None]}])
    with pytest.raises(ValidationError):
        load_features(path)


def test_delayed_backend_spends_clock_time():
    clock = VirtualClock()
    b = DelayedBackend(MockBackend(), 0.25, clock)
    classify_patches(b, FrameRecord("a"))
    classify_frame(b, FrameRecord("a"))
    assert clock.now() == pytest.approx(0.5)
    assert b.supports_patches and b.supports_frames
