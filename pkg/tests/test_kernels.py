"""Both kernel paths must agree; the numba path is skipped when numba is absent."""

import os
import subprocess
import sys

import numpy as np
import pytest

from reefdrop import _kernels

IMPLS = [_kernels.numpy_impl] + ([_kernels.numba_impl] if _kernels.numba_impl is not None else [])
needs_numba = pytest.mark.skipif(_kernels.numba_impl is None, reason="numba not installed")


@pytest.mark.parametrize("impl", IMPLS, ids=lambda i: i.name)
def test_grid_class_counts(impl, rng):
    probs = rng.dirichlet(np.ones(3), size=(50, 28))
    probs[0, :, :] = 1 / 3  # full ties count as class 0
    counts = impl.grid_class_counts(probs)
    assert counts.shape == (50, 3)
    assert np.all(counts.sum(axis=1) == 28)
    assert counts[0].tolist() == [28, 0, 0]
    ref = np.stack([np.bincount(p.argmax(axis=1), minlength=3) for p in probs])
    assert np.array_equal(counts, ref)


@pytest.mark.parametrize("impl", IMPLS, ids=lambda i: i.name)
def test_confusion_tally(impl):
    cm = impl.confusion_tally(np.array([0, 1, 2, 2, 0]), np.array([0, 1, 1, 2, 2]), 3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 1], [1, 0, 1]]


@pytest.mark.parametrize("impl", IMPLS, ids=lambda i: i.name)
def test_sweep_tally(impl):
    scores = np.array([0.1, 0.5, 0.9, 0.5])
    truths = np.array([False, True, True, False])
    t = impl.sweep_tally(scores, truths, np.array([0.0, 0.5, 0.6, 1.0]))
    assert t.tolist() == [[2, 2, 0, 0], [2, 1, 0, 1], [1, 0, 1, 2], [0, 0, 2, 2]]


@pytest.mark.parametrize("impl", IMPLS, ids=lambda i: i.name)
def test_focal_kernel_frozen_value(impl):
    loss, grad, n_floor = impl.focal_loss_grad(np.array([[1.0, 2.0, 0.0]]), np.array([2]), np.ones(3), 1.0)
    assert loss == pytest.approx(2.190847819497026, rel=1e-14)
    assert n_floor == 0
    assert grad.sum() == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("impl", IMPLS, ids=lambda i: i.name)
def test_focal_kernel_extreme_logits_stay_finite(impl):
    loss, grad, n_floor = impl.focal_loss_grad(np.array([[0.0, 800.0], [800.0, 0.0]]), np.array([0, 0]),
                                               np.ones(2), 2.0)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))
    assert loss == pytest.approx(400.0, rel=1e-12)
    assert n_floor == 1


@needs_numba
def test_paths_agree(rng):
    a, b = _kernels.numpy_impl, _kernels.numba_impl
    probs = rng.dirichlet(np.ones(3), size=(200, 28))
    assert np.array_equal(a.grid_class_counts(probs), b.grid_class_counts(probs))
    preds, truths = rng.integers(0, 3, 1000), rng.integers(0, 3, 1000)
    assert np.array_equal(a.confusion_tally(preds, truths, 3), b.confusion_tally(preds, truths, 3))
    scores, tb = rng.uniform(size=500), rng.uniform(size=500) < 0.4
    alphas = np.linspace(0, 1, 21)
    assert np.array_equal(a.sweep_tally(scores, tb, alphas), b.sweep_tally(scores, tb, alphas))
    for gamma in (0.0, 0.5, 2.0):
        z = rng.normal(scale=3, size=(64, 3))
        y = rng.integers(0, 3, 64)
        w = rng.uniform(0.5, 5, 3)
        la, ga, fa = a.focal_loss_grad(z, y, w, gamma)
        lb, gb, fb = b.focal_loss_grad(z, y, w, gamma)
        assert la == pytest.approx(lb, rel=1e-12)
        np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-15)
        assert fa == fb


def test_env_flag_selects_numpy():
    env = dict(os.environ, REEFDROP_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from reefdrop import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


@needs_numba
def test_default_is_numba():
    env = {k: v for k, v in os.environ.items() if k != "REEFDROP_DISABLE_NUMBA"}
    out = subprocess.run([sys.executable, "-c", "from reefdrop import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numba"
