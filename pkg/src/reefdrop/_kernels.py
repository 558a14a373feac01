"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``REEFDROP_DISABLE_NUMBA`` is
unset (or "0"). Both paths are importable directly as ``numpy_impl`` and
``numba_impl`` so tests and benchmarks can compare them.
"""

import os
from types import SimpleNamespace

import numpy as np

P_FLOOR = 1e-12
_LOG_P_FLOOR = float(np.log(P_FLOOR))


# --------------------------------------------------------------------------
# numpy
# --------------------------------------------------------------------------


def _grid_class_counts_np(probs):
    # probs: (frames, patches, C); argmax takes the first maximum
    frames, _, n_classes = probs.shape
    pred = np.argmax(probs, axis=2)
    out = np.zeros((frames, n_classes), dtype=np.int64)
    for c in range(n_classes):
        out[:, c] = np.count_nonzero(pred == c, axis=1)
    return out


def _confusion_tally_np(preds, truths, n_classes):
    flat = truths.astype(np.int64) * n_classes + preds.astype(np.int64)
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _sweep_tally_np(scores, truths, alphas):
    # rows: alpha; cols: tp, fp, fn, tn
    pos = scores[None, :] >= alphas[:, None]
    t = truths[None, :].astype(bool)
    return np.stack(
        [
            np.count_nonzero(pos & t, axis=1),
            np.count_nonzero(pos & ~t, axis=1),
            np.count_nonzero(~pos & t, axis=1),
            np.count_nonzero(~pos & ~t, axis=1),
        ],
        axis=1,
    ).astype(np.int64)


def _focal_loss_grad_np(logits, labels, weights, gamma):
    n, c = logits.shape
    rows = np.arange(n)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1)
    q = e / s[:, None]
    e_true = e[rows, labels]
    others = s - e_true
    z_true = logits[rows, labels]
    at_max = z_true == m[:, 0]
    with np.errstate(divide="ignore"):
        logp = np.where(at_max, -np.log1p(others), (z_true - m[:, 0]) - np.log(s))
    p = q[rows, labels]
    one_minus = others / s
    w = weights[labels]
    if gamma == 0.0:
        mod = np.ones(n)
        coef = -w
    else:
        mod = one_minus ** gamma
        safe = np.where(one_minus > 0, one_minus, 1.0)
        tail = np.where(one_minus > 0, gamma * p * safe ** (gamma - 1.0) * logp, 0.0)
        coef = -w * (mod - tail)
    loss = float(np.sum(-w * mod * logp) / n)
    onehot = np.zeros_like(q)
    onehot[rows, labels] = 1.0
    grad = coef[:, None] * (onehot - q) / n
    n_floor = int(np.count_nonzero(logp < _LOG_P_FLOOR))
    return loss, grad, n_floor


numpy_impl = SimpleNamespace(
    name="numpy",
    grid_class_counts=_grid_class_counts_np,
    confusion_tally=_confusion_tally_np,
    sweep_tally=_sweep_tally_np,
    focal_loss_grad=_focal_loss_grad_np,
)


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------


def _build_numba():
    from numba import njit

    @njit(cache=True)
    def grid_class_counts(probs):
        frames, patches, n_classes = probs.shape
        out = np.zeros((frames, n_classes), dtype=np.int64)
        for f in range(frames):
            for p in range(patches):
                best = 0
                best_v = probs[f, p, 0]
                for c in range(1, n_classes):
                    if probs[f, p, c] > best_v:
                        best_v = probs[f, p, c]
                        best = c
                out[f, best] += 1
        return out

    @njit(cache=True)
    def confusion_tally(preds, truths, n_classes):
        out = np.zeros((n_classes, n_classes), dtype=np.int64)
        for i in range(preds.shape[0]):
            out[truths[i], preds[i]] += 1
        return out

    @njit(cache=True)
    def sweep_tally(scores, truths, alphas):
        out = np.zeros((alphas.shape[0], 4), dtype=np.int64)
        for a in range(alphas.shape[0]):
            alpha = alphas[a]
            for i in range(scores.shape[0]):
                pos = scores[i] >= alpha
                if truths[i]:
                    out[a, 0 if pos else 2] += 1
                else:
                    out[a, 1 if pos else 3] += 1
        return out

    @njit(cache=True)
    def focal_loss_grad(logits, labels, weights, gamma):
        n, c = logits.shape
        grad = np.empty((n, c))
        q = np.empty(c)
        total = 0.0
        n_floor = 0
        for i in range(n):
            y = labels[i]
            m = logits[i, 0]
            for k in range(1, c):
                if logits[i, k] > m:
                    m = logits[i, k]
            s = 0.0
            for k in range(c):
                q[k] = np.exp(logits[i, k] - m)
                s += q[k]
            others = s - q[y]
            if logits[i, y] == m:
                logp = -np.log1p(others)
            else:
                logp = (logits[i, y] - m) - np.log(s)
            for k in range(c):
                q[k] /= s
            p = q[y]
            one_minus = others / s
            w = weights[y]
            if gamma == 0.0:
                mod = 1.0
                coef = -w
            else:
                mod = one_minus ** gamma
                tail = 0.0
                if one_minus > 0.0:
                    tail = gamma * p * one_minus ** (gamma - 1.0) * logp
                coef = -w * (mod - tail)
            total += -w * mod * logp
            if logp < _LOG_P_FLOOR:
                n_floor += 1
            for k in range(c):
                ind = 1.0 if k == y else 0.0
                grad[i, k] = coef * (ind - q[k]) / n
        return total / n, grad, n_floor

    return SimpleNamespace(
        name="numba",
        grid_class_counts=grid_class_counts,
        confusion_tally=confusion_tally,
        sweep_tally=sweep_tally,
        focal_loss_grad=focal_loss_grad,
    )


try:
    numba_impl = _build_numba()
except ImportError:  # numba is optional
    numba_impl = None

_disabled = os.environ.get("REEFDROP_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")
active = numpy_impl if (_disabled or numba_impl is None) else numba_impl
BACKEND = active.name


def grid_class_counts(probs):
    """Per-frame argmax class counts for a (frames, patches, C) array."""
    return active.grid_class_counts(np.ascontiguousarray(probs, dtype=np.float64))


def confusion_tally(preds, truths, n_classes):
    return active.confusion_tally(
        np.ascontiguousarray(preds, dtype=np.int64),
        np.ascontiguousarray(truths, dtype=np.int64),
        int(n_classes),
    )


def sweep_tally(scores, truths, alphas):
    """(A, 4) array of tp, fp, fn, tn for ``scores >= alpha`` at each alpha."""
    return active.sweep_tally(
        np.ascontiguousarray(scores, dtype=np.float64),
        np.ascontiguousarray(truths, dtype=np.bool_),
        np.ascontiguousarray(alphas, dtype=np.float64),
    )


def focal_loss_grad(logits, labels, weights, gamma):
    """Mean class-weighted focal loss over softmax(logits) and its logit gradient.

    Returns ``(loss, grad, n_floor)`` where ``n_floor`` counts rows whose true-class
    probability fell below ``P_FLOOR``.
    """
    return active.focal_loss_grad(
        np.ascontiguousarray(logits, dtype=np.float64),
        np.ascontiguousarray(labels, dtype=np.int64),
        np.ascontiguousarray(weights, dtype=np.float64),
        float(gamma),
    )
