"""Voxel-wise losses on probability maps.

Probabilities are clamped to ``[CLAMP, 1 - CLAMP]`` before any log; the
clamp passes gradient only where it is inactive.
"""
import numpy as np

from .autograd import Node, ShapeError

CLAMP = 1e-7


def _check(pred, target, name):
    if pred.shape != np.shape(target):
        raise ShapeError(f"{name}: prediction {pred.shape} vs target {np.shape(target)}")


def _clamped(pred):
    p = pred.value
    lo, hi = p.dtype.type(CLAMP), p.dtype.type(1 - CLAMP)
    pc = np.clip(p, lo, hi)
    inside = (p >= lo) & (p <= hi)
    return pc, inside


def loss_mse(pred, target):
    _check(pred, target, "loss_mse")
    t = np.asarray(target, dtype=pred.dtype)
    d = pred.value - t
    n = d.size
    out = np.asarray(np.mean(d * d), dtype=pred.dtype)

    def back(g):
        return (g * (2.0 / n) * d,)

    return Node(out, (pred,), back, "loss_mse")


def loss_ce(pred, target, beta=0.5):
    """Class-balanced binary cross-entropy, averaged over voxels."""
    _check(pred, target, "loss_ce")
    y = np.asarray(target, dtype=pred.dtype)
    p, inside = _clamped(pred)
    n = p.size
    terms = beta * y * np.log(p) + (1 - beta) * (1 - y) * np.log1p(-p)
    out = np.asarray(-terms.sum() / n, dtype=pred.dtype)

    def back(g):
        d = -(beta * y / p - (1 - beta) * (1 - y) / (1 - p)) / n
        return (np.where(inside, g * d, 0).astype(pred.dtype),)

    return Node(out, (pred,), back, "loss_ce")


def loss_focal(pred, target, alpha=0.25, gamma=2.0):
    """Binary focal loss.

    Positives are weighted by ``alpha (1-p)^gamma`` and negatives by
    ``(1-alpha) p^gamma``.
    """
    _check(pred, target, "loss_focal")
    y = np.asarray(target, dtype=pred.dtype)
    p, inside = _clamped(pred)
    n = p.size
    q = 1 - p
    logp, logq = np.log(p), np.log1p(-p)
    wpos = alpha * q ** gamma
    wneg = (1 - alpha) * p ** gamma
    terms = wpos * y * logp + wneg * (1 - y) * logq
    out = np.asarray(-terms.sum() / n, dtype=pred.dtype)

    def back(g):
        dpos = alpha * y * (q ** gamma / p - gamma * q ** (gamma - 1) * logp)
        dneg = (1 - alpha) * (1 - y) * (gamma * p ** (gamma - 1) * logq - p ** gamma / q)
        d = -(dpos + dneg) / n
        return (np.where(inside, g * d, 0).astype(pred.dtype),)

    return Node(out, (pred,), back, "loss_focal")


def detection_loss(pred, target, alpha=0.25, gamma=2.0, beta=0.5):
    """Per-head objective: focal plus cross-entropy on the lesion probability."""
    from .autograd import weighted_sum

    return weighted_sum([loss_focal(pred, target, alpha, gamma), loss_ce(pred, target, beta)],
                        [1.0, 1.0])
