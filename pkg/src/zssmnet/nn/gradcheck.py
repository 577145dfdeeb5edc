"""Central finite-difference gradient checker."""
import numpy as np

from . import autograd as ag


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _same_branches(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y)
                                    for x, y in zip(a, b))


def grad_check(loss_fn, leaves, eps=1e-6, samples_per_leaf=8, seed=0, max_tries=50):
    """Compare analytic and numeric gradients of ``loss_fn()`` w.r.t. ``leaves``.

    ``loss_fn`` rebuilds the graph from the leaves' current values and
    returns a scalar node; leaves must hold float64 values. A coordinate
    whose +-eps probes land on different branches of a kinked op
    (leaky ReLU, max pool, absolute difference) is not differentiable at
    that scale and is replaced by another one, at most ``max_tries``
    times per leaf. Returns the maximum relative error over the
    coordinates checked.
    """
    rng = np.random.default_rng(seed)
    for leaf in leaves:
        if leaf.value.dtype != np.float64:
            raise TypeError("grad_check needs float64 leaves")
        leaf.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(l.value) if l.grad is None else l.grad.copy() for l in leaves]
    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.value.reshape(-1)
        k = min(samples_per_leaf, flat.size)
        checked = tries = 0
        for idx in rng.permutation(flat.size):
            if checked == k or tries > max_tries:
                break
            orig = flat[idx]
            flat[idx] = orig + eps
            with ag.record_branches() as up_log:
                up = float(loss_fn().value)
            flat[idx] = orig - eps
            with ag.record_branches() as down_log:
                down = float(loss_fn().value)
            flat[idx] = orig
            if not _same_branches(up_log, down_log):
                tries += 1
                continue
            numeric = (up - down) / (2 * eps)
            worst = max(worst, relative_error(float(grad.reshape(-1)[idx]), numeric))
            checked += 1
    for leaf in leaves:
        leaf.grad = None
    return worst
