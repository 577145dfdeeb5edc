"""SGD with momentum and the two learning-rate schedules."""
import math


def sgd_step(params, lr, momentum=0.9):
    """In-place heavy-ball update: ``buf = m*buf + g``; ``p -= lr*buf``.

    Parameters without a gradient are left untouched. Gradients are
    cleared afterwards.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    for p in params:
        if p.grad is None:
            continue
        g = p.grad.astype(p.value.dtype, copy=False)
        if momentum:
            p.momentum *= p.value.dtype.type(momentum)
            p.momentum += g
            step = p.momentum
        else:
            p.momentum[...] = g
            step = g
        p.value -= p.value.dtype.type(lr) * step
        p.grad = None


def step_lr(lr0, epoch, gamma=0.5, step_size=10):
    return lr0 * gamma ** math.floor(epoch / step_size)


def poly_lr(lr0, epoch, epoch_max):
    if not 0 <= epoch <= epoch_max:
        raise ValueError(f"epoch {epoch} outside [0, {epoch_max}]")
    return lr0 * (1 - epoch / epoch_max)


def schedule(kind, epoch, lr0, *, epoch_max=None, gamma=0.5, step_size=10):
    if kind == "step":
        return step_lr(lr0, epoch, gamma, step_size)
    if kind == "poly":
        if epoch_max is None:
            raise ValueError("poly schedule needs epoch_max")
        return poly_lr(lr0, epoch, epoch_max)
    raise ValueError(f"unknown schedule {kind!r}")
