"""Central finite-difference gradient checks for layers, models and losses."""

import numpy as np

from . import losses


def rel_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def _coords(shape, rng, samples):
    size = int(np.prod(shape))
    flat = np.arange(size) if size <= samples else rng.choice(size, samples, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def _compare(f, array, analytic, rng, h, samples):
    worst = 0.0
    for idx in _coords(array.shape, rng, samples):
        old = array[idx].copy()
        array[idx] = old + h
        fp = f()
        array[idx] = old - h
        fm = f()
        array[idx] = old
        worst = max(worst, rel_error(float(analytic[idx]), (fp - fm) / (2 * h)))
    return worst


def grad_check(layer, x, rng, h=1e-3, samples=40, train=True, numeric_dtype=np.float64):
    """Max relative error between analytic and numeric gradients of ``layer``.

    ``layer`` is anything with ``forward(x, train)``/``backward(dout)`` and a
    ``params`` mapping (a Layer) or ``params()`` method (a Sequential). The
    scalar probed is ``sum(out * P)`` for a fixed random projection ``P``.
    Integer inputs (embedding ids) are not perturbed.

    The analytic gradient is computed at the layer's own precision. The finite
    differences are evaluated at the same point but in ``numeric_dtype``:
    with float32 forwards the roundoff of ``f(x+h) - f(x-h)`` alone is about
    1e-4 for h=1e-3, which swamps small gradient components.
    """
    params = layer.params() if callable(layer.params) else layer.params
    out = layer.forward(x, train=train)
    proj = rng.normal(size=out.shape)

    for p in params.values():
        p.zero_grad()
    layer.forward(x, train=train)
    dx = layer.backward(proj.astype(out.dtype))
    analytic = {k: p.grad.copy() for k, p in params.items() if p.trainable}

    is_float = np.issubdtype(np.asarray(x).dtype, np.floating)
    xn = np.asarray(x).astype(numeric_dtype) if is_float else x
    saved = {k: p.value for k, p in params.items()}
    for p in params.values():
        p.value = p.value.astype(numeric_dtype)

    def objective():
        return float(np.sum(layer.forward(xn, train=train).astype(np.float64) * proj))

    try:
        worst = 0.0
        if dx is not None and is_float:
            worst = _compare(objective, xn, dx, rng, h, samples)
        for k, g in analytic.items():
            worst = max(worst, _compare(objective, params[k].value, g, rng, h, samples))
    finally:
        for k, p in params.items():
            p.value = saved[k]
    return worst


def grad_check_loss(kind, pred, target, rng, mask=None, h=1e-3, samples=40,
                    numeric_dtype=np.float64):
    """Same check for a loss function's gradient w.r.t. its prediction input."""
    _, grad = losses.loss(kind, pred, target, mask)
    pred = np.asarray(pred).astype(numeric_dtype)

    def objective():
        return losses.loss(kind, pred, target, mask)[0]

    return _compare(objective, pred, grad, rng, h, samples)
