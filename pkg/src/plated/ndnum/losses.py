import numpy as np

from .ops import ShapeError

CLAMP = 1e-7


def _clamp(pred):
    pc = np.clip(pred, CLAMP, 1 - CLAMP)
    # the clip has zero derivative where it is active
    inside = (pred >= CLAMP) & (pred <= 1 - CLAMP)
    return pc, inside


def bce(pred, target):
    """Mean binary cross-entropy and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"bce shape mismatch: pred {pred.shape} vs target {target.shape}")
    pc, inside = _clamp(pred)
    n = pred.size
    loss = -np.mean(target * np.log(pc) + (1 - target) * np.log(1 - pc), dtype=np.float64)
    grad = ((pc - target) / (pc * (1 - pc)) / n) * inside
    return float(loss), grad.astype(pred.dtype)


def one_hot(ids, depth, dtype=np.float32):
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (depth,), dtype=dtype)
    np.put_along_axis(out, ids[..., None], 1, axis=-1)
    return out


def cce(pred, target, mask=None):
    """Masked categorical cross-entropy over the last axis.

    ``target`` is either one-hot with the same shape as ``pred`` or integer
    ids shaped like ``pred.shape[:-1]``. ``mask`` (same shape as the ids)
    selects the scored positions; the loss is the mean over them.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if np.issubdtype(target.dtype, np.integer) and target.shape == pred.shape[:-1]:
        target = one_hot(target, pred.shape[-1], pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"cce shape mismatch: pred {pred.shape} vs target {target.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:-1], dtype=pred.dtype)
    mask = np.asarray(mask, dtype=pred.dtype)
    if mask.shape != pred.shape[:-1]:
        raise ShapeError(f"cce mask shape {mask.shape} does not match positions {pred.shape[:-1]}")
    count = float(mask.sum())
    if count == 0:
        raise ValueError("cce: every position is masked")
    pc, inside = _clamp(pred)
    per_pos = -(target * np.log(pc)).sum(axis=-1, dtype=np.float64)
    loss = float((per_pos * mask).sum() / count)
    grad = (-target / pc) * (mask[..., None] / count) * inside
    return loss, grad.astype(pred.dtype)


def loss(kind, pred, target, mask=None):
    if kind == "bce":
        if mask is not None:
            raise ValueError("mask applies to cce only")
        return bce(pred, target)
    if kind == "cce":
        return cce(pred, target, mask)
    raise ValueError(f"unknown loss {kind!r}")
