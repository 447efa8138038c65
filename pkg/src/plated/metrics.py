"""Threshold-based multi-label metrics and sequence perplexity.

IoU and F1 are averaged per sample. A sample with empty prediction and empty
truth scores 1 on both.
"""

from dataclasses import dataclass

import numpy as np

CLAMP = 1e-7


@dataclass
class ThresholdedPrediction:
    probabilities: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        self.probabilities = np.asarray(self.probabilities)

    @property
    def binary(self):
        return self.probabilities >= self.threshold


def _sets(pred, truth, threshold):
    if not isinstance(pred, ThresholdedPrediction):
        pred = ThresholdedPrediction(pred, threshold)
    p = pred.binary
    t = np.asarray(truth) > 0.5
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs truth {t.shape}")
    if p.ndim == 1:
        p, t = p[None], t[None]
    return p, t


def per_sample_iou(pred, truth, threshold=0.5):
    p, t = _sets(pred, truth, threshold)
    inter = (p & t).sum(axis=1)
    union = (p | t).sum(axis=1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def per_sample_f1(pred, truth, threshold=0.5):
    p, t = _sets(pred, truth, threshold)
    inter = (p & t).sum(axis=1)
    denom = p.sum(axis=1) + t.sum(axis=1)
    # 2PR/(P+R) == 2|P∩T|/(|P|+|T|); zero when exactly one side is empty
    return np.where(denom == 0, 1.0, 2 * inter / np.maximum(denom, 1))


def iou(pred, truth, threshold=0.5):
    return float(per_sample_iou(pred, truth, threshold).mean())


def f1(pred, truth, threshold=0.5):
    return float(per_sample_f1(pred, truth, threshold).mean())


def binary_accuracy(pred, truth, threshold=0.5):
    p, t = _sets(pred, truth, threshold)
    return float((p == t).mean())


def multilabel_report(probs, truth, threshold=0.5):
    return {
        "accuracy": binary_accuracy(probs, truth, threshold),
        "f1": f1(probs, truth, threshold),
        "iou": iou(probs, truth, threshold),
    }


def perplexity(dist, target_ids, mask=None):
    """exp of the mean negative log-probability of the targets over masked positions."""
    dist = np.asarray(dist)
    target_ids = np.asarray(target_ids)
    if target_ids.shape != dist.shape[:-1]:
        raise ValueError(f"target ids {target_ids.shape} do not match positions {dist.shape[:-1]}")
    mask = np.ones(target_ids.shape) if mask is None else np.asarray(mask)
    if mask.shape != target_ids.shape:
        raise ValueError(f"mask {mask.shape} does not match positions {target_ids.shape}")
    sel = mask > 0
    if not sel.any():
        raise ValueError("perplexity: every position is masked")
    p = np.take_along_axis(dist, target_ids[..., None], axis=-1)[..., 0]
    nll = -np.log(np.clip(p[sel].astype(np.float64), CLAMP, 1 - CLAMP))
    return float(np.exp(nll.mean()))


def token_accuracy(dist, target_ids, mask=None):
    pred = np.asarray(dist).argmax(axis=-1)
    mask = np.ones(pred.shape) if mask is None else np.asarray(mask)
    sel = mask > 0
    return float((pred[sel] == np.asarray(target_ids)[sel]).mean())
