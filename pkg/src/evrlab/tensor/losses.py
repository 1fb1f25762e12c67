"""Mean-reduced losses."""
from __future__ import annotations

import numpy as np

from .core import ShapeError, Tensor, _accum, _node, as_tensor, clamp, log, log_softmax, mean

PROB_FLOOR = 1e-7


class NonFiniteLoss(FloatingPointError):
    pass


def check_finite(loss: Tensor, where: str = "") -> Tensor:
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteLoss(f"non-finite loss {loss.data!r}{' at ' + where if where else ''}")
    return loss


def cross_entropy(logits, target) -> Tensor:
    """Mean negative log-likelihood of integer class targets under softmax(logits)."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=int).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != target.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {target.shape}")
    lp = log_softmax(logits, axis=-1)
    picked = lp[np.arange(target.shape[0]), target]
    return -mean(picked)


def smooth_l1(pred, target) -> Tensor:
    """0.5 d^2 where |d| < 1, |d| - 0.5 elsewhere; averaged over elements."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: prediction {pred.shape} vs target {target.shape}")
    d = pred.data - target
    small = np.abs(d) < 1.0
    val = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    n = d.size

    def bw(out):
        _accum(pred, out.grad * np.where(small, d, np.sign(d)) / n)

    return _node(np.asarray(val.sum() / n, dtype=pred.dtype), (pred,), bw)


def binary_cross_entropy(prob, mask) -> Tensor:
    prob = as_tensor(prob)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=prob.dtype)
    if prob.shape != mask.shape:
        raise ShapeError(f"binary_cross_entropy: probabilities {prob.shape} vs mask {mask.shape}")
    p = clamp(prob, PROB_FLOOR, 1 - PROB_FLOOR)
    return -mean(log(p) * mask + log(1 - p) * (1 - mask))
