"""Training objectives: mean absolute error plus pairwise ranking loss.

Throughout, ``pred`` holds the model's predicted scores and ``target`` the
expected (subjective) scores.
"""

from __future__ import annotations

import numpy as np

from modiqa import autodiff as ad
from modiqa.autodiff import ContractError, DimensionError, Tensor

RANK_EPS = 1e-6


def _as_pred(pred):
    return pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))


def pairwise_rank_loss(pred1, pred2, target1, target2, eps=RANK_EPS):
    """Loss for one pair: ``max(0, -(t1 - t2)(p1 - p2) / (|t1 - t2| + eps))``.

    Zero when the predicted order agrees with the target order or the targets
    tie; otherwise the predicted gap (scaled by ``|dt| / (|dt| + eps)``).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    dt = target1 - target2
    return max(0.0, -dt * (pred1 - pred2) / (abs(dt) + eps))


def mae_loss(pred, target):
    pred = _as_pred(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape or pred.data.size == 0:
        raise DimensionError(f"mae_loss needs equal nonempty shapes, got {pred.shape} and {target.shape}")
    return ad.mean(ad.tabs(ad.sub(pred, target)))


def batch_rank_loss(pred, target, eps=RANK_EPS, reduction="mean"):
    """Pairwise ranking loss over all ``C(N, 2)`` pairs of a batch, summed or averaged."""
    pred = _as_pred(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim != 1 or pred.shape != target.shape:
        raise DimensionError(f"batch_rank_loss needs equal 1-D shapes, got {pred.shape} and {target.shape}")
    n = pred.shape[0]
    if n < 2:
        raise ContractError("batch_rank_loss needs at least two samples")
    if eps <= 0:
        raise ContractError("eps must be positive")
    total = ad.pairwise_rank_sum(pred, target, eps)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return ad.div(total, n * (n - 1) / 2.0)
    raise ValueError(f"unknown reduction {reduction!r}")


def total_loss(pred, target, eps=RANK_EPS, reduction="mean", mae_weight=1.0, rank_weight=1.0):
    """``MAE + rank`` (plain sum by default). Batches of one use MAE only."""
    pred = _as_pred(pred)
    loss = ad.mul(mae_loss(pred, target), mae_weight)
    if pred.shape[0] >= 2 and rank_weight:
        loss = ad.add(loss, ad.mul(batch_rank_loss(pred, target, eps, reduction), rank_weight))
    return loss
