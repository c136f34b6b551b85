"""Correlation coefficients and the monotone logistic mapping used before PLCC."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from modiqa import kernels
from modiqa.data import average_ranks


class UndefinedCorrelationError(ValueError):
    """A correlation is undefined (constant input or too few samples)."""


class FitError(RuntimeError):
    """The logistic fit did not converge."""


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise UndefinedCorrelationError("need at least two samples")
    return x, y


def plcc(x, y):
    """Pearson linear correlation."""
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def srocc(x, y):
    """Spearman rank correlation: Pearson correlation of average-tie ranks."""
    x, y = _pair(x, y)
    return plcc(average_ranks(x), average_ranks(y))


def krocc(x, y):
    """Kendall tau-b."""
    x, y = _pair(x, y)
    s, tx, ty = kernels.kendall_counts(x, y)
    n0 = x.size * (x.size - 1) // 2
    denom = (n0 - tx) * (n0 - ty)
    if denom == 0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return min(1.0, max(-1.0, s / math.sqrt(denom)))


def logistic4(s, b1, b2, b3, b4):
    """``b1 * (1/2 - 1 / (1 + exp(b2 (s - b3)))) + b4``."""
    z = np.clip(b2 * (np.asarray(s, dtype=np.float64) - b3), -500, 500)
    return b1 * (0.5 - 1.0 / (1.0 + np.exp(z))) + b4


@dataclass
class LogisticFit:
    params: np.ndarray
    mapped: np.ndarray
    residual: float

    def __iter__(self):
        return iter((self.params, self.mapped))


def _jacobian(beta, s, _t):
    b1, b2, b3, _ = beta
    z = np.clip(b2 * (s - b3), -500, 500)
    sig = 1.0 / (1.0 + np.exp(-z))  # 1 - 1/(1+e^z)
    dsig = sig * (1.0 - sig)
    return np.stack([sig - 0.5, b1 * dsig * (s - b3), -b1 * dsig * b2, np.ones_like(s)], axis=1)


def logistic_fit(predictions, targets, max_nfev=2000):
    """Least-squares fit of the 4-parameter monotone logistic.

    Two starts are tried (a data-range start and a near-linear start) with
    Levenberg-Marquardt; the lower residual wins.
    """
    s = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if s.size != t.size:
        raise ValueError(f"length mismatch: {s.size} vs {t.size}")
    if s.size < 5:
        raise ValueError("logistic fit needs at least 5 points")
    s_std = s.std()
    if s_std == 0:
        raise UndefinedCorrelationError("cannot fit constant predictions")
    t_range = float(t.max() - t.min()) or 1.0
    sign = 1.0 if np.corrcoef(s, t)[0, 1] >= 0 else -1.0 if t.std() > 0 else 1.0
    med = float(np.median(s))
    starts = [np.array([t_range, sign / s_std, med, float(t.mean())])]
    # near-linear start: small slope b2, b1 chosen so b1*b2/4 matches the OLS slope
    slope = float(np.polyfit(s, t, 1)[0]) if t.std() > 0 else 0.0
    b2 = 0.1 / s_std
    b1 = 4.0 * slope / b2 if slope != 0 else t_range
    starts.append(np.array([b1, b2, float(s.mean()), float(t.mean())]))

    def resid(beta, s_, t_):
        return logistic4(s_, *beta) - t_

    best = None
    for beta0 in starts:
        try:
            res = least_squares(resid, beta0, jac=_jacobian, args=(s, t), method="lm", max_nfev=max_nfev)
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(res.x)):
            continue
        sse = float(np.sum(res.fun**2))
        if best is None or sse < best[1]:
            best = (res, sse)
    sst = float(np.sum((t - t.mean()) ** 2))
    # an exactly linear relation is only reached as b2 -> 0, so LM can stop on the
    # evaluation cap with a residual that is already negligible
    if best is None or not (best[0].success or best[1] <= 1e-8 * max(sst, 1e-300)):
        rep = "no finite solution" if best is None else f"residual {best[1]:.6g} after {best[0].nfev} evaluations"
        raise FitError(f"logistic fit did not converge: {rep}")
    params = best[0].x
    return LogisticFit(params=params, mapped=logistic4(s, *params), residual=math.sqrt(best[1] / s.size))
