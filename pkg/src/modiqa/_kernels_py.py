"""Pure numpy implementations of the compiled kernels in ``_kernels.pyx``."""

import numpy as np

# rows per block in kendall_counts; bounds the temporary at block * n floats
_BLOCK = 256


def kendall_counts(x, y):
    """Return ``(concordant - discordant, pairs tied in x, pairs tied in y)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = x.shape[0]
    if y.shape[0] != n:
        raise ValueError(f"length mismatch: {n} vs {y.shape[0]}")
    s = tx = ty = 0
    idx = np.arange(n)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        upper = idx[None, :] > idx[start:stop, None]
        sx = np.sign(x[start:stop, None] - x[None, :])
        sy = np.sign(y[start:stop, None] - y[None, :])
        s += int(np.sum((sx * sy)[upper]))
        tx += int(np.count_nonzero((sx == 0) & upper))
        ty += int(np.count_nonzero((sy == 0) & upper))
    return s, tx, ty


def box_mean(a, p):
    """Mean over every ``p x p`` window of a 2-D array (valid positions only)."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape
    if p < 1 or p > h or p > w:
        raise ValueError(f"window {p} does not fit array of shape {(h, w)}")
    sat = np.zeros((h + 1, w + 1))
    sat[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    total = sat[p:, p:] - sat[:-p, p:] - sat[p:, :-p] + sat[:-p, :-p]
    return total / (p * p)


def pairwise_rank(pred, target, eps):
    """Summed pairwise ranking loss over all ``i < j`` and its gradient in ``pred``."""
    yp = np.asarray(pred, dtype=np.float64)
    yt = np.asarray(target, dtype=np.float64)
    n = yp.shape[0]
    if yt.shape[0] != n:
        raise ValueError(f"length mismatch: {n} vs {yt.shape[0]}")
    dt = yt[:, None] - yt[None, :]
    dp = yp[:, None] - yp[None, :]
    w = dt / (np.abs(dt) + eps)
    val = -w * dp
    active = np.triu(val > 0, k=1)
    total = float(np.sum(val[active]))
    wa = np.where(active, w, 0.0)
    grad = wa.T.sum(axis=1) - wa.sum(axis=1)
    return total, grad
