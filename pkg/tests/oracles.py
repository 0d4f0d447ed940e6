"""Independent reference implementations used only by the tests."""

from fractions import Fraction

import numpy as np


def brute_force_split(X, y, min_leaf=1):
    """Exhaustive (feature, midpoint) scan in exact rational arithmetic.

    Returns (feature, threshold, reduction) of the best strictly positive
    reduction, first feature then first threshold on exact ties, or None.
    """
    n, m = X.shape
    yf = [Fraction(float(v)) for v in y]
    S = sum(yf)
    base = S * S / n
    best = None
    for f in range(m):
        values = sorted({float(v) for v in X[:, f]})
        for a, b in zip(values[:-1], values[1:]):
            thr = a + (b - a) / 2.0
            if not thr < b:
                thr = a
            left = [yf[i] for i in range(n) if X[i, f] <= thr]
            nl = len(left)
            nr = n - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            sl = sum(left)
            sr = S - sl
            red = sl * sl / nl + sr * sr / nr - base
            if red > 0 and (best is None or red > best[2]):
                best = (f, thr, red)
    return None if best is None else (best[0], best[1], float(best[2]))


def leaf_objective(G, H, lam, w):
    return G * w + 0.5 * (H + lam) * w * w


def sse(y):
    y = np.asarray(y, dtype=float)
    return float(np.sum((y - y.mean()) ** 2))
