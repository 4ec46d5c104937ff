"""Slow, obviously-correct reference implementations used only by the tests."""

import itertools

import numpy as np


def naive_conv(x, w, b, stride):
    """Direct summation cross-correlation with zero same-padding, (Q, H, W) input."""
    Q, H, W = x.shape
    P, _, k, _ = w.shape
    pad = (k - 1) // 2
    Ho, Wo = -(-H // stride), -(-W // stride)
    out = np.zeros((P, Ho, Wo), dtype=np.float64)
    for p in range(P):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0 if b is None else float(b[p])
                for q in range(Q):
                    for di in range(k):
                        for dj in range(k):
                            r, c = i * stride + di - pad, j * stride + dj - pad
                            if 0 <= r < H and 0 <= c < W:
                                acc += float(w[p, q, di, dj]) * float(x[q, r, c])
                out[p, i, j] = acc
    return out


def pearson_abs(z, x):
    z = np.asarray(z, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    zc, xc = z - z.mean(), x - x.mean()
    den = np.sqrt((zc @ zc) * (xc @ xc))
    return 0.0 if den == 0 else abs(float(zc @ xc) / den)


def brute_force_selection(rho, C):
    """Enumerate every C-subset; highest total score wins, then the lexicographically
    smallest index set. Returned in score-descending, index-ascending order."""
    scores = [sum(row) for row in np.asarray(rho, dtype=np.float64).tolist()]
    best, best_key = None, None
    for subset in itertools.combinations(range(len(scores)), C):
        key = (-sum(scores[i] for i in subset), subset)
        if best_key is None or key < best_key:
            best, best_key = subset, key
    return tuple(sorted(best, key=lambda i: (-scores[i], i)))


def central_difference(f, arr, h=1e-5):
    """Numerical gradient of scalar ``f()`` with respect to every element of ``arr`` (in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor=1e-10):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = np.maximum(np.abs(a), np.abs(b))
    return np.where(den < floor, np.abs(a - b) / floor, np.abs(a - b) / np.maximum(den, floor))
