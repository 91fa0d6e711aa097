"""Numpy implementations of the compiled kernels (same signatures).

These are used when the extension is not built, or when
``DFM_PURE_PYTHON=1``. Results agree with the compiled versions to
rounding, not bitwise.
"""

import numpy as np

LN_EPS = 1e-5
_CHUNK = 256


def dense_rows(x, w, b):
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    if w.shape[0] != x.shape[1] or b.shape[0] != w.shape[1]:
        raise ValueError("dense_rows: shape mismatch")
    return x @ w + b


def adaln_rows(h, cvec, mod_w, mod_b, fc1_w, fc1_b, fc2_w, fc2_b):
    H = h.shape[1]
    if cvec.shape != h.shape or mod_w.shape != (H, 3 * H) or fc2_w.shape[1] != H:
        raise ValueError("adaln_rows: shape mismatch")
    mod = cvec @ mod_w + mod_b
    mean = h.mean(axis=1, keepdims=True)
    hc = h - mean
    inv_std = 1.0 / np.sqrt((hc * hc).mean(axis=1, keepdims=True) + LN_EPS)
    u = hc * inv_std * (1.0 + mod[:, :H]) + mod[:, H:2 * H]
    s = u @ fc1_w + fc1_b
    a = s / (1.0 + np.exp(-s))
    return h + mod[:, 2 * H:] * (a @ fc2_w + fc2_b)


def pair_sum_l1(y):
    y = np.asarray(y)
    total = 0.0
    for start in range(0, len(y), _CHUNK):
        blk = y[start:start + _CHUNK]
        dist = np.abs(blk[:, None, :] - y[None, :, :]).sum(axis=2)
        rows = np.arange(start, start + len(blk))
        mask = np.arange(len(y))[None, :] > rows[:, None]
        total += float(dist[mask].sum())
    return total


def pair_sum_euclid(a):
    a = np.asarray(a)
    total = 0.0
    for start in range(0, len(a), _CHUNK):
        blk = a[start:start + _CHUNK]
        dist = np.sqrt(((blk[:, None, :] - a[None, :, :]) ** 2).sum(axis=2))
        rows = np.arange(start, start + len(blk))
        mask = np.arange(len(a))[None, :] > rows[:, None]
        total += float(dist[mask].sum())
    return total


def cross_sum_euclid(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("cross_sum_euclid: dimension mismatch")
    total = 0.0
    for start in range(0, len(a), _CHUNK):
        blk = a[start:start + _CHUNK]
        total += float(np.sqrt(((blk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)).sum())
    return total
