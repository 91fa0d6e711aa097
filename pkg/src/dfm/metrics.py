"""Evaluation metrics for generated samples.

All-pairs sums go through :mod:`dfm.kernels`; the compiled backend sums in
index order, so repeated evaluations are bit-identical.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import kernels
from .datagen import DatasetSpec
from .errors import InputDomainError

DEFAULT_MAX_SAMPLES = 512


def _as_matrix(samples) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(samples, dtype=np.float64))
    if arr.ndim == 1:
        arr = arr[:, None]
    if not np.all(np.isfinite(arr)):
        raise InputDomainError("non-finite features")
    return arr


def pairwise_distance(y_i, y_j) -> float:
    """Mean absolute difference ``(1/D) * ||y_i - y_j||_1``."""
    a = np.asarray(y_i, dtype=np.float64).ravel()
    b = np.asarray(y_j, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InputDomainError(f"feature lengths differ: {a.size} vs {b.size}")
    return float(np.abs(a - b).sum() / a.size)


def timbre_consistency_loss(group: Sequence) -> float:
    """Mean of :func:`pairwise_distance` over the K(K-1)/2 unordered pairs."""
    y = _as_matrix(group)
    K, D = y.shape
    if K < 2:
        raise InputDomainError("timbre consistency needs at least two clips")
    return kernels.pair_sum_l1(y) / D * 2.0 / (K * (K - 1))


def energy_distance(samples_a, samples_b, max_samples: int | None = DEFAULT_MAX_SAMPLES) -> float:
    """``2 E|A-B| - E|A-A'| - E|B-B'|`` over all pairs (V-statistic, so an
    empirical distribution compared with itself gives exactly 0).

    Only the first ``max_samples`` rows of each side are used; pass None to
    use everything.
    """
    a, b = _as_matrix(samples_a), _as_matrix(samples_b)
    if len(a) == 0 or len(b) == 0:
        raise InputDomainError("energy distance needs nonempty sample sets")
    if a.shape[1] != b.shape[1]:
        raise InputDomainError("sample dimensions differ")
    if max_samples is not None:
        a, b = a[:max_samples], b[:max_samples]
    if a.shape == b.shape and np.array_equal(a, b):
        return 0.0  # exact; the all-pairs sums below would leave rounding residue
    n, m = len(a), len(b)
    cross = kernels.cross_sum_euclid(a, b) / (n * m)
    within_a = 2.0 * kernels.pair_sum_euclid(a) / (n * n)
    within_b = 2.0 * kernels.pair_sum_euclid(b) / (m * m)
    return max(0.0, 2.0 * cross - within_a - within_b)


def attribute_deviation(samples, conds, spec: DatasetSpec) -> dict[str, float]:
    """Mean absolute deviation along the pitch and velocity axes.

    Each sample is compared with the nearest mode of its requested
    condition; the residual's projection on each attribute axis is how far
    the sample sits from the requested pitch / velocity.
    """
    x = _as_matrix(samples)
    if len(x) != len(conds):
        raise InputDomainError("samples and conditions must align")
    if len(x) == 0:
        return {"pitch": 0.0, "velocity": 0.0}
    pitch_axis = np.asarray(spec.pitch_axis)
    vel_axis = np.asarray(spec.velocity_axis)
    dev_p = np.empty(len(x))
    dev_v = np.empty(len(x))
    for i, (xi, cond) in enumerate(zip(x, conds)):
        centers = spec.mode_centers(cond)
        nearest = centers[np.argmin(((centers - xi) ** 2).sum(axis=1))]
        r = xi - nearest
        dev_p[i] = abs(r @ pitch_axis)
        dev_v[i] = abs(r @ vel_axis)
    # fsum is exactly rounded, so the result does not depend on sample order
    return {"pitch": math.fsum(dev_p) / len(x), "velocity": math.fsum(dev_v) / len(x)}
