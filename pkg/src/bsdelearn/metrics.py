"""Error metrics, run aggregation, and empirical convergence rates."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _per_sample_sq(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {ref.shape}")
    diff = (pred - ref).reshape(pred.shape[0], -1)
    return np.sum(np.square(diff), axis=1), np.sum(
        np.square(ref.reshape(ref.shape[0], -1)), axis=1)


def mse(pred, ref):
    """Mean over samples of the squared Frobenius error."""
    sq, _ = _per_sample_sq(pred, ref)
    return float(np.mean(sq))


def relative_mse(pred, ref, return_excluded=False):
    """Per-sample squared error over squared reference norm, averaged.

    Samples with an exactly zero reference norm are excluded from the
    average; their count is available via return_excluded.
    """
    sq, ref_sq = _per_sample_sq(pred, ref)
    keep = ref_sq > 0.0
    n_excluded = int(np.sum(~keep))
    if not np.any(keep):
        raise ValueError("all reference norms are zero")
    value = float(np.mean(sq[keep] / ref_sq[keep]))
    if return_excluded:
        return value, n_excluded
    return value


def aggregate(values):
    """Mean and population standard deviation over independent runs."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("aggregate needs at least one run")
    return float(np.mean(arr, axis=0) if arr.ndim == 1 else np.mean(arr)), \
        float(np.std(arr))


def convergence_rate(pairs):
    """Least-squares decay exponent beta from (N, error) pairs.

    beta is minus the slope of ln(error) against ln(N); a positive value
    means the error decays like N**-beta.
    """
    pairs = [(float(n), float(e)) for n, e in pairs]
    if len({n for n, _ in pairs}) < 2:
        raise ValueError("need at least two distinct N values")
    if any(e <= 0.0 for _, e in pairs):
        raise ValueError("errors must be positive for a log-log fit")
    log_n = np.log([n for n, _ in pairs])
    log_e = np.log([e for _, e in pairs])
    slope = np.polyfit(log_n, log_e, 1)[0]
    return float(-slope)
