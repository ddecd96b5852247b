"""Small statistics helpers: batch means, t intervals, binomial intervals."""

from __future__ import annotations

import numpy as np
from scipy import stats

from .errors import ParameterError

__all__ = ["batch_means", "mean_ci", "clopper_pearson", "t_quantile"]

DEFAULT_BATCHES = 50


def t_quantile(level, dof):
    return float(stats.t.ppf(0.5 + level / 2.0, dof))


def batch_means(series, batches=DEFAULT_BATCHES):
    """Mean and batch-means standard error along axis 0.

    The series is cut into ``batches`` equal consecutive blocks; leftover
    samples at the start are dropped.  Returns ``(mean, se)`` with the shape
    of one sample.
    """
    x = np.asarray(series, dtype=float)
    n = x.shape[0]
    if batches < 2 or n < batches:
        raise ParameterError(f"need at least {batches} samples for {batches} batches, got {n}")
    size = n // batches
    x = x[n - size * batches:]
    bm = x.reshape((batches, size) + x.shape[1:]).mean(axis=1)
    return bm.mean(axis=0), bm.std(axis=0, ddof=1) / np.sqrt(batches)


def mean_ci(samples, level=0.95):
    """Sample mean and t-interval half width along axis 0."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    mean = x.mean(axis=0)
    if n < 2:
        return mean, np.full_like(mean, np.inf)
    half = t_quantile(level, n - 1) * x.std(axis=0, ddof=1) / np.sqrt(n)
    return mean, half


def clopper_pearson(hits, trials, level=0.95):
    """Exact two-sided binomial confidence interval for ``hits / trials``."""
    ci = stats.binomtest(int(hits), int(trials)).proportion_ci(level, method="exact")
    return float(ci.low), float(ci.high)
