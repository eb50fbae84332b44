"""Point estimates with batch-means standard errors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput

Z95 = 1.96
MIN_BATCHES = 30


@dataclass
class Estimate:
    value: float
    stderr: float
    n_samples: int
    meta: dict = field(default_factory=dict)

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.value - Z95 * self.stderr, self.value + Z95 * self.stderr)

    def overlaps(self, other: "Estimate") -> bool:
        lo1, hi1 = self.ci95
        lo2, hi2 = other.ci95
        return lo1 <= hi2 and lo2 <= hi1

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "stderr": self.stderr,
            "ci95": list(self.ci95),
            "n_samples": self.n_samples,
            "meta": self.meta,
        }


def _batches(n: int, n_batches: int) -> int:
    return max(MIN_BATCHES, min(n_batches, n // 2)) if n >= 2 * MIN_BATCHES else 0


def batch_means(x: np.ndarray, n_batches: int = 50) -> tuple[float, float]:
    """Mean and its standard error from nonoverlapping batch means. Falls
    back to the iid formula when there are too few samples for 30 batches."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n == 0:
        raise EmptyInput("no samples")
    mean = float(x.mean())
    if n == 1:
        return mean, math.inf
    k = _batches(n, n_batches)
    if k == 0:
        return mean, float(x.std(ddof=1) / math.sqrt(n))
    m = n // k
    bm = x[: m * k].reshape(k, m).mean(axis=1)
    return mean, float(bm.std(ddof=1) / math.sqrt(k))


def mean_estimate(x, n_batches: int = 50, **meta) -> Estimate:
    m, se = batch_means(x, n_batches)
    return Estimate(m, se, len(x), dict(meta))


def ratio_same_sample(a: np.ndarray, b: np.ndarray, n_batches: int = 50) -> tuple[float, float]:
    """E[a]/E[b] from paired samples, delta-method stderr via batch means."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = len(a)
    if n == 0:
        raise EmptyInput("no samples")
    ma, mb = a.mean(), b.mean()
    r = ma / mb
    k = _batches(n, n_batches)
    if k == 0:
        resid = a - r * b
        return float(r), float(resid.std(ddof=1) / math.sqrt(n) / abs(mb)) if n > 1 else math.inf
    m = n // k
    ba = a[: m * k].reshape(k, m).mean(axis=1)
    bb = b[: m * k].reshape(k, m).mean(axis=1)
    resid = ba - r * bb
    return float(r), float(resid.std(ddof=1) / math.sqrt(k) / abs(mb))


def ratio_independent(a: float, se_a: float, b: float, se_b: float) -> tuple[float, float]:
    """a/b for independent estimates a, b."""
    r = a / b
    return r, abs(r) * math.sqrt((se_a / a) ** 2 + (se_b / b) ** 2) if a != 0 else abs(se_a / b)


def logsumexp_mean(logw: np.ndarray, values: np.ndarray | None = None) -> tuple[float, float]:
    """Mean of values*exp(logw) returned as (log of the max shift, mean of
    the shifted terms) so callers can rescale without overflow."""
    logw = np.asarray(logw, dtype=float)
    shift = float(np.max(logw)) if len(logw) else 0.0
    terms = np.exp(logw - shift)
    if values is not None:
        terms = terms * values
    return shift, float(terms.mean())
