"""Missed-detection / false-alarm metrics, threshold sweeps and timing.

All metrics pool counts over the whole test set before forming ratios, so a
sample without any active device is still usable.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ParameterError, UndefinedMetricError

MODES = {"pf-eq-pm": 1.0, "pf-eq-2pm": 2.0}


def confusion_counts(decisions, labels) -> tuple[int, int, int, int]:
    """(detected actives, total actives, false alarms, total inactives), pooled."""
    d = np.asarray(decisions).astype(bool).ravel()
    lab = np.asarray(labels).ravel()
    if d.shape != lab.shape:
        raise ParameterError(f"decisions shape {np.shape(decisions)} does not match labels {np.shape(labels)}")
    active = lab.astype(bool)
    return (int(np.count_nonzero(d & active)), int(np.count_nonzero(active)),
            int(np.count_nonzero(d & ~active)), int(np.count_nonzero(~active)))


def pm_pf(decisions, labels) -> tuple[float, float]:
    """Pooled probabilities of missed detection and false alarm."""
    hits, n_active, false_alarms, n_inactive = confusion_counts(decisions, labels)
    if n_active == 0 or n_inactive == 0:
        raise UndefinedMetricError(
            f"PM/PF need both classes in the pooled labels (got {n_active} active, {n_inactive} inactive)")
    return (n_active - hits) / n_active, false_alarms / n_inactive


@dataclass
class RocCurve:
    """Operating points ``(xi, pm, pf)`` of a threshold sweep, ``xi`` ascending."""

    xi: np.ndarray
    pm: np.ndarray
    pf: np.ndarray
    detector: str = ""
    n_samples: int = 0
    n_devices: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.xi)

    def rows(self):
        return list(zip(self.xi.tolist(), self.pm.tolist(), self.pf.tolist()))


def roc_sweep(probabilities, labels, thresholds: Optional[Sequence[float]] = None, detector: str = "") -> RocCurve:
    """Evaluate ``pm_pf(probabilities > xi, labels)`` for every threshold.

    The default grid is every distinct probability plus 0 and 1, which traces
    the exact empirical curve.  Counts come from sorted scores, so the cost
    is ``O((n + k) log n)`` for ``k`` thresholds.
    """
    p = np.asarray(probabilities, dtype=float)
    lab = np.asarray(labels)
    if p.shape != lab.shape:
        raise ParameterError(f"probabilities shape {p.shape} does not match labels {lab.shape}")
    active = lab.ravel().astype(bool)
    flat = p.ravel()
    if thresholds is None:
        xi = np.unique(np.concatenate([flat, [0.0, 1.0]]))
    else:
        xi = np.asarray(thresholds, dtype=float).ravel()
        if np.any(np.diff(xi) < 0):
            raise ParameterError("thresholds must be sorted ascending")
    pos = np.sort(flat[active])
    neg = np.sort(flat[~active])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError(
            f"PM/PF need both classes in the pooled labels (got {pos.size} active, {neg.size} inactive)")
    # scores at or below xi are missed; scores strictly above are detections
    misses = np.searchsorted(pos, xi, side="right")
    false_alarms = neg.size - np.searchsorted(neg, xi, side="right")
    n_samples = p.shape[0] if p.ndim == 2 else 1
    return RocCurve(xi=xi, pm=misses / pos.size, pf=false_alarms / neg.size,
                    detector=detector, n_samples=n_samples, n_devices=p.shape[-1])


@dataclass
class OperatingPoint:
    xi: float
    pm: float
    pf: float
    crossing: bool  # False: no crossing on the curve, nearest point reported


def operating_point(curve: RocCurve, mode: str = "pf-eq-pm") -> OperatingPoint:
    """Point where ``PF = r * PM`` (``r`` = 1 or 2), interpolated linearly in ``xi``.

    ``PF - r PM`` is non-increasing along the curve, so the first sign change
    brackets the solution.  Without a sign change the point minimising
    ``|PF - r PM|`` is returned with ``crossing=False``.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown mode '{mode}', expected one of {sorted(MODES)}")
    if len(curve) == 0:
        raise ParameterError("empty curve")
    r = MODES[mode]
    gap = curve.pf - r * curve.pm
    zero = np.flatnonzero(gap == 0)
    if zero.size:
        i = int(zero[0])
        return OperatingPoint(float(curve.xi[i]), float(curve.pm[i]), float(curve.pf[i]), True)
    change = np.flatnonzero((gap[:-1] > 0) & (gap[1:] < 0))
    if change.size == 0:
        i = int(np.argmin(np.abs(gap)))
        return OperatingPoint(float(curve.xi[i]), float(curve.pm[i]), float(curve.pf[i]), False)
    i = int(change[0])
    w = gap[i] / (gap[i] - gap[i + 1])

    def lerp(v):
        return float(v[i] + w * (v[i + 1] - v[i]))

    return OperatingPoint(lerp(curve.xi), lerp(curve.pm), lerp(curve.pf), True)


@dataclass
class BenchResult:
    mean: float  # seconds per sample
    median: float
    inferences: int
    warmup: int
    times: list  # per-sample seconds of every timed call


def bench_time(
    detector: Callable,
    samples: Sequence,
    repetitions: int = 1,
    warmup: int = 3,
    items_per_call: int = 1,
    min_inferences: int = 100,
) -> BenchResult:
    """Single-threaded wall-clock time per sample.

    ``detector`` is called once per element of ``samples``; when an element
    is a batch, ``items_per_call`` converts call time into per-sample time.
    The first ``warmup`` calls are run but not timed.  BLAS pools are pinned
    to one thread for the duration.
    """
    if repetitions < 1:
        raise ParameterError(f"repetitions must be >= 1, got {repetitions}")
    if warmup < 0 or items_per_call < 1:
        raise ParameterError("warmup must be >= 0 and items_per_call >= 1")
    if not samples:
        raise ParameterError("no samples to time")
    total = len(samples) * repetitions * items_per_call
    if total < min_inferences:
        raise ParameterError(f"only {total} timed inferences, need at least {min_inferences}")
    times = []
    with threadpool_limits(limits=1):
        for k in range(warmup):
            detector(samples[k % len(samples)])
        for _ in range(repetitions):
            for item in samples:
                start = time.perf_counter()
                detector(item)
                times.append((time.perf_counter() - start) / items_per_call)
    return BenchResult(mean=float(np.mean(times)), median=float(statistics.median(times)),
                       inferences=total, warmup=warmup, times=times)
