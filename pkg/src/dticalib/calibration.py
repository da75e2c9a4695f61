"""Uncertainty calibration metrics and post-hoc recalibration.

The substrate is a set of (truth, estimate, sigma) triples per scalar
parameter. From those this module computes:

* equal-population RMV/RMSE bins and the count-weighted ENCE,
* PICP/MPIW curves over an interval half-width sweep and their AUCC,
* an isotonic (pool-adjacent-violators) recalibration map on the
  variance scale, fitted on a held-out calibration split.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_BINS = 15
DEFAULT_GRID_SIZE = 256

# Interval-width caps used when sweeping the interval half-width: the sweep
# stops where the mean interval width reaches the cap for that parameter.
MPIW_CAPS = {"fa": 0.20, "md": 0.2e-3, "theta": 60.0}


@dataclass
class PredictionTriple:
    truth: float
    estimate: float
    sigma: float  # predicted uncertainty as a standard deviation

    def __post_init__(self):
        if not (
            np.isfinite(self.truth)
            and np.isfinite(self.estimate)
            and np.isfinite(self.sigma)
        ):
            raise ValueError("non-finite triple")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass
class BinStats:
    rmv: np.ndarray  # sqrt(mean sigma^2) per bin
    rmse: np.ndarray  # sqrt(mean squared error) per bin
    counts: np.ndarray
    binning: str = "equal_population"

    @property
    def n_bins(self) -> int:
        return len(self.rmv)


@dataclass
class CalibrationCurve:
    beta_grid: np.ndarray
    picp: np.ndarray
    mpiw: np.ndarray
    mpiw_cap: float
    aucc: float


@dataclass
class IsotonicMap:
    """Non-decreasing map on the variance scale.

    Piecewise-linear between breakpoints, constant beyond the ends (so
    extrapolated variances can never go negative).
    """

    breakpoints: np.ndarray  # input variances, strictly increasing
    values: np.ndarray  # output variances, non-decreasing

    def __call__(self, variance):
        return np.interp(variance, self.breakpoints, self.values)


def _to_arrays(triples: Sequence[PredictionTriple]):
    truth = np.array([t.truth for t in triples])
    estimate = np.array([t.estimate for t in triples])
    sigma = np.array([t.sigma for t in triples])
    return truth, estimate, sigma


def triples_from_arrays(truth, estimate, sigma) -> list[PredictionTriple]:
    return [
        PredictionTriple(float(t), float(e), float(s))
        for t, e, s in zip(truth, estimate, sigma)
    ]


def _sigma_order(sigma: np.ndarray) -> np.ndarray:
    # stable sort: ties at bin boundaries resolve by original index
    return np.argsort(sigma, kind="stable")


def bin_rmv_rmse(triples: Sequence[PredictionTriple], n_bins: int = DEFAULT_BINS) -> BinStats:
    """Equal-population bins ordered by sigma; RMV and RMSE per bin.

    Any remainder after integer division is spread one-per-bin over the
    leading bins.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    n = len(triples)
    if n < n_bins:
        raise ValueError("need at least one triple per bin")
    truth, estimate, sigma = _to_arrays(triples)
    order = _sigma_order(sigma)
    err2 = (truth - estimate)[order] ** 2
    var = sigma[order] ** 2
    base, rem = divmod(n, n_bins)
    sizes = np.full(n_bins, base)
    sizes[:rem] += 1
    edges = np.concatenate([[0], np.cumsum(sizes)])
    rmv = np.empty(n_bins)
    rmse = np.empty(n_bins)
    for j in range(n_bins):
        lo, hi = edges[j], edges[j + 1]
        rmv[j] = np.sqrt(var[lo:hi].mean())
        rmse[j] = np.sqrt(err2[lo:hi].mean())
    return BinStats(rmv=rmv, rmse=rmse, counts=sizes)


def ence(stats: BinStats) -> float:
    """Count-weighted mean of |RMV - RMSE| / RMV over bins.

    Zero exactly when every bin has RMV == RMSE. A single-bin forecaster
    whose constant sigma equals the global RMSE therefore scores zero,
    which is why this metric is paired with the AUCC curve.
    """
    if np.any(stats.rmv == 0):
        raise ValueError("zero-variance bin")
    n_total = stats.counts.sum()
    gaps = stats.counts * np.abs(stats.rmv - stats.rmse) / stats.rmv
    return float(gaps.sum() / n_total)


def picp_mpiw_curve(
    triples: Sequence[PredictionTriple],
    mpiw_cap: float,
    grid_size: int = DEFAULT_GRID_SIZE,
) -> CalibrationCurve:
    """Coverage vs interval width over a half-width sweep, plus its area.

    Intervals are estimate +/- beta*sigma. The sweep runs from beta = 0 to
    the beta where the mean interval width 2*beta*mean(sigma) hits mpiw_cap.
    Coverage uses the closed interval, so beta = 0 counts exact hits. The
    area (AUCC) integrates coverage against normalized width, trapezoidally,
    giving a scale-invariant score in [0, 1].
    """
    if mpiw_cap <= 0:
        raise ValueError("mpiw_cap must be positive")
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    truth, estimate, sigma = _to_arrays(triples)
    mean_sigma = sigma.mean()
    if mean_sigma <= 0:
        raise ValueError("degenerate uncertainties")
    beta_max = mpiw_cap / (2.0 * mean_sigma)
    beta = np.linspace(0.0, beta_max, grid_size)
    abs_err = np.abs(truth - estimate)
    picp = (abs_err[None, :] <= beta[:, None] * sigma[None, :]).mean(axis=1)
    mpiw = 2.0 * beta * mean_sigma
    x = mpiw / mpiw[-1]
    aucc = float(np.trapezoid(picp, x))
    return CalibrationCurve(beta, picp, mpiw, float(mpiw_cap), aucc)


def _pava(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted pool-adjacent-violators: L2-optimal non-decreasing fit."""
    n = len(values)
    fitted = np.empty(n)
    weight = np.empty(n)
    size = np.ones(n, dtype=np.int64)
    n_blocks = 0
    for i in range(n):
        fitted[n_blocks] = values[i]
        weight[n_blocks] = weights[i]
        size[n_blocks] = 1
        n_blocks += 1
        while n_blocks > 1 and fitted[n_blocks - 2] > fitted[n_blocks - 1]:
            total = weight[n_blocks - 2] + weight[n_blocks - 1]
            fitted[n_blocks - 2] = (
                weight[n_blocks - 2] * fitted[n_blocks - 2]
                + weight[n_blocks - 1] * fitted[n_blocks - 1]
            ) / total
            weight[n_blocks - 2] = total
            size[n_blocks - 2] += size[n_blocks - 1]
            n_blocks -= 1
    return np.repeat(fitted[:n_blocks], size[:n_blocks])


def fit_isotonic(
    calibration_triples: Sequence[PredictionTriple], n_bins: int = DEFAULT_BINS
) -> IsotonicMap:
    """Monotone variance map fitted to binned (RMV^2, RMSE^2) pairs.

    The pairs come from the calibration split only; apply the map to test
    data. Duplicate breakpoints (ties in binned RMV) are merged by their
    weighted mean after pooling.
    """
    stats = bin_rmv_rmse(calibration_triples, n_bins)
    if stats.n_bins < 2:
        raise ValueError("need at least 2 bins to fit a map")
    x = stats.rmv**2
    y = _pava(stats.rmse**2, stats.counts.astype(np.float64))
    if np.any(np.diff(x) < 0):
        raise AssertionError("bins must be ordered by sigma")
    # merge tied breakpoints so interpolation is well defined
    bx, by = [], []
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[j + 1] == x[i]:
            j += 1
        w = stats.counts[i : j + 1].astype(np.float64)
        bx.append(x[i])
        by.append(float(np.average(y[i : j + 1], weights=w)))
        i = j + 1
    return IsotonicMap(np.array(bx), np.maximum.accumulate(np.array(by)))


def recalibrate(
    mapping: IsotonicMap, triples: Sequence[PredictionTriple]
) -> list[PredictionTriple]:
    """Replace each sigma with sqrt(map(sigma^2)); truths and estimates stay."""
    out = []
    for t in triples:
        out.append(
            PredictionTriple(t.truth, t.estimate, float(np.sqrt(mapping(t.sigma**2))))
        )
    return out
