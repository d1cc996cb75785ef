"""Verification battery for reflectivity estimates.

Standard scores (RMSE, R^2), contingency-table scores at dBZ thresholds,
Sobel sharpness with its KDE and Welch's t-test, and a patch-boundary
"patchiness" ratio for detecting token tiling.

Undefined scores (zero denominators) are returned as ``nan`` together with an
:class:`UndefinedMetricWarning`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage, stats

from .errors import ConfigurationError, DataError
from .fields import REFC_RANGE

DEFAULT_THRESHOLDS = tuple(float(t) for t in range(5, 45, 5))


class UndefinedMetricWarning(RuntimeWarning):
    pass


class DegenerateDistributionError(DataError):
    pass


def _undefined(name: str) -> float:
    warnings.warn(f"{name} is undefined (zero denominator)", UndefinedMetricWarning, stacklevel=3)
    return float("nan")


def _pair(y, t):
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if y.shape != t.shape:
        raise DataError(f"shape mismatch {y.shape} vs {t.shape}")
    return y, t


def rmse(y, t) -> float:
    y, t = _pair(y, t)
    if y.size == 0:
        return _undefined("RMSE")
    return float(np.sqrt(np.mean((y - t) ** 2)))


def r2(y, t) -> float:
    y, t = _pair(y, t)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        return _undefined("R^2")
    return 1.0 - float(np.sum((y - t) ** 2)) / ss_tot


@dataclass(frozen=True)
class ContingencyTable:
    threshold: float
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        if other.threshold != self.threshold:
            raise ConfigurationError("cannot pool tables at different thresholds")
        return ContingencyTable(self.threshold, self.hits + other.hits,
                                self.misses + other.misses,
                                self.false_alarms + other.false_alarms,
                                self.correct_negatives + other.correct_negatives)


def contingency(y, t, threshold: float) -> ContingencyTable:
    """Event = value strictly greater than ``threshold`` (dBZ)."""
    y, t = _pair(y, t)
    fy, ft = y > threshold, t > threshold
    hits = int(np.count_nonzero(fy & ft))
    misses = int(np.count_nonzero(ft & ~fy))
    false_alarms = int(np.count_nonzero(fy & ~ft))
    return ContingencyTable(float(threshold), hits, misses, false_alarms,
                            y.size - hits - misses - false_alarms)


def pod(ct: ContingencyTable) -> float:
    n = ct.hits + ct.misses
    return ct.hits / n if n else _undefined("POD")


def far(ct: ContingencyTable) -> float:
    n = ct.hits + ct.false_alarms
    return ct.false_alarms / n if n else _undefined("FAR")


def csi(ct: ContingencyTable) -> float:
    n = ct.hits + ct.misses + ct.false_alarms
    return ct.hits / n if n else _undefined("CSI")


# ---------------------------------------------------------------- sharpness

def sobel_magnitude(field) -> np.ndarray:
    """Per-pixel Sobel gradient magnitude with replicated borders."""
    x = np.asarray(field, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise ConfigurationError("sharpness needs a single-channel field")
        x = x[0]
    gx = ndimage.sobel(x, axis=1, mode="nearest")
    gy = ndimage.sobel(x, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def sharpness(field) -> float:
    """Spatial mean of the Sobel gradient magnitude."""
    return float(sobel_magnitude(field).mean())


@dataclass(frozen=True)
class SharpnessStat:
    values: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


def kde(samples, grid) -> np.ndarray:
    """Gaussian kernel density with Scott's bandwidth ``n**(-1/5) * std``."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise DataError("KDE needs at least two samples")
    if np.std(x) == 0.0:
        raise DegenerateDistributionError("KDE of a zero-variance sample")
    return stats.gaussian_kde(x, bw_method="scott")(np.asarray(grid, dtype=np.float64))


def kde_grid(samples, points: int = 256, pad: float = 3.0) -> np.ndarray:
    """Evaluation grid spanning the samples plus ``pad`` bandwidths each side."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    bw = x.size ** (-0.2) * np.std(x, ddof=1)
    return np.linspace(x.min() - pad * bw, x.max() + pad * bw, points)


@dataclass(frozen=True)
class WelchResult:
    t: float
    dof: float
    p_value: float


def welch_t(a, b) -> WelchResult:
    """Welch's unequal-variance t statistic for ``mean(a) - mean(b)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise DataError("Welch's t-test needs at least two samples per group")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0.0:
        raise DegenerateDistributionError("both samples have zero variance")
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return WelchResult(float(t), float(dof), float(2 * stats.t.sf(abs(t), dof)))


def patchiness(field, p: int) -> float:
    """Mean |neighbour difference| across patch seams over the mean inside patches.

    1 means no tiling; a field constant inside each patch but varying across
    patches gives ``inf``. A constant field is defined as 1.
    """
    x = np.asarray(field, dtype=np.float64)
    if x.ndim == 3:
        x = x[0]
    h, w = x.shape
    if p < 2 or h % p or w % p:
        raise ConfigurationError(f"patch size {p} must be >= 2 and divide {h}x{w}")
    dx = np.abs(np.diff(x, axis=1))
    dy = np.abs(np.diff(x, axis=0))
    seam_x = (np.arange(1, w) % p) == 0
    seam_y = (np.arange(1, h) % p) == 0
    boundary = np.concatenate([dx[:, seam_x].ravel(), dy[seam_y].ravel()])
    interior = np.concatenate([dx[:, ~seam_x].ravel(), dy[~seam_y].ravel()])
    b, i = boundary.mean(), interior.mean()
    if i == 0.0:
        return 1.0 if b == 0.0 else float("inf")
    return float(b / i)


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class ThresholdSweep:
    tables: tuple[ContingencyTable, ...]
    rmse: tuple[float, ...]

    @property
    def thresholds(self) -> list[float]:
        return [ct.threshold for ct in self.tables]

    def rows(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedMetricWarning)
            return [(ct.threshold, pod(ct), far(ct), csi(ct), r)
                    for ct, r in zip(self.tables, self.rmse)]


@dataclass(frozen=True)
class Evaluation:
    sweep: ThresholdSweep
    sharpness: SharpnessStat
    rmse: float
    r2: float
    patchiness: float
    predictions: np.ndarray  # (N, h, w) normalized, clipped to [0, 1]


def to_dbz(x):
    lo, hi = REFC_RANGE
    return lo + np.asarray(x, dtype=np.float64) * (hi - lo)


def evaluate(predict: Callable[[np.ndarray], np.ndarray], inputs, targets,
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
             patch_size: int | None = None, batch_size: int = 16) -> Evaluation:
    """Run ``predict`` over a dataset and aggregate the verification battery.

    ``predict`` maps a normalized batch ``(B, c, h, w)`` to ``(B, 1, h, w)``.
    Predictions are clipped to the physical range before scoring. Contingency
    counts are pooled over samples before POD/FAR/CSI are formed; the
    per-threshold RMSE uses the pixels whose *target* exceeds the threshold.
    """
    thresholds = [float(t) for t in thresholds]
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigurationError("thresholds must be strictly increasing")
    if len(inputs) == 0:
        raise ConfigurationError("cannot evaluate an empty dataset")

    raw = np.concatenate([np.asarray(predict(np.asarray(inputs[i:i + batch_size])))
                          for i in range(0, len(inputs), batch_size)])[:, 0]
    preds = np.clip(raw, 0.0, 1.0)
    truth = np.asarray(targets, dtype=np.float64)[:, 0]
    y_dbz, t_dbz = to_dbz(preds), to_dbz(truth)

    tables = [ContingencyTable(t, 0, 0, 0, 0) for t in thresholds]
    for y, t in zip(y_dbz, t_dbz):
        tables = [acc + contingency(y, t, acc.threshold) for acc in tables]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedMetricWarning)
        cond_rmse = tuple(rmse(y_dbz[t_dbz > thr], t_dbz[t_dbz > thr]) for thr in thresholds)

    g = SharpnessStat(np.array([sharpness(p) for p in preds]))
    patch = float("nan")
    if patch_size is not None:
        patch = float(np.mean([patchiness(p, patch_size) for p in preds]))
    return Evaluation(ThresholdSweep(tuple(tables), cond_rmse), g, rmse(y_dbz, t_dbz),
                      r2(y_dbz, t_dbz), patch, preds)
