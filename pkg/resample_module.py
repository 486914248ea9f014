"""
Resample Module - Deterministic non-parametric bootstrap
Percentile confidence intervals, zero-crossing bootstrap p-values and
bootstrap differences of Fleiss' kappa

Each resample draws from its own stream seeded by (seed, resample index), so
results do not depend on how many worker threads evaluate them.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from statsmodels.stats.inter_rater import fleiss_kappa

logger = logging.getLogger(__name__)

DEFAULT_SEED = 20240212
DEFAULT_RESAMPLES = 1000
DEFAULT_LEVEL = 0.95


class ResampleError(ValueError):
    """Raised when a bootstrap cannot produce any defined statistic"""


@dataclass(frozen=True)
class BootstrapResult:
    point: Optional[float]
    lo: float
    hi: float
    n_resamples: int
    level: float
    n_degenerate: int


@dataclass(frozen=True)
class KappaDifference:
    kappa_a: Optional[float]
    kappa_b: Optional[float]
    delta_kappa: Optional[float]
    ci: BootstrapResult
    p: float


def _take(column, idx: np.ndarray):
    if hasattr(column, 'iloc'):
        return column.iloc[idx]
    if isinstance(column, np.ndarray):
        return column[idx]
    return [column[i] for i in idx]


def _finite(value) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def fleiss_or_none(matrix: np.ndarray) -> Optional[float]:
    """Fleiss' kappa, None when chance agreement is 1"""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.size == 0 or (matrix.sum(axis=0) > 0).sum() < 2:
        return None
    with np.errstate(divide='ignore', invalid='ignore'):
        return _finite(fleiss_kappa(matrix, method='fleiss'))


class ResampleModule:
    """Bootstrap engine shared by every module that reports intervals"""

    def __init__(self, n_resamples: int = DEFAULT_RESAMPLES, seed: int = DEFAULT_SEED,
                 level: float = DEFAULT_LEVEL, n_jobs: int = 1):
        self.n_resamples = n_resamples
        self.seed = seed
        self.level = level
        self.n_jobs = max(1, int(n_jobs))

    def _indices(self, n: int, seed: int, index: int, strata: Optional[np.ndarray], *keys: int) -> np.ndarray:
        rng = np.random.default_rng([seed, *keys, index])
        if strata is None:
            return rng.integers(0, n, size=n)
        parts = []
        for value in np.unique(strata):
            members = np.flatnonzero(strata == value)
            parts.append(members[rng.integers(0, members.size, size=members.size)])
        return np.sort(np.concatenate(parts))

    def replicates(self, stat: Callable, data: Sequence, n_resamples: Optional[int] = None,
                   seed: Optional[int] = None, strata: Optional[Sequence] = None,
                   keys: Tuple[int, ...] = ()) -> List[Optional[float]]:
        """
        Statistic value on each resample, in resample-index order

        Args:
            stat: called as stat(*columns) on the resampled columns; may return None
            data: tuple of aligned columns (arrays, lists or pandas objects), resampled by row
            strata: optional labels; resampling then happens within each stratum
        """
        return self._evaluate(lambda *cols: _finite(stat(*cols)), data, n_resamples, seed, strata, keys)

    def replicate_vectors(self, stat: Callable, data: Sequence, n_resamples: Optional[int] = None,
                          seed: Optional[int] = None) -> List[Optional[np.ndarray]]:
        """Like replicates() for a vector-valued statistic; a resample with any non-finite entry is None"""
        def vector(*cols):
            value = stat(*cols)
            if value is None:
                return None
            value = np.asarray(value, dtype=float)
            return value if np.all(np.isfinite(value)) else None
        return self._evaluate(vector, data, n_resamples, seed, None, ())

    def _evaluate(self, stat: Callable, data: Sequence, n_resamples: Optional[int], seed: Optional[int],
                  strata: Optional[Sequence], keys: Tuple[int, ...]) -> List:
        columns = tuple(data)
        if not columns:
            raise ResampleError("no data columns")
        n = len(columns[0])
        if n == 0:
            raise ResampleError("empty data")
        if any(len(c) != n for c in columns):
            raise ResampleError("data columns differ in length")
        n_resamples = self.n_resamples if n_resamples is None else n_resamples
        if n_resamples < 1:
            raise ResampleError("n_resamples must be >= 1")
        seed = self.seed if seed is None else seed
        strata = None if strata is None else np.asarray(strata)

        def one(index: int):
            idx = self._indices(n, seed, index, strata, *keys)
            try:
                return stat(*(_take(c, idx) for c in columns))
            except (ValueError, ZeroDivisionError, np.linalg.LinAlgError) as e:
                logger.debug(f"Resample {index} degenerate: {e}")
                return None

        if self.n_jobs == 1:
            return [one(i) for i in range(n_resamples)]
        with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
            return list(pool.map(one, range(n_resamples)))

    def percentile_ci(self, point: Optional[float], values: List[Optional[float]],
                      level: Optional[float] = None) -> BootstrapResult:
        """Percentile interval over the defined replicate values"""
        level = self.level if level is None else level
        defined = np.array([v for v in values if v is not None], dtype=float)
        n_degenerate = len(values) - defined.size
        if defined.size == 0:
            raise ResampleError(f"all {len(values)} resamples were degenerate")
        if n_degenerate:
            logger.warning(f"Dropped {n_degenerate} of {len(values)} degenerate resamples")
        alpha = (1.0 - level) / 2.0
        lo, hi = np.percentile(defined, [100.0 * alpha, 100.0 * (1.0 - alpha)])
        return BootstrapResult(point=point, lo=float(lo), hi=float(hi), n_resamples=len(values),
                               level=level, n_degenerate=n_degenerate)

    def bootstrap_ci(self, stat: Callable, data: Sequence, n_resamples: Optional[int] = None,
                     seed: Optional[int] = None, level: Optional[float] = None,
                     strata: Optional[Sequence] = None) -> BootstrapResult:
        """Percentile interval over the defined resample statistics"""
        level = self.level if level is None else level
        point = _finite(stat(*tuple(data)))
        values = self.replicates(stat, data, n_resamples, seed, strata)
        return self.percentile_ci(point, values, level)

    def bootstrap_folds(self, stat: Callable, folds: Sequence[Sequence], n_per_fold: Optional[int] = None,
                        seed: Optional[int] = None, level: Optional[float] = None) -> BootstrapResult:
        """Resample within each fold and pool the replicates; point is the mean fold estimate"""
        level = self.level if level is None else level
        pooled, points = [], []
        for k, fold in enumerate(folds):
            point = _finite(stat(*tuple(fold)))
            if point is not None:
                points.append(point)
            pooled.extend(self.replicates(stat, fold, n_per_fold, seed, keys=(k,)))
        point = float(np.mean(points)) if points else None
        return self.percentile_ci(point, pooled, level)

    def zero_crossing_p(self, values: List[Optional[float]]) -> float:
        """Two-sided p from the share of replicates on either side of zero, floored at 1/n"""
        defined = np.array([v for v in values if v is not None], dtype=float)
        if defined.size == 0:
            raise ResampleError("effect undefined on every resample")
        p = 2.0 * min(np.mean(defined <= 0), np.mean(defined >= 0))
        return float(min(1.0, max(p, 1.0 / len(values))))

    def bootstrap_pvalue_zero_crossing(self, effect: Callable, data: Sequence, n_resamples: Optional[int] = None,
                                       seed: Optional[int] = None) -> float:
        return self.zero_crossing_p(self.replicates(effect, data, n_resamples, seed))

    def bootstrap_kappa_difference(self, ratings_a: np.ndarray, ratings_b: np.ndarray,
                                   n_resamples: Optional[int] = None, seed: Optional[int] = None,
                                   level: Optional[float] = None) -> KappaDifference:
        """
        Fleiss' kappa difference (b minus a) with cases resampled jointly

        Args:
            ratings_a: case x category count matrix for the reference condition
            ratings_b: same cases, comparison condition
        """
        ratings_a = np.asarray(ratings_a, dtype=float)
        ratings_b = np.asarray(ratings_b, dtype=float)
        if ratings_a.shape[0] != ratings_b.shape[0]:
            raise ResampleError("both conditions must rate the same cases")

        def delta(a, b):
            ka, kb = fleiss_or_none(a), fleiss_or_none(b)
            return None if ka is None or kb is None else kb - ka

        level = self.level if level is None else level
        values = self.replicates(delta, (ratings_a, ratings_b), n_resamples, seed)
        ka, kb = fleiss_or_none(ratings_a), fleiss_or_none(ratings_b)
        point = None if ka is None or kb is None else kb - ka
        return KappaDifference(kappa_a=ka, kappa_b=kb, delta_kappa=point,
                               ci=self.percentile_ci(point, values, level), p=self.zero_crossing_p(values))
