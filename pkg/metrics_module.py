"""
Metrics Module - Classification metrics
Confusion counts, ROC/AUC (binary and macro one-vs-rest), Youden operating points,
balanced accuracy, AUPRC and Brier score

Decision direction everywhere: score >= T is a positive call.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import mannwhitneyu
from sklearn.metrics import (average_precision_score, balanced_accuracy_score,
                             brier_score_loss, roc_curve)

from cohort_module import Cohort

logger = logging.getLogger(__name__)


class MetricsError(ValueError):
    """Raised when a metric is requested on inadmissible input"""


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def sensitivity(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> Optional[float]:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def ppv(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def npv(self) -> Optional[float]:
        return _ratio(self.tn, self.tn + self.fn)


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    ppv: Optional[float]
    npv: Optional[float]
    youden: Optional[float]
    counts: ConfusionCounts

    @classmethod
    def from_counts(cls, threshold: float, counts: ConfusionCounts) -> 'OperatingPoint':
        sens, spec = counts.sensitivity, counts.specificity
        youden = sens + spec - 1.0 if sens is not None and spec is not None else None
        return cls(threshold=threshold, sensitivity=sens, specificity=spec,
                   ppv=counts.ppv, npv=counts.npv, youden=youden, counts=counts)


def as_binary_arrays(scores: Sequence[float], labels: Sequence[int]):
    """Validate and coerce a (positive-class score, binary label) pair of sequences"""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricsError(f"length mismatch: {scores.size} scores vs {labels.size} labels")
    if scores.size == 0:
        raise MetricsError("no cases")
    if not np.isin(labels, (0, 1)).all():
        raise MetricsError("labels must be binary (0/1)")
    return scores, labels


def counts_at_thresholds(scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Vectorised (tp, fp, tn, fn) for each threshold; shape (len(thresholds), 4)"""
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    # number of scores strictly below T
    pos_below = np.searchsorted(pos, thresholds, side='left')
    neg_below = np.searchsorted(neg, thresholds, side='left')
    tp = pos.size - pos_below
    fp = neg.size - neg_below
    return np.column_stack([tp, fp, neg_below, pos_below]).astype(int)


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Unique observed scores bracketed by -inf/+inf sentinels"""
    return np.concatenate([[-np.inf], np.unique(scores), [np.inf]])


class MetricsModule:
    """Binary and multi-class discrimination metrics"""

    def confusion_at_threshold(self, scores: Sequence[float], labels: Sequence[int], threshold: float) -> ConfusionCounts:
        scores, labels = as_binary_arrays(scores, labels)
        tp, fp, tn, fn = counts_at_thresholds(scores, labels, np.array([threshold], dtype=float))[0]
        return ConfusionCounts(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))

    def operating_point(self, scores: Sequence[float], labels: Sequence[int], threshold: float) -> OperatingPoint:
        return OperatingPoint.from_counts(threshold, self.confusion_at_threshold(scores, labels, threshold))

    def binary_auc(self, scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
        """Mann-Whitney concordance probability (ties count 1/2); None when a class is empty"""
        scores, labels = as_binary_arrays(scores, labels)
        pos, neg = scores[labels == 1], scores[labels == 0]
        if pos.size == 0 or neg.size == 0:
            return None
        u = mannwhitneyu(pos, neg, alternative='two-sided', method='asymptotic').statistic
        return float(u) / (pos.size * neg.size)

    def per_class_auc(self, cohort: Cohort) -> Dict[str, Optional[float]]:
        """One-vs-rest AUC per class"""
        matrix, labels = cohort.score_matrix(), cohort.labels()
        return {name: self.binary_auc(matrix[:, k], (labels == k).astype(int))
                for k, name in enumerate(cohort.class_map.names)}

    def macro_auc_ovr(self, cohort: Cohort) -> float:
        """Unweighted mean of the defined one-vs-rest AUCs"""
        if len(cohort.class_map.names) < 2:
            raise MetricsError("macro-AUC needs at least two classes")
        per_class = self.per_class_auc(cohort)
        undefined = [name for name, auc in per_class.items() if auc is None]
        if undefined:
            logger.warning(f"Excluding classes with undefined AUC from macro-AUC of '{cohort.name}': {undefined}")
        return self.macro_auc_arrays(cohort.score_matrix(), cohort.labels())

    def macro_auc_arrays(self, matrix: np.ndarray, labels: np.ndarray) -> float:
        """Macro-AUC on a raw (cases x classes) score matrix; used inside the bootstrap"""
        matrix = np.asarray(matrix, dtype=float)
        labels = np.asarray(labels, dtype=int)
        aucs = [self.binary_auc(matrix[:, k], (labels == k).astype(int)) for k in range(matrix.shape[1])]
        defined = [auc for auc in aucs if auc is not None]
        if not defined:
            raise MetricsError("every class AUC is undefined")
        return float(np.mean(defined))

    def sweep_points(self, scores: Sequence[float], labels: Sequence[int]) -> List[OperatingPoint]:
        """Operating point at every candidate threshold, ascending"""
        scores, labels = as_binary_arrays(scores, labels)
        thresholds = candidate_thresholds(scores)[1:]
        rows = counts_at_thresholds(scores, labels, thresholds)
        return [OperatingPoint.from_counts(float(t), ConfusionCounts(*map(int, row)))
                for t, row in zip(thresholds, rows)]

    def youden_optimal(self, scores: Sequence[float], labels: Sequence[int]) -> OperatingPoint:
        """Maximum Youden index over unique scores and +inf; ties go to the smallest threshold"""
        scores, labels = as_binary_arrays(scores, labels)
        if labels.min() == labels.max():
            raise MetricsError("Youden point needs both classes")
        points = self.sweep_points(scores, labels)
        best = points[0]
        for point in points[1:]:
            if point.youden > best.youden:
                best = point
        return best

    def roc_points(self, scores: Sequence[float], labels: Sequence[int]) -> List[Dict[str, float]]:
        """ROC curve vertices for plot-data export"""
        scores, labels = as_binary_arrays(scores, labels)
        if labels.min() == labels.max():
            raise MetricsError("ROC curve needs both classes")
        fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
        return [{'fpr': float(f), 'tpr': float(t), 'threshold': float(th)}
                for f, t, th in zip(fpr, tpr, thresholds)]

    def balanced_accuracy(self, predicted: Sequence, truth: Sequence) -> float:
        """Mean per-class recall over classes present in truth; TIMEOUT never matches a class"""
        if len(predicted) != len(truth):
            raise MetricsError(f"length mismatch: {len(predicted)} predictions vs {len(truth)} labels")
        if len(truth) == 0:
            raise MetricsError("no cases")
        with warnings.catch_warnings():
            # predicted-only classes such as TIMEOUT trigger a benign sklearn warning
            warnings.simplefilter('ignore')
            return float(balanced_accuracy_score([str(t) for t in truth], [str(p) for p in predicted]))

    def auprc(self, scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
        """Step-interpolated area under the precision-recall curve (average precision)"""
        scores, labels = as_binary_arrays(scores, labels)
        if labels.sum() == 0:
            return None
        return float(average_precision_score(labels, scores))

    def brier(self, scores: Sequence[float], labels: Sequence[int]) -> float:
        """Mean squared error of the positive-class probability"""
        scores, labels = as_binary_arrays(scores, labels)
        return float(brier_score_loss(labels, scores, pos_label=1))
