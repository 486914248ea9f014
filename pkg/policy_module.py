"""
Policy Module - Constraint-based threshold selection
Rule-out / rule-in sweeps over candidate thresholds, the four selection
policies, and application of locked thresholds to new cohorts
"""

import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from cohort_module import Cohort
from metrics_module import (ConfusionCounts, as_binary_arrays, candidate_thresholds,
                            counts_at_thresholds)

logger = logging.getLogger(__name__)

RULEOUT = 'ruleout'
RULEIN = 'rulein'
SECOND_REVIEW = 'second_review'

RULED_OUT = 'ruled_out'
RULED_IN = 'ruled_in'
GRAY_ZONE = 'gray_zone'

# slack for comparing ratios against float constraint values
EPS = 1e-12


class PolicyError(ValueError):
    """Raised for invalid policies or misapplied locked thresholds"""


def _check_unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise PolicyError(f"{name}={value} outside [0, 1]")


@dataclass(frozen=True)
class SweepRow:
    """One candidate threshold; rule-out set = {score < T}, rule-in set = {score >= T}"""
    threshold: float
    reported_threshold: float
    counts: ConfusionCounts
    ruleout_coverage: float
    rulein_coverage: float

    @property
    def npv(self) -> Optional[float]:
        return self.counts.npv

    @property
    def ppv(self) -> Optional[float]:
        return self.counts.ppv

    @property
    def sensitivity(self) -> Optional[float]:
        return self.counts.sensitivity

    @property
    def specificity(self) -> Optional[float]:
        return self.counts.specificity

    def as_row(self) -> Dict[str, Any]:
        return {'threshold': self.threshold, 'reported_threshold': self.reported_threshold,
                **asdict(self.counts), 'ruleout_coverage': self.ruleout_coverage,
                'rulein_coverage': self.rulein_coverage, 'npv': self.npv, 'ppv': self.ppv,
                'sensitivity': self.sensitivity, 'specificity': self.specificity}


@dataclass(frozen=True)
class ThresholdSweep:
    semantics: str
    rows: List[SweepRow]


@dataclass(frozen=True)
class Infeasible:
    policy: 'ThresholdPolicy'
    binding_constraint: str
    reason: str


class ThresholdPolicy:
    """Base class; subclasses filter feasible rows and pick one"""
    kind = ''
    band = ''

    def feasible(self, row) -> bool:
        raise NotImplementedError

    def pick(self, rows: List) -> Any:
        raise NotImplementedError

    def binding_constraint(self) -> str:
        raise NotImplementedError

    def metrics(self, row) -> Dict[str, Any]:
        raise NotImplementedError

    def choose(self, rows: Sequence) -> Union[Any, Infeasible]:
        feasible = [r for r in rows if self.feasible(r)]
        if not feasible:
            return Infeasible(policy=self, binding_constraint=self.binding_constraint(),
                              reason=f"no candidate among {len(rows)} satisfies {self.binding_constraint()}")
        return self.pick(feasible)

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.kind, **asdict(self)}

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> 'ThresholdPolicy':
        data = dict(data)
        kind = data.pop('kind', None)
        for policy_cls in (RuleOutNpv, RuleInPpv, RescueBurden, SensitivityFloor):
            if policy_cls.kind == kind:
                return policy_cls(**data)
        raise PolicyError(f"unknown policy kind '{kind}'")


@dataclass(frozen=True)
class RuleOutNpv(ThresholdPolicy):
    min_npv: float
    pick_rule: str = 'largest'
    kind = 'rule_out_npv'
    band = RULEOUT

    def __post_init__(self):
        _check_unit('min_npv', self.min_npv)
        if self.pick_rule != 'largest':
            raise PolicyError("rule-out selection always takes the largest feasible threshold")

    def feasible(self, row) -> bool:
        return row.npv is not None and row.npv >= self.min_npv - EPS

    def pick(self, rows):
        return max(rows, key=lambda r: r.threshold)

    def binding_constraint(self) -> str:
        return f"npv >= {self.min_npv}"

    def metrics(self, row) -> Dict[str, Any]:
        return {'npv': row.npv, 'ruleout_coverage': row.ruleout_coverage,
                'ruleout_cases': row.counts.tn + row.counts.fn}


@dataclass(frozen=True)
class RuleInPpv(ThresholdPolicy):
    min_ppv: float
    pick_rule: str = 'largest'
    kind = 'rule_in_ppv'
    band = RULEIN

    def __post_init__(self):
        _check_unit('min_ppv', self.min_ppv)
        if self.pick_rule not in ('largest', 'smallest'):
            raise PolicyError(f"pick_rule must be 'largest' or 'smallest', got '{self.pick_rule}'")

    def feasible(self, row) -> bool:
        return row.ppv is not None and row.ppv >= self.min_ppv - EPS

    def pick(self, rows):
        if self.pick_rule == 'largest':
            return max(rows, key=lambda r: r.threshold)
        return min(rows, key=lambda r: r.threshold)

    def binding_constraint(self) -> str:
        return f"ppv >= {self.min_ppv}"

    def metrics(self, row) -> Dict[str, Any]:
        return {'ppv': row.ppv, 'rulein_coverage': row.rulein_coverage,
                'rulein_cases': row.counts.tp + row.counts.fp}


@dataclass(frozen=True)
class SensitivityFloor(ThresholdPolicy):
    min_sensitivity: float
    kind = 'sensitivity_floor'
    band = SECOND_REVIEW

    def __post_init__(self):
        _check_unit('min_sensitivity', self.min_sensitivity)

    def feasible(self, row) -> bool:
        return row.sensitivity is not None and row.sensitivity >= self.min_sensitivity - EPS

    def pick(self, rows):
        return max(rows, key=lambda r: r.threshold)

    def binding_constraint(self) -> str:
        return f"sensitivity >= {self.min_sensitivity}"

    def metrics(self, row) -> Dict[str, Any]:
        return {'sensitivity': row.sensitivity, 'specificity': row.specificity}


@dataclass(frozen=True)
class RescueBurden(ThresholdPolicy):
    """Rows are second-review outcomes (rescue_rate, review_burden, nnr, threshold)"""
    min_rescue_rate: float
    max_review_burden: float
    kind = 'rescue_burden'
    band = SECOND_REVIEW

    def __post_init__(self):
        _check_unit('min_rescue_rate', self.min_rescue_rate)
        _check_unit('max_review_burden', self.max_review_burden)

    def feasible(self, row) -> bool:
        return (row.rescue_rate is not None and row.review_burden is not None
                and row.rescue_rate >= self.min_rescue_rate - EPS
                and row.review_burden <= self.max_review_burden + EPS)

    def pick(self, rows):
        # max rescue, then min burden, then min nnr, then largest T
        def key(r):
            nnr = r.nnr if r.nnr is not None else np.inf
            return (-r.rescue_rate, r.review_burden, nnr, -r.threshold)
        return min(rows, key=key)

    def binding_constraint(self) -> str:
        return f"rescue_rate >= {self.min_rescue_rate} and review_burden <= {self.max_review_burden}"

    def metrics(self, row) -> Dict[str, Any]:
        return {'rescue_rate': row.rescue_rate, 'review_burden': row.review_burden,
                'number_needed_to_review': row.nnr, 'rescued_fn': row.rescued_fn,
                'review_cases': row.review_cases}


@dataclass(frozen=True)
class LockedThreshold:
    """A frozen operating point; applying it never re-optimises"""
    task: str
    value: float
    policy: ThresholdPolicy
    source_cohort: str
    locked_at: datetime
    selection_metrics: Dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def band(self) -> str:
        return self.policy.band

    def to_dict(self) -> Dict[str, Any]:
        return {'task': self.task, 'band': self.band, 'value': self.value,
                'policy': self.policy.to_dict(), 'source_cohort': self.source_cohort,
                'locked_at': self.locked_at.isoformat(), 'selection_metrics': dict(self.selection_metrics)}


def reported_thresholds(thresholds: np.ndarray) -> np.ndarray:
    """Midpoint between each candidate and the previous unique score (same partition)

    The lowest observed score has no predecessor and reports itself; sentinels stay infinite.
    """
    reported = thresholds.copy()
    for i in np.flatnonzero(np.isfinite(thresholds)):
        prev = thresholds[i - 1] if i > 0 else -np.inf
        if np.isfinite(prev):
            reported[i] = (prev + thresholds[i]) / 2.0
    return reported


class PolicyModule:
    """Sweeps candidate thresholds and selects operating points under constraints"""

    def sweep(self, scores: Sequence[float], labels: Sequence[int], semantics: str = RULEOUT) -> ThresholdSweep:
        """One row per candidate threshold (unique scores plus -inf/+inf sentinels)"""
        if semantics not in (RULEOUT, RULEIN):
            raise PolicyError(f"semantics must be '{RULEOUT}' or '{RULEIN}'")
        scores, labels = as_binary_arrays(scores, labels)
        if labels.min() == labels.max():
            raise PolicyError("threshold sweep needs both classes")
        thresholds = candidate_thresholds(scores)
        reported = reported_thresholds(thresholds)
        n = scores.size
        rows = []
        for t, shown, (tp, fp, tn, fn) in zip(thresholds, reported, counts_at_thresholds(scores, labels, thresholds)):
            counts = ConfusionCounts(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))
            rows.append(SweepRow(threshold=float(t), reported_threshold=float(shown), counts=counts,
                                 ruleout_coverage=(tn + fn) / n, rulein_coverage=(tp + fp) / n))
        return ThresholdSweep(semantics=semantics, rows=rows)

    def select_threshold(self, sweep: Union[ThresholdSweep, Sequence], policy: ThresholdPolicy,
                         task: str = '', source_cohort: str = '',
                         locked_at: Optional[datetime] = None) -> Union[LockedThreshold, Infeasible]:
        """Apply `policy` to the sweep rows; INFEASIBLE comes back as a value"""
        rows = sweep.rows if isinstance(sweep, ThresholdSweep) else list(sweep)
        if not rows:
            raise PolicyError("empty sweep")
        chosen = policy.choose(rows)
        if isinstance(chosen, Infeasible):
            logger.warning(f"Threshold selection for '{task}' infeasible: {chosen.reason}")
            return chosen
        metrics = {'threshold': chosen.threshold, **policy.metrics(chosen)}
        locked = LockedThreshold(task=task, value=chosen.reported_threshold, policy=policy,
                                 source_cohort=source_cohort,
                                 locked_at=locked_at or datetime.now(timezone.utc).replace(microsecond=0),
                                 selection_metrics=metrics)
        logger.info(f"Selected {policy.band} threshold {locked.value:.6g} for '{task}' ({policy.binding_constraint()})")
        return locked

    def apply_locked(self, cohort: Cohort, low: Optional[LockedThreshold] = None,
                     high: Optional[LockedThreshold] = None) -> Dict[str, str]:
        """Per-case band using only the stored values: score < T_low ruled out, score >= T_high ruled in"""
        if low is None and high is None:
            raise PolicyError("at least one locked threshold is required")
        for locked in (low, high):
            if locked is not None and cohort.task and locked.task != cohort.task:
                raise PolicyError(f"locked threshold is for task '{locked.task}', cohort is '{cohort.task}'")
        t_low = low.value if low is not None else None
        t_high = high.value if high is not None else None
        if t_low is not None and t_high is not None and t_low > t_high:
            raise PolicyError(f"T_low={t_low} exceeds T_high={t_high}")
        return self.partition(cohort.case_ids(), cohort.positive_scores(), t_low, t_high)

    def partition(self, case_ids: Sequence[str], scores: Sequence[float],
                  t_low: Optional[float], t_high: Optional[float]) -> Dict[str, str]:
        assignment = {}
        for case_id, score in zip(case_ids, scores):
            if t_low is not None and score < t_low:
                assignment[case_id] = RULED_OUT
            elif t_high is not None and score >= t_high:
                assignment[case_id] = RULED_IN
            else:
                assignment[case_id] = GRAY_ZONE
        return assignment
