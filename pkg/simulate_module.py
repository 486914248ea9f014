"""
Simulate Module - Clinical workflow simulations
AI-assisted second review, safety-constrained rule-out/rule-in triage,
genomic-testing prioritization and deferral rescue
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from cohort_module import Cohort
from metrics_module import as_binary_arrays, candidate_thresholds, counts_at_thresholds
from policy_module import (RULEOUT, Infeasible, LockedThreshold, PolicyModule, RescueBurden,
                           reported_thresholds)
from resample_module import BootstrapResult, ResampleError, ResampleModule

logger = logging.getLogger(__name__)

DEFER_TAG = 'Defer'
POOLED = 'All Externals'


class SimulationError(ValueError):
    """Raised for empty or degenerate simulation inputs"""


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


class Strategy(str, Enum):
    CLINICAL = 'clinical'
    MODEL_ONLY = 'model_only'
    CLINICAL_PLUS_MODEL = 'clinical_plus_model'


@dataclass(frozen=True)
class SecondReviewOutcome:
    threshold: float
    reported_threshold: float
    total_fn: int
    rescued_fn: int
    review_cases: int
    false_alarm_reviews: int
    n_negative_calls: int
    rescue_rate: Optional[float]
    review_burden: Optional[float]
    nnr: Optional[float]

    @classmethod
    def from_counts(cls, threshold: float, total_fn: int, rescued_fn: int, review_cases: int,
                    n_negative_calls: int, reported_threshold: Optional[float] = None) -> 'SecondReviewOutcome':
        if not 0 <= rescued_fn <= total_fn:
            raise SimulationError(f"rescued_fn={rescued_fn} outside [0, total_fn={total_fn}]")
        if not rescued_fn <= review_cases <= n_negative_calls:
            raise SimulationError(f"review_cases={review_cases} inconsistent with rescued_fn={rescued_fn} "
                                  f"and {n_negative_calls} negative calls")
        return cls(threshold=threshold,
                   reported_threshold=threshold if reported_threshold is None else reported_threshold,
                   total_fn=total_fn, rescued_fn=rescued_fn, review_cases=review_cases,
                   false_alarm_reviews=review_cases - rescued_fn, n_negative_calls=n_negative_calls,
                   rescue_rate=_ratio(rescued_fn, total_fn),
                   review_burden=_ratio(review_cases, n_negative_calls),
                   nnr=_ratio(review_cases, rescued_fn))

    def as_row(self) -> Dict:
        return {'threshold': self.threshold, 'reported_threshold': self.reported_threshold,
                'total_fn': self.total_fn, 'rescued_fn': self.rescued_fn, 'rescue_rate': self.rescue_rate,
                'review_cases': self.review_cases, 'false_alarm_reviews': self.false_alarm_reviews,
                'review_burden': self.review_burden, 'number_needed_to_review': self.nnr}


@dataclass(frozen=True)
class SecondReviewSweep:
    rows: List[SecondReviewOutcome]
    selected: Union[LockedThreshold, Infeasible]

    @property
    def selected_row(self) -> Optional[SecondReviewOutcome]:
        if isinstance(self.selected, Infeasible):
            return None
        t = self.selected.selection_metrics['threshold']
        return next(r for r in self.rows if r.threshold == t)


@dataclass(frozen=True)
class TriageOutcome:
    t_low: Optional[float]
    t_high: Optional[float]
    total_cases: int
    ruleout_cases: int
    rulein_cases: int
    gray_zone_cases: int
    ruleout_true_negatives: int
    rulein_true_positives: int
    ruleout_coverage: float
    rulein_coverage: float
    npv_at_ruleout: Optional[float]
    ppv_at_rulein: Optional[float]
    npv_ci: Optional[BootstrapResult] = None
    ppv_ci: Optional[BootstrapResult] = None


@dataclass(frozen=True)
class PrioritizationOutcome:
    strategy: Strategy
    intended_rate: Optional[float]
    actual_rate: float
    threshold: float
    n_selected: int
    n_cases: int
    true_positives: int
    prevalence: Optional[float]
    sensitivity: Optional[float]
    ppv: Optional[float]
    enrichment: Optional[float]
    tests_per_mutation: Optional[float]

    @classmethod
    def from_counts(cls, strategy: Strategy, intended_rate: Optional[float], threshold: float, n_selected: int,
                    true_positives: int, n_cases: int, positives: int) -> 'PrioritizationOutcome':
        if n_cases <= 0:
            raise SimulationError("no cases")
        ppv = _ratio(true_positives, n_selected)
        prevalence = _ratio(positives, n_cases)
        enrichment = ppv / prevalence if ppv is not None and prevalence else None
        return cls(strategy=Strategy(strategy), intended_rate=intended_rate, actual_rate=n_selected / n_cases,
                   threshold=threshold, n_selected=n_selected, n_cases=n_cases, true_positives=true_positives,
                   prevalence=prevalence, sensitivity=_ratio(true_positives, positives), ppv=ppv,
                   enrichment=enrichment, tests_per_mutation=1.0 / ppv if ppv else None)


@dataclass(frozen=True)
class DeferralOutcome:
    non_deferred: int
    safe_rescues: int
    unsafe_rescues: int
    still_deferred: int
    threshold: float
    case_assignment: Dict[str, str] = field(default_factory=dict, compare=False)

    @property
    def total(self) -> int:
        return self.non_deferred + self.safe_rescues + self.unsafe_rescues + self.still_deferred


def selection_count(rate: float, n: int) -> int:
    """ceil(rate * n), rounded first so 0.2 * 100 is 20 and not 21"""
    return int(math.ceil(round(rate * n, 9)))


def rank_order(scores: np.ndarray, case_ids: Sequence[str]) -> List[int]:
    """Indices by descending score, ties by case_id"""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], case_ids[i]))


class SimulationModule:
    """Workflow simulations over locked or candidate thresholds"""

    def __init__(self, resample_module: Optional[ResampleModule] = None,
                 policy_module: Optional[PolicyModule] = None):
        self.resample = resample_module or ResampleModule()
        self.policy = policy_module or PolicyModule()

    # Second review

    def second_review(self, scores: Sequence[float], truth: Sequence[int], threshold: float) -> SecondReviewOutcome:
        """
        Second review of doctor-negative cases flagged by score >= threshold

        Args:
            scores: model positive-class score per doctor-negative case
            truth: surgical reference (1 = positive, i.e. a doctor false negative)
        """
        scores, truth = self._doctor_negatives(scores, truth)
        tp, fp, _, _ = counts_at_thresholds(scores, truth, np.array([threshold], dtype=float))[0]
        return SecondReviewOutcome.from_counts(float(threshold), total_fn=int(truth.sum()), rescued_fn=int(tp),
                                               review_cases=int(tp + fp), n_negative_calls=int(scores.size))

    def second_review_sweep(self, scores: Sequence[float], truth: Sequence[int], policy: RescueBurden,
                            task: str = '', source_cohort: str = '') -> SecondReviewSweep:
        """Outcome at every candidate threshold, then selection under the rescue/burden policy"""
        scores, truth = self._doctor_negatives(scores, truth)
        thresholds = candidate_thresholds(scores)
        reported = reported_thresholds(thresholds)
        rows = []
        for t, shown, (tp, fp, _, _) in zip(thresholds, reported, counts_at_thresholds(scores, truth, thresholds)):
            rows.append(SecondReviewOutcome.from_counts(float(t), total_fn=int(truth.sum()), rescued_fn=int(tp),
                                                        review_cases=int(tp + fp), n_negative_calls=int(scores.size),
                                                        reported_threshold=float(shown)))
        return SecondReviewSweep(rows=rows, selected=self.policy.select_threshold(rows, policy, task, source_cohort))

    def sweep_from_counts(self, rows: Iterable[Mapping], total_fn: int, n_negative_calls: int,
                          policy: RescueBurden, task: str = '') -> SecondReviewSweep:
        """Replay a published per-threshold table (threshold, rescued_fn, review_cases)"""
        outcomes = [SecondReviewOutcome.from_counts(float(r['threshold']), total_fn=total_fn,
                                                    rescued_fn=int(r['rescued_fn']),
                                                    review_cases=int(r['review_cases']),
                                                    n_negative_calls=n_negative_calls)
                    for r in rows]
        if not outcomes:
            raise SimulationError("empty count table")
        return SecondReviewSweep(rows=outcomes, selected=self.policy.select_threshold(outcomes, policy, task))

    def _doctor_negatives(self, scores, truth):
        scores = np.asarray(scores, dtype=float)
        if scores.size == 0:
            raise SimulationError("no doctor-negative cases")
        return as_binary_arrays(scores, truth)

    # Triage

    def triage(self, scores: Sequence[float], labels: Sequence[int], t_low: Optional[float] = None,
               t_high: Optional[float] = None, with_ci: bool = True) -> TriageOutcome:
        """Rule out score < t_low, rule in score >= t_high, everything else stays in the gray zone"""
        scores, labels = as_binary_arrays(scores, labels)
        if t_low is not None and t_high is not None and t_low > t_high:
            raise SimulationError(f"t_low={t_low} exceeds t_high={t_high}")
        ruled_out = scores < t_low if t_low is not None else np.zeros(scores.size, dtype=bool)
        ruled_in = scores >= t_high if t_high is not None else np.zeros(scores.size, dtype=bool)
        outcome = self.triage_from_counts(
            ruleout_cases=int(ruled_out.sum()), ruleout_true_negatives=int((ruled_out & (labels == 0)).sum()),
            total_cases=int(scores.size), rulein_cases=int(ruled_in.sum()),
            rulein_true_positives=int((ruled_in & (labels == 1)).sum()), t_low=t_low, t_high=t_high)
        if not with_ci:
            return outcome

        def npv(s, y):
            s, y = np.asarray(s), np.asarray(y)
            band = s < t_low
            return _ratio(int((band & (y == 0)).sum()), int(band.sum()))

        def ppv(s, y):
            s, y = np.asarray(s), np.asarray(y)
            band = s >= t_high
            return _ratio(int((band & (y == 1)).sum()), int(band.sum()))

        npv_ci = self._band_ci(npv, scores, labels, 'rule-out NPV') if t_low is not None else None
        ppv_ci = self._band_ci(ppv, scores, labels, 'rule-in PPV') if t_high is not None else None
        return replace(outcome, npv_ci=npv_ci, ppv_ci=ppv_ci)

    def _band_ci(self, stat, scores, labels, name: str) -> Optional[BootstrapResult]:
        try:
            return self.resample.bootstrap_ci(stat, (scores, labels))
        except ResampleError as e:
            logger.warning(f"No bootstrap interval for {name}: {e}")
            return None

    def triage_from_counts(self, ruleout_cases: int, ruleout_true_negatives: int, total_cases: int,
                           rulein_cases: int = 0, rulein_true_positives: int = 0,
                           t_low: Optional[float] = None, t_high: Optional[float] = None) -> TriageOutcome:
        if total_cases <= 0:
            raise SimulationError("no cases")
        if ruleout_cases + rulein_cases > total_cases:
            raise SimulationError("rule-out and rule-in bands exceed the cohort")
        if ruleout_true_negatives > ruleout_cases or rulein_true_positives > rulein_cases:
            raise SimulationError("band counts exceed band sizes")
        return TriageOutcome(t_low=t_low, t_high=t_high, total_cases=total_cases, ruleout_cases=ruleout_cases,
                             rulein_cases=rulein_cases,
                             gray_zone_cases=total_cases - ruleout_cases - rulein_cases,
                             ruleout_true_negatives=ruleout_true_negatives,
                             rulein_true_positives=rulein_true_positives,
                             ruleout_coverage=ruleout_cases / total_cases, rulein_coverage=rulein_cases / total_cases,
                             npv_at_ruleout=_ratio(ruleout_true_negatives, ruleout_cases),
                             ppv_at_rulein=_ratio(rulein_true_positives, rulein_cases))

    def triage_cohort(self, cohort: Cohort, t_low: Optional[float] = None, t_high: Optional[float] = None,
                      with_ci: bool = True) -> TriageOutcome:
        if not len(cohort):
            raise SimulationError(f"cohort '{cohort.name}' is empty")
        return self.triage(cohort.positive_scores(), cohort.binary_labels(), t_low, t_high, with_ci)

    def triage_by_center(self, cohort: Cohort, t_low: Optional[float] = None, t_high: Optional[float] = None,
                         with_ci: bool = True) -> Dict[str, TriageOutcome]:
        """One outcome per center plus the pooled row"""
        results = {}
        for center in cohort.centers():
            records = [r for r in cohort.records if r.center == center]
            scores = [r.scores[cohort.class_map.resolve_positive()] for r in records]
            labels = [int(r.true_label == cohort.class_map.resolve_positive()) for r in records]
            results[center or '(none)'] = self.triage(scores, labels, t_low, t_high, with_ci)
        results[POOLED] = self.triage_cohort(cohort, t_low, t_high, with_ci)
        return results

    # Prioritization

    def prioritize_internal(self, strategy_scores: Mapping[Strategy, Sequence[float]], truth: Sequence[int],
                            case_ids: Sequence[str], rates: Sequence[float]) -> List[PrioritizationOutcome]:
        """Top ceil(rate * n) per strategy ranking; boundary ties are all selected"""
        if not rates:
            raise SimulationError("no testing rates given")
        if not strategy_scores:
            raise SimulationError("no strategies given")
        outcomes = []
        for strategy, scores in strategy_scores.items():
            scores, labels = as_binary_arrays(scores, truth)
            if len(case_ids) != scores.size:
                raise SimulationError("case_ids do not align with scores")
            order = rank_order(scores, case_ids)
            for rate in rates:
                if not 0.0 <= rate <= 1.0:
                    raise SimulationError(f"rate {rate} outside [0, 1]")
                k = selection_count(rate, scores.size)
                threshold = float(scores[order[k - 1]]) if k > 0 else math.inf
                outcomes.append(self.apply_priority_threshold(scores, labels, threshold, strategy, rate))
        return outcomes

    def prioritize_transfer(self, internal_scores: Sequence[float], intended_rate: float) -> float:
        """Score of the last case inside the internal top ceil(rate * n)"""
        scores = np.asarray(internal_scores, dtype=float)
        if scores.size == 0:
            raise SimulationError("no internal scores")
        if not 0.0 < intended_rate < 1.0:
            raise SimulationError(f"intended rate must lie in (0, 1), got {intended_rate}")
        if np.unique(scores).size < 2:
            raise SimulationError("internal scores are all equal; no rate boundary exists")
        ranked = np.sort(scores)[::-1]
        return float(ranked[selection_count(intended_rate, scores.size) - 1])

    def apply_priority_threshold(self, scores: Sequence[float], truth: Sequence[int], threshold: float,
                                 strategy: Strategy = Strategy.MODEL_ONLY,
                                 intended_rate: Optional[float] = None) -> PrioritizationOutcome:
        scores, labels = as_binary_arrays(scores, truth)
        selected = scores >= threshold
        return PrioritizationOutcome.from_counts(strategy, intended_rate, float(threshold),
                                                 n_selected=int(selected.sum()),
                                                 true_positives=int((selected & (labels == 1)).sum()),
                                                 n_cases=int(scores.size), positives=int(labels.sum()))

    def prioritize_transfer_table(self, internal_scores: Sequence[float], external_scores: Sequence[float],
                                  external_truth: Sequence[int], rates: Sequence[float],
                                  strategy: Strategy = Strategy.MODEL_ONLY) -> List[PrioritizationOutcome]:
        if not rates:
            raise SimulationError("no testing rates given")
        return [self.apply_priority_threshold(external_scores, external_truth,
                                              self.prioritize_transfer(internal_scores, rate), strategy, rate)
                for rate in rates]

    # Deferral

    def deferral_analysis(self, cohort: Cohort, locked_ruleout: Union[LockedThreshold, float],
                          tag: str = DEFER_TAG) -> DeferralOutcome:
        """
        Partition cases by deferral tag and the locked rule-out threshold

        Deferred cases below the threshold are safe rescues when negative and unsafe
        rescues when positive; the rest stay deferred. Untagged cases are non-deferred.
        """
        if isinstance(locked_ruleout, LockedThreshold):
            if locked_ruleout.band != RULEOUT:
                raise SimulationError(f"deferral needs a rule-out threshold, got band '{locked_ruleout.band}'")
            if cohort.task and locked_ruleout.task != cohort.task:
                raise SimulationError(f"locked threshold is for task '{locked_ruleout.task}', cohort is '{cohort.task}'")
            threshold = locked_ruleout.value
        else:
            threshold = float(locked_ruleout)

        positive = cohort.class_map.resolve_positive()
        counts = {'non_deferred': 0, 'safe_rescue': 0, 'unsafe_rescue': 0, 'still_deferred': 0}
        assignment = {}
        for r in cohort.records:
            if tag not in r.subgroup_tags:
                category = 'non_deferred'
            elif r.scores[positive] < threshold:
                category = 'unsafe_rescue' if r.true_label == positive else 'safe_rescue'
            else:
                category = 'still_deferred'
            counts[category] += 1
            assignment[r.case_id] = category
        if counts['non_deferred'] == len(cohort):
            logger.warning(f"No '{tag}' cases in cohort '{cohort.name}'")
        return DeferralOutcome(non_deferred=counts['non_deferred'], safe_rescues=counts['safe_rescue'],
                               unsafe_rescues=counts['unsafe_rescue'], still_deferred=counts['still_deferred'],
                               threshold=threshold, case_assignment=assignment)

