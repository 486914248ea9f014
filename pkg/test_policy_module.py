from datetime import datetime, timezone

import numpy as np
import pytest

from conftest import make_cohort
from policy_module import (GRAY_ZONE, RULED_IN, RULED_OUT, RULEIN, RULEOUT, Infeasible, LockedThreshold,
                           PolicyError, PolicyModule, RescueBurden, RuleInPpv, RuleOutNpv, SensitivityFloor,
                           ThresholdPolicy, reported_thresholds)

LOCKED_AT = datetime(2024, 2, 12, tzinfo=timezone.utc)


@pytest.fixture
def policy():
    return PolicyModule()


def test_reported_thresholds_are_midpoints():
    thresholds = np.array([-np.inf, 0.1, 0.3, 0.6, np.inf])
    assert reported_thresholds(thresholds).tolist() == pytest.approx([-np.inf, 0.1, 0.2, 0.45, np.inf])


def test_sweep_rows_and_monotone_coverage(policy, binary_cohort):
    scores, labels = binary_cohort.positive_scores(), binary_cohort.binary_labels()
    sweep = policy.sweep(scores, labels)
    assert len(sweep.rows) == np.unique(scores).size + 2
    coverage = [r.ruleout_coverage for r in sweep.rows]
    assert coverage == sorted(coverage)
    assert coverage[0] == 0.0 and coverage[-1] == 1.0
    for row in sweep.rows:
        assert row.ruleout_coverage + row.rulein_coverage == pytest.approx(1.0)


def test_sweep_needs_both_classes(policy):
    with pytest.raises(PolicyError):
        policy.sweep([0.1, 0.2], [0, 0])
    with pytest.raises(PolicyError):
        policy.sweep([0.1, 0.2], [0, 1], semantics='sideways')


def test_rule_out_selection_satisfies_its_constraint(policy, binary_cohort):
    scores, labels = binary_cohort.positive_scores(), binary_cohort.binary_labels()
    rule = RuleOutNpv(min_npv=0.95)
    locked = policy.select_threshold(policy.sweep(scores, labels), rule, 'frozen_section', 'internal', LOCKED_AT)
    assert isinstance(locked, LockedThreshold)
    assert locked.band == RULEOUT

    band = scores < locked.value
    npv = np.sum(band & (labels == 0)) / band.sum()
    assert npv >= 0.95
    assert locked.selection_metrics['npv'] == pytest.approx(npv)
    assert locked.selection_metrics['ruleout_cases'] == band.sum()

    # no larger threshold keeps the constraint
    larger = [r for r in policy.sweep(scores, labels).rows if r.threshold > locked.selection_metrics['threshold']]
    assert all(r.npv is None or r.npv < 0.95 for r in larger)


def test_infeasible_is_a_value(policy):
    scores = [0.1, 0.2, 0.3, 0.9]
    labels = [1, 0, 0, 1]
    result = policy.select_threshold(policy.sweep(scores, labels), RuleOutNpv(min_npv=1.0), 'margin')
    assert isinstance(result, Infeasible)
    assert result.binding_constraint == 'npv >= 1.0'


def test_rule_in_pick_rules(policy):
    scores = [0.1, 0.2, 0.6, 0.7, 0.8, 0.9]
    labels = [0, 0, 1, 1, 1, 1]
    sweep = policy.sweep(scores, labels, RULEIN)
    largest = policy.select_threshold(sweep, RuleInPpv(min_ppv=1.0), 'margin')
    smallest = policy.select_threshold(sweep, RuleInPpv(min_ppv=1.0, pick_rule='smallest'), 'margin')
    assert largest.selection_metrics['threshold'] == 0.9
    assert smallest.selection_metrics['threshold'] == 0.6
    assert smallest.value == pytest.approx(0.4)
    assert smallest.selection_metrics['rulein_coverage'] == pytest.approx(4 / 6)


def test_sensitivity_floor(policy):
    scores = [0.1, 0.2, 0.3, 0.4, 0.5]
    labels = [0, 1, 0, 1, 1]
    locked = policy.select_threshold(policy.sweep(scores, labels), SensitivityFloor(min_sensitivity=1.0), 'ihc')
    assert locked.selection_metrics['threshold'] == 0.2
    assert locked.selection_metrics['sensitivity'] == 1.0


@pytest.mark.parametrize('make', [
    lambda: RuleOutNpv(min_npv=1.5),
    lambda: RuleOutNpv(min_npv=0.9, pick_rule='smallest'),
    lambda: RuleInPpv(min_ppv=0.9, pick_rule='middle'),
    lambda: RescueBurden(min_rescue_rate=0.4, max_review_burden=-0.1),
])
def test_invalid_policies(make):
    with pytest.raises(PolicyError):
        make()


def test_policy_dict_round_trip():
    for rule in (RuleOutNpv(0.98), RuleInPpv(0.9, 'smallest'), SensitivityFloor(0.95), RescueBurden(0.4, 0.4)):
        assert ThresholdPolicy.from_dict(rule.to_dict()) == rule
    with pytest.raises(PolicyError):
        ThresholdPolicy.from_dict({'kind': 'coin_flip'})


def test_apply_locked_partitions_cases(policy):
    cohort = make_cohort([0.05, 0.2, 0.5, 0.9], [0, 0, 1, 1], task='margin')
    low = LockedThreshold('margin', 0.2, RuleOutNpv(0.9), 'internal', LOCKED_AT)
    high = LockedThreshold('margin', 0.9, RuleInPpv(0.9), 'internal', LOCKED_AT)
    assignment = policy.apply_locked(cohort, low, high)
    assert list(assignment.values()) == [RULED_OUT, GRAY_ZONE, GRAY_ZONE, RULED_IN]


def test_apply_locked_guards(policy):
    cohort = make_cohort([0.1, 0.9], [0, 1], task='margin')
    with pytest.raises(PolicyError):
        policy.apply_locked(cohort)
    with pytest.raises(PolicyError, match='task'):
        policy.apply_locked(cohort, LockedThreshold('ihc', 0.2, RuleOutNpv(0.9), 'internal', LOCKED_AT))
    with pytest.raises(PolicyError, match='exceeds'):
        policy.apply_locked(cohort, LockedThreshold('margin', 0.8, RuleOutNpv(0.9), 'internal', LOCKED_AT),
                            LockedThreshold('margin', 0.3, RuleInPpv(0.9), 'internal', LOCKED_AT))


def test_apply_locked_depends_only_on_the_stored_values(policy):
    low = LockedThreshold('margin', 0.25, RuleOutNpv(0.9), 'internal', LOCKED_AT)
    high = LockedThreshold('margin', 0.75, RuleInPpv(0.9), 'internal', LOCKED_AT)
    cohort = make_cohort([0.1, 0.3, 0.6, 0.8], [0, 1, 0, 1], task='margin')
    first = policy.apply_locked(cohort, low, high)
    assert policy.apply_locked(cohort, low, high) == first

    # more cases and different labels leave the shared cases' bands unchanged
    larger = make_cohort([0.1, 0.3, 0.6, 0.8, 0.05, 0.95], [1, 0, 1, 0, 1, 0], task='margin')
    again = policy.apply_locked(larger, low, high)
    assert {k: again[k] for k in first} == first
    assert set(again.values()) <= {RULED_OUT, GRAY_ZONE, RULED_IN}


def test_perfect_npv_on_separated_scores_rules_out_every_negative(policy):
    scores = [0.1, 0.15, 0.2, 0.3, 0.35, 0.4, 0.6, 0.7, 0.9]
    labels = [0, 0, 0, 0, 0, 0, 1, 1, 1]
    locked = policy.select_threshold(policy.sweep(scores, labels), RuleOutNpv(1.0), 'margin', 'internal', LOCKED_AT)
    assert isinstance(locked, LockedThreshold)
    assert locked.value == pytest.approx(0.5)
    assert locked.selection_metrics['npv'] == 1.0
    assert locked.selection_metrics['ruleout_coverage'] == pytest.approx(6 / 9)

    assignment = policy.apply_locked(make_cohort(scores, labels, task='margin'), locked)
    assert [band == RULED_OUT for band in assignment.values()] == [y == 0 for y in labels]
