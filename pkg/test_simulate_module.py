from datetime import datetime, timezone

import numpy as np
import pytest

from conftest import make_cohort
from policy_module import Infeasible, LockedThreshold, RescueBurden, RuleInPpv, RuleOutNpv
from resample_module import ResampleModule
from simulate_module import (POOLED, PrioritizationOutcome, SecondReviewOutcome, SimulationError,
                             SimulationModule, Strategy, selection_count)

# ER second-review rescue table: threshold, rescued false negatives, cases sent to review
ER_RESCUE = [(0.1, 47, 189), (0.2, 38, 147), (0.3, 30, 109), (0.4, 25, 90), (0.479, 22, 74),
             (0.5, 20, 71), (0.6, 11, 50), (0.7, 10, 36), (0.8, 10, 32), (0.9, 9, 20)]
ER_TOTAL_FN = 50
ER_NEGATIVE_CALLS = 207


@pytest.fixture
def simulation():
    return SimulationModule(ResampleModule(n_resamples=200, seed=7))


def er_rows():
    return [{'threshold': t, 'rescued_fn': r, 'review_cases': v} for t, r, v in ER_RESCUE]


@pytest.mark.parametrize('threshold, rescue_rate, nnr', [
    (0.1, 0.94, 4.02), (0.3, 0.60, 3.63), (0.5, 0.40, 3.55), (0.7, 0.20, 3.60), (0.9, 0.18, 2.22),
])
def test_second_review_identities(threshold, rescue_rate, nnr):
    _, rescued, reviews = next(row for row in ER_RESCUE if row[0] == threshold)
    outcome = SecondReviewOutcome.from_counts(threshold, ER_TOTAL_FN, rescued, reviews, ER_NEGATIVE_CALLS)
    assert outcome.rescue_rate == pytest.approx(rescue_rate, abs=0.01)
    assert outcome.nnr == pytest.approx(nnr, abs=0.01)
    assert outcome.false_alarm_reviews == reviews - rescued


def test_rescue_burden_selection_on_published_counts(simulation):
    result = simulation.sweep_from_counts(er_rows(), ER_TOTAL_FN, ER_NEGATIVE_CALLS,
                                          RescueBurden(min_rescue_rate=0.4, max_review_burden=0.4), 'ihc_er')
    assert result.selected.value == 0.479
    row = result.selected_row
    assert row.rescue_rate == pytest.approx(0.44)
    assert row.review_burden == pytest.approx(74 / 207)
    assert round(row.nnr, 1) == 3.4
    assert result.selected.selection_metrics['number_needed_to_review'] == pytest.approx(74 / 22)


def test_rescue_burden_infeasible(simulation):
    result = simulation.sweep_from_counts(er_rows(), ER_TOTAL_FN, ER_NEGATIVE_CALLS,
                                          RescueBurden(min_rescue_rate=0.95, max_review_burden=0.2))
    assert isinstance(result.selected, Infeasible)
    assert result.selected_row is None


def test_inconsistent_counts_are_rejected():
    with pytest.raises(SimulationError):
        SecondReviewOutcome.from_counts(0.5, total_fn=10, rescued_fn=11, review_cases=20, n_negative_calls=50)
    with pytest.raises(SimulationError):
        SecondReviewOutcome.from_counts(0.5, total_fn=10, rescued_fn=5, review_cases=60, n_negative_calls=50)


def test_second_review_on_scores(simulation):
    scores = [0.9, 0.7, 0.4, 0.2, 0.1]
    truth = [1, 0, 1, 0, 0]
    outcome = simulation.second_review(scores, truth, 0.4)
    assert (outcome.total_fn, outcome.rescued_fn, outcome.review_cases) == (2, 2, 3)
    assert outcome.review_burden == pytest.approx(0.6)
    assert outcome.nnr == pytest.approx(1.5)

    nothing = simulation.second_review([0.1, 0.2], [0, 0], 0.5)
    assert nothing.rescue_rate is None
    assert nothing.nnr is None


def test_second_review_sweep_picks_feasible_row(simulation):
    rng = np.random.default_rng(8)
    truth = (rng.random(200) < 0.2).astype(int)
    scores = np.clip(rng.normal(0.3 + 0.3 * truth, 0.15), 0, 1)
    result = simulation.second_review_sweep(scores, truth, RescueBurden(0.5, 0.5), 'ihc_er', 'internal')
    row = result.selected_row
    assert row.rescue_rate >= 0.5 and row.review_burden <= 0.5
    better = [r for r in result.rows if r.rescue_rate > row.rescue_rate and r.review_burden <= 0.5]
    assert not better


def test_triage_from_published_counts(simulation):
    intra = simulation.triage_from_counts(ruleout_cases=68, ruleout_true_negatives=68, total_cases=101)
    assert round(intra.ruleout_coverage, 3) == 0.673
    assert intra.npv_at_ruleout == 1.0
    assert intra.ppv_at_rulein is None

    pooled = simulation.triage_from_counts(ruleout_cases=1062, ruleout_true_negatives=1050, total_cases=1994)
    assert round(pooled.ruleout_coverage, 3) == 0.533
    assert round(pooled.npv_at_ruleout, 3) == 0.989

    with pytest.raises(SimulationError):
        simulation.triage_from_counts(ruleout_cases=10, ruleout_true_negatives=11, total_cases=20)


def test_triage_bands(simulation):
    scores = [0.05, 0.1, 0.3, 0.5, 0.8, 0.95]
    labels = [0, 0, 1, 0, 1, 1]
    outcome = simulation.triage(scores, labels, t_low=0.2, t_high=0.8, with_ci=False)
    assert (outcome.ruleout_cases, outcome.gray_zone_cases, outcome.rulein_cases) == (2, 2, 2)
    assert outcome.npv_at_ruleout == 1.0
    assert outcome.ppv_at_rulein == 1.0
    assert outcome.npv_ci is None

    with pytest.raises(SimulationError):
        simulation.triage(scores, labels, t_low=0.9, t_high=0.2)


def test_triage_by_center_adds_pooled_row(simulation, binary_cohort):
    results = simulation.triage_by_center(binary_cohort, t_low=0.3)
    assert sorted(results) == sorted(['H4', 'H15', POOLED])
    assert results[POOLED].total_cases == results['H4'].total_cases + results['H15'].total_cases
    assert results[POOLED].ruleout_cases == results['H4'].ruleout_cases + results['H15'].ruleout_cases
    ci = results[POOLED].npv_ci
    assert ci is not None and ci.lo <= ci.hi


def test_selection_count():
    assert selection_count(0.2, 100) == 20
    assert selection_count(0.1, 235) == 24
    assert selection_count(0.0, 50) == 0


def test_full_testing_rate_reproduces_prevalence(simulation):
    rng = np.random.default_rng(1)
    truth = np.array([1] * 85 + [0] * 150)
    scores = rng.random(235)
    ids = [f"m{i:03d}" for i in range(235)]
    (outcome,) = simulation.prioritize_internal({Strategy.MODEL_ONLY: scores}, truth, ids, [1.0])
    assert outcome.n_selected == 235
    assert round(outcome.ppv, 3) == 0.362
    assert outcome.enrichment == pytest.approx(1.0)
    assert outcome.tests_per_mutation == pytest.approx(2.8, abs=0.05)


def test_external_prioritization_row():
    outcome = PrioritizationOutcome.from_counts(Strategy.MODEL_ONLY, 0.2, 0.61, n_selected=22,
                                                true_positives=14, n_cases=108, positives=39)
    assert round(outcome.actual_rate, 3) == 0.204
    assert round(outcome.sensitivity, 3) == 0.359
    assert round(outcome.ppv, 3) == 0.636
    assert outcome.enrichment * outcome.prevalence == pytest.approx(outcome.ppv, abs=0.01)


def test_boundary_ties_are_all_selected(simulation):
    outcomes = simulation.prioritize_internal({Strategy.CLINICAL: [0.9, 0.8, 0.8, 0.1]}, [1, 0, 1, 0],
                                              ['a', 'b', 'c', 'd'], [0.0, 0.5])
    none, half = outcomes
    assert none.n_selected == 0 and none.ppv is None
    assert half.threshold == 0.8
    assert half.n_selected == 3
    assert half.actual_rate == 0.75


def test_threshold_transfer(simulation):
    internal = np.linspace(0.05, 0.95, 10)
    assert simulation.prioritize_transfer(internal, 0.2) == pytest.approx(0.85)
    with pytest.raises(SimulationError):
        simulation.prioritize_transfer(internal, 1.0)
    with pytest.raises(SimulationError):
        simulation.prioritize_transfer([0.5] * 10, 0.2)

    table = simulation.prioritize_transfer_table(internal, [0.9, 0.86, 0.6, 0.1], [1, 1, 0, 0], [0.2, 0.5])
    assert [o.n_selected for o in table] == [2, 3]
    assert [o.intended_rate for o in table] == [0.2, 0.5]


def test_deferral_partition(simulation):
    cohort = make_cohort([0.1, 0.15, 0.6, 0.2, 0.9], [0, 1, 0, 0, 1],
                         tags=[('Defer',), ('Defer',), ('Defer',), (), ('Defer', 'NAC')], task='frozen_section')
    locked = LockedThreshold('frozen_section', 0.3, RuleOutNpv(0.98), 'internal',
                             datetime(2024, 2, 12, tzinfo=timezone.utc))
    outcome = simulation.deferral_analysis(cohort, locked)
    assert (outcome.non_deferred, outcome.safe_rescues, outcome.unsafe_rescues, outcome.still_deferred) == (1, 1, 1, 2)
    assert outcome.total == len(cohort)
    assert outcome.case_assignment['c001'] == 'unsafe_rescue'

    rule_in = LockedThreshold('frozen_section', 0.3, RuleInPpv(0.9), 'internal',
                              datetime(2024, 2, 12, tzinfo=timezone.utc))
    with pytest.raises(SimulationError):
        simulation.deferral_analysis(cohort, rule_in)


def test_reviewing_every_negative_call_rescues_every_miss(simulation):
    rng = np.random.default_rng(31)
    scores = rng.random(60)
    truth = (rng.random(60) < 0.2).astype(int)
    truth[0] = 1
    outcome = simulation.second_review(scores, truth, -np.inf)
    assert outcome.rescue_rate == 1.0
    assert outcome.review_burden == 1.0
    assert outcome.review_cases == 60


@pytest.mark.parametrize('threshold, rescued, reviews', ER_RESCUE)
def test_nnr_times_rescue_rate_recovers_reviews(threshold, rescued, reviews):
    outcome = SecondReviewOutcome.from_counts(threshold, ER_TOTAL_FN, rescued, reviews, ER_NEGATIVE_CALLS)
    assert outcome.nnr * outcome.rescue_rate * outcome.total_fn == pytest.approx(reviews)


def test_prioritization_sensitivity_grows_with_testing_rate(simulation):
    rng = np.random.default_rng(32)
    truth = (rng.random(150) < 0.3).astype(int)
    scores = {Strategy.MODEL_ONLY: np.round(np.clip(0.3 * truth + rng.normal(0.4, 0.2, 150), 0, 1), 2),
              Strategy.CLINICAL: np.round(rng.random(150), 2)}
    rates = [0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0]
    outcomes = simulation.prioritize_internal(scores, truth, [f"m{i}" for i in range(150)], rates)
    for strategy in scores:
        sensitivity = [o.sensitivity for o in outcomes if o.strategy == strategy]
        assert len(sensitivity) == len(rates)
        assert sensitivity == sorted(sensitivity)
        assert sensitivity[-1] == 1.0


def test_triage_bands_are_exhaustive_and_disjoint(simulation):
    rng = np.random.default_rng(33)
    scores = np.round(rng.random(80), 2)
    labels = (rng.random(80) < 0.4).astype(int)
    for t_low, t_high in [(0.2, 0.8), (0.5, 0.5), (None, 0.7), (0.3, None), (0.0, 1.0)]:
        outcome = simulation.triage(scores, labels, t_low, t_high, with_ci=False)
        assert outcome.ruleout_cases + outcome.rulein_cases + outcome.gray_zone_cases == outcome.total_cases == 80
        ruled_out = scores < t_low if t_low is not None else np.zeros(80, dtype=bool)
        ruled_in = scores >= t_high if t_high is not None else np.zeros(80, dtype=bool)
        assert not np.any(ruled_out & ruled_in)
        assert (outcome.ruleout_cases, outcome.rulein_cases) == (ruled_out.sum(), ruled_in.sum())
