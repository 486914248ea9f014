"""
triagebench - Command-line application
Loads cohorts, runs the evaluation and workflow analyses, manages the
locked-threshold registry and writes machine-readable reports
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    script_dir = os.path.dirname(os.path.abspath(__file__))
    load_dotenv(os.path.join(script_dir, '.env'))
except ImportError:
    pass  # python-dotenv not installed, use system env vars

from cohort_module import ClassMap, Cohort, CohortModule, CohortValidationError
from inference_module import GeeFit, InferenceModule, OUTCOME_LINKS
from metrics_module import MetricsModule
from policy_module import (RULEIN, RULEOUT, SECOND_REVIEW, Infeasible, PolicyError, PolicyModule,
                           RescueBurden, RuleInPpv, ThresholdPolicy)
from registry_module import DEFAULT_REGISTRY, RegistryError, RegistryModule
from report_module import ReportModule, as_percent, format_ci
from resample_module import DEFAULT_RESAMPLES, DEFAULT_SEED, ResampleModule
from simulate_module import SimulationModule, Strategy
from survival_module import RISK_GROUP, SurvivalModule

__version__ = '1.0.0'

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2

DEFAULT_RATES = (0.1, 0.2, 0.3, 0.4, 0.5, 1.0)


class ConfigError(ValueError):
    """Raised for unusable command-line or environment configuration"""


@dataclass(frozen=True)
class RunConfig:
    command: str
    inputs: Dict[str, Optional[str]]
    schema: Optional[str]
    classes: List[str]
    task: str
    policy: Optional[Any]
    seed: int
    n_resamples: int
    n_jobs: int
    out_dir: str
    registry: str
    options: Dict[str, Any] = field(default_factory=dict)


def _env_int(name: str, default: int) -> int:
    value = os.environ.get(name, '').strip()
    if not value:
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got '{value}'") from None


def _rates(text: Optional[str]) -> List[float]:
    if not text:
        return list(DEFAULT_RATES)
    try:
        return [float(r) for r in text.split(',') if r.strip()]
    except ValueError:
        raise ConfigError(f"--rates expects comma-separated numbers, got '{text}'") from None


def load_policies(path: Optional[str]) -> List[ThresholdPolicy]:
    """Policy file: one policy object or a list of them, each with a 'kind'"""
    if not path:
        return []
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    items = data if isinstance(data, list) else [data]
    try:
        return [ThresholdPolicy.from_dict(item) for item in items]
    except TypeError as e:
        raise ConfigError(f"invalid policy in {path}: {e}") from None


def resolve_config(args: argparse.Namespace, classes: Sequence[str] = (), task: str = '') -> RunConfig:
    """CLI flag > environment > built-in default"""
    seed = args.seed if args.seed is not None else _env_int('TRIAGEBENCH_SEED', DEFAULT_SEED)
    n_resamples = args.resamples if args.resamples is not None else _env_int('TRIAGEBENCH_RESAMPLES', DEFAULT_RESAMPLES)
    if n_resamples < 1:
        raise ConfigError("resample count must be >= 1")
    registry = args.registry or os.environ.get('TRIAGEBENCH_REGISTRY') or DEFAULT_REGISTRY
    options = {k: v for k, v in sorted(vars(args).items())
               if k not in ('command', 'input', 'schema', 'policy', 'seed', 'resamples', 'jobs', 'out',
                            'registry', 'handler', 'verbose')}
    policy = None
    if getattr(args, 'policy', None):
        policy = [p.to_dict() for p in load_policies(args.policy)]
    return RunConfig(command=args.command, inputs={'input': args.input, 'external': getattr(args, 'external', None)},
                     schema=getattr(args, 'schema', None), classes=list(classes), task=task, policy=policy,
                     seed=seed, n_resamples=n_resamples, n_jobs=args.jobs, out_dir=args.out, registry=str(registry),
                     options=options)


class Run:
    """One CLI invocation: wired modules, completed sections and failures"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.cohorts = CohortModule()
        self.class_map, self.task = self._class_map()
        self.config = resolve_config(args, self.class_map.names if self.class_map else (), self.task)
        self.resample = ResampleModule(n_resamples=self.config.n_resamples, seed=self.config.seed,
                                       n_jobs=self.config.n_jobs)
        self.metrics = MetricsModule()
        self.policy = PolicyModule()
        self.registry = RegistryModule(self.config.registry)
        self.simulation = SimulationModule(self.resample, self.policy)
        self.inference = InferenceModule(self.resample, self.metrics)
        self.survival = SurvivalModule(self.resample)
        self.report = ReportModule(self.config.out_dir, xlsx=args.xlsx)
        self.sections: Dict[str, Any] = {}
        self.failed: List[Dict[str, str]] = []

    def _class_map(self):
        schema = getattr(self.args, 'schema', None)
        task = getattr(self.args, 'task', None) or ''
        if schema:
            class_map, schema_task, self.normalized = self.cohorts.load_schema(schema)
            return class_map, task or schema_task
        self.normalized = True
        return ClassMap(names=('negative', 'positive'), positive_index=1), task

    def load_cohort(self, path: Optional[str] = None) -> Cohort:
        path = path or self.args.input
        if not path:
            raise ConfigError("--input is required")
        return self.cohorts.load_cohort(path, self.class_map, task=self.task, normalized=self.normalized)

    def section(self, name: str, fn: Callable, *args, **kwargs) -> Any:
        """Run one analysis; a failure is recorded and the run continues"""
        try:
            result = fn(*args, **kwargs)
            self.sections[name] = result
            return result
        except Exception as e:
            logger.error(f"Error in {name}: {e}")
            self.failed.append({'section': name, 'error': str(e)})
            return None

    def finish(self) -> int:
        report = {'command': self.config.command, 'toolkit_version': __version__,
                  'config': asdict(self.config), 'sections': self.sections, 'failed': self.failed}
        self.report.write_json(self.config.command.replace('-', '_'), report)
        self.report.write_xlsx(self.config.command.replace('-', '_'))
        if self.failed:
            logger.warning(f"{len(self.failed)} analysis section(s) failed: {[f['section'] for f in self.failed]}")
            return EXIT_PARTIAL
        return EXIT_OK


# Report shaping

def gee_summary(fit: GeeFit) -> Dict[str, Any]:
    effect = fit.exposure_effect
    return {'link': fit.link, 'effect_name': fit.effect_name, 'exposure': fit.exposure,
            'value': effect.effect if effect else None,
            'ci': list(effect.effect_ci) if effect else None,
            'p': effect.p if effect else None,
            'working_correlation': fit.working_correlation, 'n_clusters': fit.n_clusters,
            'n_obs': fit.n_obs, 'converged': fit.converged, 'coefficients': fit.coefficients}


def _thresholds(run: Run, cohort: Cohort):
    """Explicit --t-low/--t-high win; otherwise the registry entries for the task"""
    t_low, t_high = run.args.t_low, run.args.t_high
    if t_low is None and t_high is None:
        low, high = run.registry.find(cohort.task, RULEOUT), run.registry.find(cohort.task, RULEIN)
        if low is None and high is None:
            raise RegistryError(f"no locked threshold for task '{cohort.task}' in {run.registry.path}")
        t_low = low.value if low else None
        t_high = high.value if high else None
    return t_low, t_high


# Commands

def cmd_metrics(run: Run) -> None:
    cohort = run.load_cohort()
    run.section('class_distribution', run.cohorts.class_distribution, cohort)
    run.section('per_class_auc', run.metrics.per_class_auc, cohort)

    def macro():
        ci = run.resample.bootstrap_ci(run.metrics.macro_auc_arrays, (cohort.score_matrix(), cohort.labels()))
        return {'macro_auc': run.metrics.macro_auc_ovr(cohort), 'ci': ci, 'text': format_ci(ci.point, ci.lo, ci.hi)}

    run.section('macro_auc', macro)
    predicted = [cohort.class_map.names[k] for k in cohort.score_matrix().argmax(axis=1)]
    truth = [cohort.class_map.names[k] for k in cohort.labels()]
    run.section('balanced_accuracy', run.metrics.balanced_accuracy, predicted, truth)

    if len(cohort.class_map.names) == 2 or cohort.class_map.positive_index is not None:
        scores, labels = cohort.positive_scores(), cohort.binary_labels()
        run.section('youden', run.metrics.youden_optimal, scores, labels)
        run.section('auprc', run.metrics.auprc, scores, labels)
        run.section('brier', run.metrics.brier, scores, labels)
        roc = run.section('roc_points', run.metrics.roc_points, scores, labels)
        if roc:
            run.report.write_csv('roc_points', roc)


def cmd_threshold_select(run: Run) -> None:
    policies = load_policies(run.args.policy)
    if not policies:
        raise ConfigError("--policy is required")
    cohort = run.load_cohort()
    scores, labels = cohort.positive_scores(), cohort.binary_labels()

    def select(policy: ThresholdPolicy) -> Dict[str, Any]:
        if isinstance(policy, RescueBurden):
            result = run.simulation.second_review_sweep(scores, labels, policy, cohort.task, cohort.name)
            rows, selected = [r.as_row() for r in result.rows], result.selected
        else:
            sweep = run.policy.sweep(scores, labels, RULEIN if isinstance(policy, RuleInPpv) else RULEOUT)
            selected = run.policy.select_threshold(sweep, policy, cohort.task, cohort.name)
            rows = [r.as_row() for r in sweep.rows]
        run.report.write_csv(f"sweep_{policy.band}_{policy.kind}", rows)
        if isinstance(selected, Infeasible):
            return {'status': 'infeasible', 'binding_constraint': selected.binding_constraint,
                    'reason': selected.reason, 'policy': policy}
        run.registry.lock(selected, relock=run.args.relock)
        return {'status': 'locked', 'locked': selected}

    for policy in policies:
        run.section(f"{policy.band}:{policy.kind}", select, policy)


def cmd_threshold_apply(run: Run) -> None:
    cohort = run.load_cohort()
    low, high = run.registry.find(cohort.task, RULEOUT), run.registry.find(cohort.task, RULEIN)
    if low is None and high is None:
        raise RegistryError(f"no locked threshold for task '{cohort.task}' in {run.registry.path}")
    run.sections['locked'] = {'ruleout': low, 'rulein': high}
    assignment = run.section('assignment', run.policy.apply_locked, cohort, low, high)
    if assignment:
        run.report.write_csv('assignment', [{'case_id': k, 'band': v} for k, v in assignment.items()])
        run.sections['assignment'] = {band: sum(v == band for v in assignment.values())
                                      for band in ('ruled_out', 'gray_zone', 'ruled_in')}
    run.section('triage', run.simulation.triage_cohort, cohort,
                low.value if low else None, high.value if high else None)


def cmd_second_review(run: Run) -> None:
    policies = [p for p in load_policies(run.args.policy) if isinstance(p, RescueBurden)]
    if run.args.counts:
        if not policies or run.args.total_fn is None or run.args.negatives is None:
            raise ConfigError("--counts needs --policy (rescue_burden), --total-fn and --negatives")
        rows = pd.read_csv(run.args.counts).to_dict('records')
        result = run.section('sweep', run.simulation.sweep_from_counts, rows, run.args.total_fn,
                             run.args.negatives, policies[0], run.task)
        if result:
            run.report.write_csv('second_review_sweep', [r.as_row() for r in result.rows])
        return

    cohort = run.load_cohort()
    scores, labels = cohort.positive_scores(), cohort.binary_labels()
    if policies:
        result = run.section('sweep', run.simulation.second_review_sweep, scores, labels, policies[0],
                             cohort.task, cohort.name)
        if result:
            run.report.write_csv('second_review_sweep', [r.as_row() for r in result.rows])
        return
    threshold = run.args.threshold
    if threshold is None:
        threshold = run.registry.get(cohort.task, SECOND_REVIEW).value
    run.section('second_review', run.simulation.second_review, scores, labels, threshold)


def cmd_triage(run: Run) -> None:
    cohort = run.load_cohort()
    t_low, t_high = _thresholds(run, cohort)
    by_center = run.section('by_center', run.simulation.triage_by_center, cohort, t_low, t_high)
    if by_center:
        run.report.write_csv('triage', [{'center': center, 'ruleout_coverage_text': as_percent(o.ruleout_coverage),
                                         **{k: v for k, v in asdict(o).items() if not k.endswith('_ci')}}
                                        for center, o in by_center.items()])


def _strategy_scores(run: Run, frame: pd.DataFrame, fits: Dict[Strategy, Any]) -> Dict[Strategy, np.ndarray]:
    """Supplied score columns, or in-sample logistic fits on the cov_* variables"""
    covariates = [c for c in frame.columns if c.startswith('cov_')]
    scores = {Strategy.MODEL_ONLY: frame['score_model'].to_numpy()}
    for strategy, column, extra in ((Strategy.CLINICAL, 'score_clinical', []),
                                    (Strategy.CLINICAL_PLUS_MODEL, 'score_clinical_plus_model', ['score_model'])):
        if column in frame.columns:
            scores[strategy] = frame[column].to_numpy()
        elif strategy in fits:
            scores[strategy] = fits[strategy].predict(frame)
        elif covariates:
            fit = run.inference.logistic_fit(frame['mutation'], frame[covariates + extra], standardize=True)
            fits[strategy] = fit
            scores[strategy] = fit.fitted
        else:
            logger.warning(f"No scores or cov_* columns for the {strategy.value} strategy; skipped")
    return scores


def cmd_prioritize(run: Run) -> None:
    rates = _rates(run.args.rates)
    internal = run.cohorts.load_priority_table(run.args.input)
    fits: Dict[Strategy, Any] = {}
    scores = _strategy_scores(run, internal, fits)
    truth = internal['mutation'].to_numpy()
    outcomes = run.section('internal', run.simulation.prioritize_internal, scores, truth,
                           internal['case_id'].tolist(), rates)
    if outcomes:
        run.report.write_csv('prioritization_internal', outcomes)
    if Strategy.CLINICAL in fits and Strategy.CLINICAL_PLUS_MODEL in fits:
        run.section('added_value', run.inference.lr_test, fits[Strategy.CLINICAL_PLUS_MODEL],
                    fits[Strategy.CLINICAL], truth)

    if run.args.external:
        external = run.cohorts.load_priority_table(run.args.external)
        external_scores = _strategy_scores(run, external, fits)
        table = []
        for strategy, internal_scores in scores.items():
            if strategy not in external_scores:
                continue
            rows = run.section(f"external:{strategy.value}", run.simulation.prioritize_transfer_table,
                               internal_scores, external_scores[strategy], external['mutation'].to_numpy(),
                               [r for r in rates if r < 1.0], strategy)
            table.extend(rows or [])
        run.report.write_csv('prioritization_external', table)


def cmd_deferral(run: Run) -> None:
    cohort = run.load_cohort()
    threshold = run.args.t_low
    if threshold is None:
        threshold = run.registry.get(cohort.task, RULEOUT)
    outcome = run.section('deferral', run.simulation.deferral_analysis, cohort, threshold, run.args.tag or 'Defer')
    if outcome:
        run.report.write_csv('deferral', [{'case_id': k, 'category': v} for k, v in outcome.case_assignment.items()])


def cmd_reader_study(run: Run) -> None:
    observations = run.cohorts.load_readers(run.args.input)
    tasks = sorted({o.task for o in observations})
    descriptives = run.section('descriptives', run.inference.reader_descriptives, observations)
    if descriptives:
        run.report.write_csv('reader_by_reader', descriptives['by_reader'])

    for outcome in OUTCOME_LINKS:
        run.section(f"gee:{outcome}:all", lambda o=outcome: gee_summary(run.inference.reader_gee(observations, o)))
        run.section(f"sequence:{outcome}:all",
                    lambda o=outcome: gee_summary(run.inference.sequence_effect(observations, o)))
    run.section('trajectory:all', run.inference.decision_trajectory, observations)

    for task in tasks:
        for outcome in OUTCOME_LINKS:
            run.section(f"gee:{outcome}:{task}",
                        lambda o=outcome, t=task: gee_summary(run.inference.reader_gee(observations, o, t)))
        run.section(f"sequence:accuracy:{task}",
                    lambda t=task: gee_summary(run.inference.sequence_effect(observations, 'accuracy', t)))
        run.section(f"trajectory:{task}", run.inference.decision_trajectory, observations, task)
        for condition in ('without_ai', 'with_ai'):
            run.section(f"fleiss:{task}:{condition}",
                        lambda t=task, c=condition: run.inference.fleiss_kappa(
                            run.inference.rating_matrix(observations, t, c).counts, with_ci=True))
        run.section(f"fleiss_delta:{task}", run.inference.kappa_difference, observations, task)


def cmd_survival(run: Run) -> None:
    records = run.cohorts.load_survival(run.args.input)
    covariates = ([c for c in run.args.covariates.split(',') if c] if run.args.covariates
                  else sorted({k for r in records for k in r.covariates}))
    bootstrap = not run.args.wald

    if any(r.fold is not None for r in records):
        def cross_validated():
            per_fold, ci = run.survival.cross_validated_cindex(records)
            return {'per_fold': per_fold, 'pooled': ci}
        run.section('cindex_cv', cross_validated)

    scored = [r for r in records if r.risk_score is not None]
    if not scored:
        logger.warning("No risk scores; risk-based analyses skipped")
        return
    risk = [r.risk_score for r in scored]
    run.section('cindex', lambda: {'cindex': run.survival.concordance_index(risk, scored),
                                   'ci': run.survival.cindex_ci(risk, scored)})

    split = run.section('risk_split', run.survival.risk_dichotomize, risk, run.args.cut)
    if split is None:
        return
    groups, cut = split
    run.sections['risk_split'] = {'cut': cut, 'rule': 'median' if run.args.cut is None else 'supplied',
                                  'n_high': int(groups.sum()), 'n_low': int(len(groups) - groups.sum())}
    high = [r for r, g in zip(scored, groups) if g == 1]
    low = [r for r, g in zip(scored, groups) if g == 0]
    curves = []
    for name, members in (('low', low), ('high', high)):
        km = run.section(f"km:{name}", run.survival.kaplan_meier, members)
        if km:
            curves.extend(km.to_rows(name))
    run.report.write_csv('km_curves', curves)
    run.section('logrank', run.survival.logrank_test, high, low)

    extra = {RISK_GROUP: groups.tolist()}
    run.section('cox_univariable', run.survival.cox_fit, scored, [], extra, bootstrap)
    if covariates:
        fit = run.section('cox_multivariable', run.survival.cox_fit, scored, covariates, extra, bootstrap)
        if fit:
            adjusted = run.section('adjusted_curves', run.survival.adjusted_curves, fit, RISK_GROUP)
            if adjusted:
                run.report.write_csv('adjusted_curves', [{'group': g, **row} for g, rows in adjusted.items()
                                                         for row in rows])


def cmd_compare(run: Run) -> None:
    """Long table with columns model, task, cohort, value"""
    frame = pd.read_csv(run.args.input)
    missing = {'model', 'task', 'cohort', 'value'} - set(frame.columns)
    if missing:
        raise ConfigError(f"compare table is missing column(s) {sorted(missing)}")
    wide = frame.pivot_table(index='model', columns=['task', 'cohort'], values='value', aggfunc='first')
    ranks = run.section('mean_rank', run.inference.model_mean_rank, wide, not run.args.lower_is_better)
    if not ranks:
        return
    reference = run.args.reference or min(ranks, key=lambda m: (ranks[m], m))
    run.sections['reference'] = reference
    for task in sorted(frame['task'].unique()):
        run.section(f"wilcoxon:{task}", run.inference.paired_model_comparison,
                    wide.xs(task, axis=1, level='task'), reference)


def cmd_concordance(run: Run) -> None:
    records = run.cohorts.load_paired(run.args.input)
    table = run.section('concordance', run.inference.paired_concordance, records)
    if table:
        run.report.write_csv('concordance', list(table.values()))


def cmd_subgroup(run: Run) -> None:
    cohort = run.load_cohort()
    tags = [run.args.tag] if run.args.tag else run.cohorts.subgroup_tags(cohort)
    if not tags:
        raise ConfigError(f"cohort '{cohort.name}' carries no subgroup tags")
    for tag in tags:
        subgroup = run.cohorts.subgroup_filter(cohort, tag)
        run.section(f"shift:{tag}", run.inference.subgroup_shift_report, cohort, subgroup)


COMMANDS = {
    'metrics': cmd_metrics,
    'threshold-select': cmd_threshold_select,
    'threshold-apply': cmd_threshold_apply,
    'second-review': cmd_second_review,
    'triage': cmd_triage,
    'prioritize': cmd_prioritize,
    'deferral': cmd_deferral,
    'reader-study': cmd_reader_study,
    'survival': cmd_survival,
    'compare': cmd_compare,
    'concordance': cmd_concordance,
    'subgroup': cmd_subgroup,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--input', help='input CSV')
    common.add_argument('--out', default='reports', help='output directory')
    common.add_argument('--seed', type=int, help=f'bootstrap seed (default {DEFAULT_SEED} or TRIAGEBENCH_SEED)')
    common.add_argument('--resamples', type=int, help=f'bootstrap resamples (default {DEFAULT_RESAMPLES})')
    common.add_argument('--jobs', type=int, default=1, help='bootstrap worker threads')
    common.add_argument('--registry', help=f'locked-threshold registry (default {DEFAULT_REGISTRY})')
    common.add_argument('--xlsx', action='store_true', help='also write an XLSX workbook of the extracts')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    cohort = argparse.ArgumentParser(add_help=False)
    cohort.add_argument('--schema', help='JSON class schema')
    cohort.add_argument('--task', help='task name (overrides the schema)')

    parser = argparse.ArgumentParser(prog='triagebench', description='Decision-threshold and clinical-workflow evaluation')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('metrics', parents=[common, cohort], help='macro-AUC with CI and Youden operating point')

    p = sub.add_parser('threshold-select', parents=[common, cohort], help='select and lock thresholds')
    p.add_argument('--policy', required=True, help='JSON policy file')
    p.add_argument('--relock', action='store_true', help='supersede an existing locked threshold')

    sub.add_parser('threshold-apply', parents=[common, cohort], help='apply locked thresholds unchanged')

    p = sub.add_parser('second-review', parents=[common, cohort], help='AI-assisted second review simulation')
    p.add_argument('--policy', help='rescue_burden policy file for a threshold sweep')
    p.add_argument('--threshold', type=float, help='review threshold (default: registry)')
    p.add_argument('--counts', help='per-threshold count table (threshold, rescued_fn, review_cases)')
    p.add_argument('--total-fn', type=int, help='doctor false negatives behind --counts')
    p.add_argument('--negatives', type=int, help='doctor-negative cases behind --counts')

    for name, help_text in (('triage', 'rule-out/rule-in triage per center'),
                            ('deferral', 'deferral rescue partition')):
        p = sub.add_parser(name, parents=[common, cohort], help=help_text)
        p.add_argument('--t-low', type=float, help='rule-out threshold (default: registry)')
        if name == 'triage':
            p.add_argument('--t-high', type=float, help='rule-in threshold (default: registry)')
        else:
            p.add_argument('--tag', default='Defer', help='deferral subgroup tag')

    p = sub.add_parser('prioritize', parents=[common], help='genomic-testing prioritization')
    p.add_argument('--external', help='external prioritization table for threshold transfer')
    p.add_argument('--rates', help='comma-separated testing rates')

    sub.add_parser('reader-study', parents=[common], help='reader-study agreement and GEE report')

    p = sub.add_parser('survival', parents=[common], help='C-index, KM, log-rank and Cox report')
    p.add_argument('--covariates', help='comma-separated covariates for the multivariable model')
    p.add_argument('--cut', type=float, help='risk cut (default: median)')
    p.add_argument('--wald', action='store_true', help='Wald intervals only (skip the HR bootstrap)')

    p = sub.add_parser('compare', parents=[common], help='model mean ranks and one-sided Wilcoxon')
    p.add_argument('--reference', help='reference model (default: best mean rank)')
    p.add_argument('--lower-is-better', action='store_true')

    sub.add_parser('concordance', parents=[common], help='paired pre/post biomarker agreement')

    p = sub.add_parser('subgroup', parents=[common, cohort], help='subgroup score-shift report')
    p.add_argument('--tag', help='subgroup tag (default: every tag present)')
    return parser


def configure_logging(verbose: bool = False) -> None:
    level = 'DEBUG' if verbose else os.environ.get('TRIAGEBENCH_LOG_LEVEL', 'INFO').upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    configure_logging(args.verbose)

    try:
        run = Run(args)
        COMMANDS[args.command](run)
    except (ConfigError, CohortValidationError, RegistryError, PolicyError, OSError, json.JSONDecodeError,
            pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    return run.finish()


if __name__ == '__main__':
    sys.exit(main())
