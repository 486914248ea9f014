"""
Inference Module - Hypothesis tests, agreement statistics and regression
KS shift tests, McNemar, Cohen/Fleiss kappa, Wilcoxon signed-rank, correlation
and binned trends, logistic regression with likelihood-ratio testing, and GEE
for reader-study data clustered by pathologist
"""

import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import cohen_kappa_score
from statsmodels.discrete.discrete_model import Logit
from statsmodels.genmod import families
from statsmodels.genmod.cov_struct import Exchangeable, Independence
from statsmodels.genmod.families import links
from statsmodels.genmod.generalized_estimating_equations import GEE
from statsmodels.stats.contingency_tables import mcnemar as sm_mcnemar
from statsmodels.stats.proportion import proportion_confint
from statsmodels.tools.sm_exceptions import PerfectSeparationError

from cohort_module import Cohort, Condition, Experience, PairedLabelRecord, ReaderObservation
from metrics_module import MetricsModule
from resample_module import BootstrapResult, ResampleError, ResampleModule, fleiss_or_none

logger = logging.getLogger(__name__)

EXACT_MCNEMAR_LIMIT = 25
EXACT_WILCOXON_LIMIT = 20
DEFAULT_BINS = 10
Z95 = stats.norm.ppf(0.975)

# upper bounds of each agreement band
KAPPA_BANDS = ((0.20, 'poor'), (0.40, 'fair'), (0.60, 'moderate'), (0.80, 'substantial'), (1.0, 'almost perfect'))

LINK_EFFECTS = {'logit': 'OR', 'log': 'TR', 'identity': 'Diff'}
OUTCOME_LINKS = {'accuracy': 'logit', 'time': 'log', 'confidence': 'identity'}


class InferenceError(ValueError):
    """Raised when a test or model is inestimable on the given data"""


def kappa_band(kappa: Optional[float]) -> Optional[str]:
    if kappa is None:
        return None
    for upper, name in KAPPA_BANDS:
        if kappa <= upper:
            return name
    return KAPPA_BANDS[-1][1]


@dataclass(frozen=True)
class KsResult:
    d: float
    p: float
    n1: int
    n2: int


@dataclass(frozen=True)
class KappaResult:
    kappa: Optional[float]
    interpretation: Optional[str]
    n: int
    ci: Optional[BootstrapResult] = None


@dataclass(frozen=True)
class ConcordanceRow:
    biomarker: str
    n: int
    pre_positive: int
    pre_negative: int
    post_positive: int
    post_negative: int
    pp: int
    pn: int
    np_: int
    nn: int
    concordance: float
    concordance_ci: Tuple[float, float]
    kappa: Optional[float]
    mcnemar_p: Optional[float]


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p: Optional[float]
    n: int


@dataclass(frozen=True)
class TrendBin:
    mean_score: float
    event_rate: float
    n: int


@dataclass(frozen=True)
class BinnedTrend:
    bins: List[TrendBin]
    pearson: CorrelationResult


@dataclass(frozen=True)
class Coefficient:
    estimate: float
    se: Optional[float]
    ci: Tuple[Optional[float], Optional[float]]
    p: Optional[float]
    effect: float
    effect_ci: Tuple[Optional[float], Optional[float]]


@dataclass(frozen=True)
class LogisticFit:
    coefficients: Dict[str, Coefficient]
    log_likelihood: float
    n_obs: int
    n_params: int
    converged: bool
    iterations: int
    dropped: Tuple[str, ...] = ()
    diagnostic: str = ''
    fitted: np.ndarray = field(default=None, repr=False, compare=False)
    scaling: Dict[str, Tuple[float, float]] = field(default_factory=dict, repr=False, compare=False)

    def predict(self, frame: pd.DataFrame) -> np.ndarray:
        """Predicted probabilities for new rows with the fit's columns and scaling"""
        eta = np.zeros(len(frame))
        for name, coef in self.coefficients.items():
            if name == 'Intercept':
                eta += coef.estimate
                continue
            values = frame[name].astype(float).to_numpy()
            if name in self.scaling:
                mean, sd = self.scaling[name]
                values = (values - mean) / sd
            eta += coef.estimate * values
        return 1.0 / (1.0 + np.exp(-eta))


@dataclass(frozen=True)
class LrTestResult:
    chi2: float
    df: int
    p: float
    delta_auroc: Optional[float]
    delta_auprc: Optional[float]
    delta_brier: Optional[float]


@dataclass(frozen=True)
class GeeFit:
    link: str
    coefficients: Dict[str, Coefficient]
    working_correlation: float
    n_clusters: int
    n_obs: int
    converged: bool
    iterations: int
    exposure: Optional[str] = None

    @property
    def effect_name(self) -> str:
        return LINK_EFFECTS[self.link]

    @property
    def exposure_effect(self) -> Optional[Coefficient]:
        return self.coefficients.get(self.exposure) if self.exposure else None


@dataclass(frozen=True)
class RatingMatrix:
    case_ids: List[str]
    categories: List[str]
    counts: np.ndarray


@dataclass(frozen=True)
class SubgroupShift:
    class_name: str
    ks: Optional[KsResult]
    subgroup_auc: Optional[BootstrapResult]
    baseline_auc: Optional[float]
    n_baseline: int
    n_subgroup: int


def _design(frame: pd.DataFrame, intercept: bool = True) -> Tuple[pd.DataFrame, List[str]]:
    """Float design matrix with constant columns dropped; rank deficiency raises"""
    frame = frame.astype(float)
    dropped = [c for c in frame.columns if frame[c].nunique() <= 1]
    if dropped:
        logger.warning(f"Dropping constant covariate(s) {dropped}")
        frame = frame.drop(columns=dropped)
    if intercept:
        frame.insert(0, 'Intercept', 1.0)
    if frame.shape[1] and np.linalg.matrix_rank(frame.to_numpy()) < frame.shape[1]:
        raise InferenceError(f"perfectly collinear covariates among {list(frame.columns)}")
    return frame, dropped


def _coefficients(params, bse, pvalues, transform) -> Dict[str, Coefficient]:
    result = {}
    for name in params.index:
        beta = float(params[name])
        se = float(bse[name]) if np.isfinite(bse[name]) else None
        p = float(pvalues[name]) if np.isfinite(pvalues[name]) else None
        ci = (beta - Z95 * se, beta + Z95 * se) if se is not None else (None, None)
        effect_ci = tuple(transform(v) if v is not None else None for v in ci)
        result[name] = Coefficient(estimate=beta, se=se, ci=ci, p=p, effect=transform(beta), effect_ci=effect_ci)
    return result


class InferenceModule:
    """Statistical tests and models used across the evaluation reports"""

    def __init__(self, resample_module: Optional[ResampleModule] = None,
                 metrics_module: Optional[MetricsModule] = None):
        self.resample = resample_module or ResampleModule()
        self.metrics = metrics_module or MetricsModule()

    # Distribution shift

    def ks_two_sample(self, a: Sequence[float], b: Sequence[float]) -> KsResult:
        """Two-sample KS; p from the asymptotic Kolmogorov distribution at sqrt(n1 n2 / (n1 + n2)) * D"""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.size == 0 or b.size == 0:
            raise InferenceError("KS test needs two non-empty samples")
        d = float(stats.ks_2samp(a, b, method='asymp').statistic)
        en = a.size * b.size / (a.size + b.size)
        p = float(stats.kstwobign.sf(math.sqrt(en) * d))
        return KsResult(d=d, p=min(1.0, max(p, np.finfo(float).tiny)), n1=int(a.size), n2=int(b.size))

    def subgroup_shift_report(self, baseline: Cohort, subgroup: Cohort) -> Dict[str, SubgroupShift]:
        """Per-class KS between baseline and subgroup score distributions, with AUCs"""
        if baseline.class_map.names != subgroup.class_map.names:
            raise InferenceError("subgroup and baseline cohorts use different class maps")
        names = baseline.class_map.names
        binary = len(names) == 2
        base_matrix, base_labels = baseline.score_matrix(), baseline.labels()
        sub_matrix, sub_labels = subgroup.score_matrix(), subgroup.labels()
        positive = baseline.class_map.resolve_positive() if binary else None

        report = {}
        for k, name in enumerate(names):
            column = positive if binary else k
            base_scores = base_matrix[base_labels == k, column]
            sub_scores = sub_matrix[sub_labels == k, column]
            ks = None
            if base_scores.size and sub_scores.size:
                ks = self.ks_two_sample(base_scores, sub_scores)
            else:
                logger.warning(f"Class '{name}' has no cases in '{subgroup.name}' or its baseline; KS skipped")
            target = positive if binary else k
            baseline_auc = self.metrics.binary_auc(base_matrix[:, target], (base_labels == target).astype(int))
            report[name] = SubgroupShift(class_name=name, ks=ks,
                                         subgroup_auc=self._auc_ci(sub_matrix[:, target], (sub_labels == target).astype(int),
                                                                   subgroup.name),
                                         baseline_auc=baseline_auc, n_baseline=int(base_scores.size),
                                         n_subgroup=int(sub_scores.size))
        return report

    def _auc_ci(self, scores: np.ndarray, labels: np.ndarray, name: str) -> Optional[BootstrapResult]:
        if scores.size == 0 or labels.min() == labels.max():
            logger.warning(f"AUC undefined in '{name}' (single class)")
            return None
        try:
            return self.resample.bootstrap_ci(self.metrics.binary_auc, (scores, labels))
        except ResampleError as e:
            logger.warning(f"No AUC interval for '{name}': {e}")
            return None

    # Paired agreement

    def mcnemar(self, b: int, c: int, mode: Optional[str] = None) -> float:
        """
        McNemar test on discordant counts

        Args:
            mode: 'exact' (doubled binomial tail) or 'chi2' (continuity corrected);
                  default exact below 25 discordant pairs
        """
        if b < 0 or c < 0:
            raise InferenceError("discordant counts must be non-negative")
        if b + c == 0:
            raise InferenceError("McNemar test needs at least one discordant pair")
        if mode is None:
            mode = 'exact' if b + c < EXACT_MCNEMAR_LIMIT else 'chi2'
        if mode not in ('exact', 'chi2'):
            raise InferenceError(f"unknown McNemar mode '{mode}'")
        result = sm_mcnemar([[0, b], [c, 0]], exact=mode == 'exact', correction=True)
        return float(min(1.0, result.pvalue))

    def cohen_kappa(self, pairs: Sequence[Tuple]) -> KappaResult:
        """Cohen's kappa over (rater_a, rater_b) label pairs"""
        if not pairs:
            raise InferenceError("no paired labels")
        first, second = zip(*pairs)
        categories = set(first) | set(second)
        kappa = None
        if len(categories) > 1:
            with warnings.catch_warnings():
                warnings.simplefilter('ignore')
                value = float(cohen_kappa_score([str(v) for v in first], [str(v) for v in second]))
            kappa = value if np.isfinite(value) else None
        if kappa is None:
            logger.warning("Cohen's kappa undefined: chance agreement is 1")
        return KappaResult(kappa=kappa, interpretation=kappa_band(kappa), n=len(pairs))

    def paired_concordance(self, records: Sequence[PairedLabelRecord]) -> Dict[str, ConcordanceRow]:
        """Per-biomarker pre/post agreement table"""
        grouped = defaultdict(list)
        for r in records:
            grouped[r.biomarker].append(r)
        if not grouped:
            raise InferenceError("no paired records")
        table = {}
        for biomarker in sorted(grouped):
            rows = grouped[biomarker]
            pp = sum(r.pre_label == 1 and r.post_label == 1 for r in rows)
            pn = sum(r.pre_label == 1 and r.post_label == 0 for r in rows)
            np_ = sum(r.pre_label == 0 and r.post_label == 1 for r in rows)
            nn = sum(r.pre_label == 0 and r.post_label == 0 for r in rows)
            n = len(rows)
            lo, hi = proportion_confint(pp + nn, n, alpha=0.05, method='wilson')
            table[biomarker] = ConcordanceRow(
                biomarker=biomarker, n=n, pre_positive=pp + pn, pre_negative=np_ + nn,
                post_positive=pp + np_, post_negative=pn + nn, pp=pp, pn=pn, np_=np_, nn=nn,
                concordance=(pp + nn) / n, concordance_ci=(float(lo), float(hi)),
                kappa=self.cohen_kappa([(r.pre_label, r.post_label) for r in rows]).kappa,
                mcnemar_p=self.mcnemar(pn, np_) if pn + np_ else None)
        return table

    def fleiss_kappa(self, counts: np.ndarray, with_ci: bool = False) -> KappaResult:
        """Fleiss' kappa on a case x category count matrix with a constant rater count"""
        counts = np.asarray(counts, dtype=float)
        if counts.ndim != 2 or counts.shape[0] == 0:
            raise InferenceError("rating matrix must be a non-empty case x category matrix")
        totals = counts.sum(axis=1)
        if not np.allclose(totals, totals[0]) or totals[0] < 2:
            raise InferenceError("every case needs the same number (>= 2) of ratings")
        kappa = fleiss_or_none(counts)
        if kappa is None:
            logger.warning("Fleiss' kappa undefined: a single category was used")
        ci = None
        if with_ci and kappa is not None:
            try:
                ci = self.resample.bootstrap_ci(fleiss_or_none, (counts,))
            except ResampleError as e:
                logger.warning(f"No Fleiss' kappa interval: {e}")
        return KappaResult(kappa=kappa, interpretation=kappa_band(kappa), n=int(counts.shape[0]), ci=ci)

    def rating_matrix(self, observations: Sequence[ReaderObservation], task: str, condition: Condition,
                      categories: Optional[Sequence[str]] = None,
                      case_ids: Optional[Sequence[str]] = None) -> RatingMatrix:
        """Count of reader responses per case and category; TIMEOUT is a category of its own"""
        reads = [o for o in observations if o.task == task and o.condition == Condition(condition)]
        if not reads:
            raise InferenceError(f"no reads for task '{task}' under {Condition(condition).value}")
        if categories is None:
            categories = sorted({o.response for o in observations if o.task == task})
        categories = list(categories)
        if case_ids is None:
            case_ids = sorted({o.case_id for o in reads})
        case_ids = list(case_ids)
        row = {c: i for i, c in enumerate(case_ids)}
        col = {c: j for j, c in enumerate(categories)}
        counts = np.zeros((len(case_ids), len(categories)))
        for o in reads:
            if o.case_id in row:
                if o.response not in col:
                    raise InferenceError(f"response '{o.response}' not among categories {categories}")
                counts[row[o.case_id], col[o.response]] += 1
        return RatingMatrix(case_ids=case_ids, categories=categories, counts=counts)

    def kappa_difference(self, observations: Sequence[ReaderObservation], task: str):
        """Fleiss' kappa with versus without AI on the cases read under both conditions"""
        without = {o.case_id for o in observations if o.task == task and o.condition == Condition.WITHOUT_AI}
        with_ai = {o.case_id for o in observations if o.task == task and o.condition == Condition.WITH_AI}
        shared = sorted(without & with_ai)
        if not shared:
            raise InferenceError(f"no case of task '{task}' was read under both conditions")
        a = self.rating_matrix(observations, task, Condition.WITHOUT_AI, case_ids=shared)
        b = self.rating_matrix(observations, task, Condition.WITH_AI, categories=a.categories, case_ids=shared)
        return self.resample.bootstrap_kappa_difference(a.counts, b.counts)

    # Rank tests and correlation

    def wilcoxon_signed_rank_one_sided(self, x: Sequence[float]) -> float:
        """
        P(W+ >= observed) for paired differences, testing a positive shift

        Zeros are dropped; ties share average ranks. Up to 20 non-zero differences the null
        distribution is enumerated exactly; beyond that the tie-corrected normal approximation is used.
        """
        x = np.asarray(x, dtype=float)
        x = x[x != 0]
        if x.size == 0:
            raise InferenceError("all differences are zero")
        ranks = stats.rankdata(np.abs(x))
        n = x.size
        w_plus = float(ranks[x > 0].sum())
        if n <= EXACT_WILCOXON_LIMIT:
            # doubled average ranks are integers, so the null is a subset-sum distribution
            doubled = np.rint(2 * ranks).astype(int)
            total = int(doubled.sum())
            dist = np.zeros(total + 1)
            dist[0] = 1.0
            for r in doubled:
                shifted = dist[:-r].copy()
                dist[r:] += shifted
            dist /= 2.0 ** n
            observed = int(round(2 * w_plus))
            return float(min(1.0, dist[observed:].sum()))
        _, tie_counts = np.unique(np.abs(x), return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
        return float(stats.norm.sf((w_plus - mean) / math.sqrt(var)))

    def _paired(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != y.shape:
            raise InferenceError(f"length mismatch: {x.size} vs {y.size}")
        if x.size < 3:
            raise InferenceError("correlation needs at least 3 pairs")
        if np.unique(x).size < 2 or np.unique(y).size < 2:
            raise InferenceError("correlation undefined for constant input")
        return x, y

    def spearman(self, x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
        x, y = self._paired(x, y)
        rho, p = stats.spearmanr(x, y)
        return CorrelationResult(r=float(rho), p=float(p), n=int(x.size))

    def pearson(self, x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
        x, y = self._paired(x, y)
        r, p = stats.pearsonr(x, y)
        return CorrelationResult(r=float(r), p=float(p), n=int(x.size))

    def binned_trend(self, scores: Sequence[float], truth: Sequence[int], n_bins: int = DEFAULT_BINS) -> BinnedTrend:
        """Equal-count score bins with the observed event rate, plus Pearson R across bins"""
        if n_bins < 2:
            raise InferenceError("binned trend needs at least 2 bins")
        frame = pd.DataFrame({'score': np.asarray(scores, dtype=float), 'event': np.asarray(truth, dtype=float)})
        if len(frame) < n_bins:
            raise InferenceError(f"{len(frame)} cases cannot fill {n_bins} bins")
        frame['bin'] = pd.qcut(frame['score'], n_bins, labels=False, duplicates='drop')
        grouped = frame.groupby('bin').agg(mean_score=('score', 'mean'), event_rate=('event', 'mean'), n=('score', 'size'))
        empty = grouped[grouped['n'] == 0]
        if len(empty):
            logger.warning(f"Dropping {len(empty)} empty bin(s)")
            grouped = grouped[grouped['n'] > 0]
        if len(grouped) < 2:
            raise InferenceError("scores collapse into a single bin")
        if len(grouped) < n_bins:
            logger.warning(f"Tied scores merged bins: {len(grouped)} of {n_bins} remain")
        bins = [TrendBin(mean_score=float(row.mean_score), event_rate=float(row.event_rate), n=int(row.n))
                for row in grouped.itertuples()]
        if len(grouped) >= 3:
            pearson = self.pearson(grouped['mean_score'], grouped['event_rate'])
        else:
            r = float(np.corrcoef(grouped['mean_score'], grouped['event_rate'])[0, 1])
            pearson = CorrelationResult(r=r, p=None, n=len(grouped))
        return BinnedTrend(bins=bins, pearson=pearson)

    def model_mean_rank(self, table: pd.DataFrame, higher_is_better: bool = True) -> Dict[str, float]:
        """
        Mean within-cohort rank per model

        Args:
            table: rows = models, columns = cohorts, values = metric (missing cells ignored)
        """
        if table.shape[0] < 2:
            raise InferenceError("ranking needs at least two models")
        ranks = table.rank(axis=0, ascending=not higher_is_better, method='average')
        return {str(model): float(value) for model, value in ranks.mean(axis=1).items()}

    def paired_model_comparison(self, table: pd.DataFrame, reference: str) -> Dict[str, Optional[float]]:
        """One-sided Wilcoxon of reference minus each other model over shared cohorts"""
        if reference not in table.index:
            raise InferenceError(f"unknown reference model '{reference}'")
        result = {}
        for model in table.index:
            if model == reference:
                continue
            diff = (table.loc[reference] - table.loc[model]).dropna()
            try:
                result[str(model)] = self.wilcoxon_signed_rank_one_sided(diff.to_numpy())
            except InferenceError as e:
                logger.warning(f"Wilcoxon {reference} vs {model} skipped: {e}")
                result[str(model)] = None
        return result

    # Logistic regression

    def logistic_fit(self, y: Sequence[int], X: pd.DataFrame, standardize: bool = False,
                     maxiter: int = 100) -> LogisticFit:
        """Maximum-likelihood logistic regression by Newton iterations, intercept included"""
        y = np.asarray(y, dtype=float)
        X = pd.DataFrame(X).reset_index(drop=True).astype(float)
        if len(X) != y.size:
            raise InferenceError(f"length mismatch: {y.size} outcomes vs {len(X)} rows")
        if not np.isin(y, (0, 1)).all():
            raise InferenceError("logistic outcome must be binary (0/1)")
        if y.min() == y.max():
            raise InferenceError("logistic outcome has a single class")

        scaling = {}
        if standardize:
            for c in X.columns:
                if X[c].nunique() > 2:
                    mean, sd = float(X[c].mean()), float(X[c].std(ddof=1))
                    if sd > 0:
                        X[c] = (X[c] - mean) / sd
                        scaling[c] = (mean, sd)
        design, dropped = _design(X)

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            try:
                result = Logit(y, design).fit(method='newton', maxiter=maxiter, disp=False)
            except PerfectSeparationError as e:
                raise InferenceError(f"logistic fit diverged (separation): {e}") from None
            except np.linalg.LinAlgError as e:
                raise InferenceError(f"logistic fit failed: {e}") from None
        converged = bool(result.mle_retvals.get('converged', False))
        separation = [str(w.message) for w in caught if 'separation' in str(w.message).lower()]
        diagnostic = ''
        if separation or not converged:
            diagnostic = (f"not converged after {result.mle_retvals.get('iterations', maxiter)} iterations"
                          + (f"; {separation[0]}" if separation else ''))
            logger.warning(f"Logistic fit: {diagnostic}")
            converged = converged and not separation

        return LogisticFit(coefficients=_coefficients(result.params, result.bse, result.pvalues, math.exp),
                           log_likelihood=float(result.llf), n_obs=int(y.size), n_params=int(design.shape[1]),
                           converged=converged, iterations=int(result.mle_retvals.get('iterations', 0)),
                           dropped=tuple(dropped), diagnostic=diagnostic,
                           fitted=np.asarray(result.predict(design)), scaling=scaling)

    def lr_test(self, full: LogisticFit, reduced: LogisticFit, y: Sequence[int]) -> LrTestResult:
        """Likelihood-ratio test of nested logistic models with discrimination deltas"""
        if full.n_obs != reduced.n_obs:
            raise InferenceError("models were fit on different samples")
        if not set(reduced.coefficients) <= set(full.coefficients):
            raise InferenceError("reduced model is not nested in the full model")
        df = full.n_params - reduced.n_params
        chi2 = max(0.0, 2.0 * (full.log_likelihood - reduced.log_likelihood))
        p = float(stats.chi2.sf(chi2, df)) if df > 0 else 1.0
        y = np.asarray(y, dtype=int)

        def delta(metric):
            a, b = metric(full.fitted, y), metric(reduced.fitted, y)
            return a - b if a is not None and b is not None else None

        return LrTestResult(chi2=chi2, df=df, p=p, delta_auroc=delta(self.metrics.binary_auc),
                            delta_auprc=delta(self.metrics.auprc), delta_brier=delta(self.metrics.brier))

    # GEE

    def gee_fit(self, y: Sequence[float], X: pd.DataFrame, clusters: Sequence, link: str = 'logit',
                exchangeable: bool = True, exposure: Optional[str] = None, maxiter: int = 100) -> GeeFit:
        """
        Marginal model with robust sandwich standard errors

        Args:
            link: 'logit' (binomial), 'log' (constant variance, log mean) or 'identity' (gaussian)
            exchangeable: exchangeable working correlation; independence when False or
                          when every cluster holds a single observation
        """
        if link not in LINK_EFFECTS:
            raise InferenceError(f"unknown link '{link}'")
        y = np.asarray(y, dtype=float)
        X = pd.DataFrame(X).reset_index(drop=True)
        clusters = np.asarray(clusters)
        if not len(X) == y.size == clusters.size:
            raise InferenceError("outcome, covariates and clusters differ in length")
        n_clusters = np.unique(clusters).size
        if n_clusters < 2:
            raise InferenceError("GEE needs at least two clusters")
        design, _ = _design(X)
        if exposure is not None and exposure not in design.columns:
            raise InferenceError(f"exposure '{exposure}' is constant or missing; effect is inestimable")

        family = {'logit': lambda: families.Binomial(),
                  'log': lambda: families.Gaussian(link=links.Log()),
                  'identity': lambda: families.Gaussian()}[link]()
        singleton = pd.Series(clusters).value_counts().max() == 1
        cov_struct = Exchangeable() if exchangeable and not singleton else Independence()

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            model = GEE(y, design, groups=clusters, family=family, cov_struct=cov_struct)
            try:
                result = model.fit(maxiter=maxiter, ctol=1e-8)
            except (np.linalg.LinAlgError, ValueError) as e:
                raise InferenceError(f"GEE fit failed: {e}") from None
        stalled = [w for w in caught if 'iteration' in str(w.message).lower() or 'converge' in str(w.message).lower()]
        if stalled:
            logger.warning(f"GEE did not converge in {maxiter} iterations; reporting last iterate")

        transform = math.exp if link in ('logit', 'log') else (lambda v: v)
        alpha = float(np.atleast_1d(model.cov_struct.dep_params)[0]) if isinstance(cov_struct, Exchangeable) else 0.0
        history = getattr(model, 'fit_history', None) or {}
        return GeeFit(link=link, coefficients=_coefficients(result.params, result.bse, result.pvalues, transform),
                      working_correlation=alpha, n_clusters=int(n_clusters), n_obs=int(y.size),
                      converged=not stalled, iterations=max(0, len(history.get('params', [])) - 1),
                      exposure=exposure)

    def _reader_frame(self, observations: Sequence[ReaderObservation], outcome: str,
                      task: Optional[str]) -> pd.DataFrame:
        if outcome not in OUTCOME_LINKS:
            raise InferenceError(f"unknown reader outcome '{outcome}'")
        reads = [o for o in observations if task is None or o.task == task]
        if outcome == 'confidence':
            # a reader-case pair that timed out in either condition is dropped from both
            timed_out = {(o.reader_id, o.case_id, o.task) for o in reads if o.timed_out}
            reads = [o for o in reads if (o.reader_id, o.case_id, o.task) not in timed_out]
        if not reads:
            raise InferenceError(f"no reads for {outcome}" + (f" in task '{task}'" if task else ''))
        frame = pd.DataFrame({
            'reader_id': [o.reader_id for o in reads],
            'task': [o.task for o in reads],
            'y': [float(o.correct) if outcome == 'accuracy' else
                  o.time_s if outcome == 'time' else float(o.confidence) for o in reads],
            'with_ai': [float(o.condition == Condition.WITH_AI) for o in reads],
            'period2': [float(o.period == 2) for o in reads],
            'senior': [float(o.experience == Experience.SENIOR) for o in reads],
            'with_ai_first': [float(o.with_ai_first) for o in reads],
        })
        return frame

    def _task_dummies(self, frame: pd.DataFrame, task: Optional[str]) -> pd.DataFrame:
        if task is not None or frame['task'].nunique() < 2:
            return pd.DataFrame(index=frame.index)
        return pd.get_dummies(frame['task'], prefix='task', drop_first=True, dtype=float)

    def reader_gee(self, observations: Sequence[ReaderObservation], outcome: str = 'accuracy',
                   task: Optional[str] = None) -> GeeFit:
        """
        Condition effect on accuracy (OR), reading time (TR) or confidence (Diff)

        Adjusted for period, reader experience and, when tasks are pooled, task.
        Timed-out reads count as incorrect and keep their time.
        """
        frame = self._reader_frame(observations, outcome, task)
        X = pd.concat([frame[['with_ai', 'period2', 'senior']], self._task_dummies(frame, task)], axis=1)
        return self.gee_fit(frame['y'], X, frame['reader_id'], link=OUTCOME_LINKS[outcome], exposure='with_ai')

    def sequence_effect(self, observations: Sequence[ReaderObservation], outcome: str = 'accuracy',
                        task: Optional[str] = None) -> GeeFit:
        """Effect of reading with AI first, adjusted for condition, experience and task"""
        frame = self._reader_frame(observations, outcome, task)
        if frame['with_ai_first'].nunique() < 2:
            raise InferenceError("all readers followed one sequence; sequence effect is inestimable")
        X = pd.concat([frame[['with_ai_first', 'with_ai', 'senior']], self._task_dummies(frame, task)], axis=1)
        return self.gee_fit(frame['y'], X, frame['reader_id'], link=OUTCOME_LINKS[outcome], exposure='with_ai_first')

    # Reader descriptives

    def decision_trajectory(self, observations: Sequence[ReaderObservation],
                            task: Optional[str] = None) -> Dict[str, object]:
        """Transitions of each reader-case decision from unassisted to assisted reading"""
        pairs = defaultdict(dict)
        for o in observations:
            if task is None or o.task == task:
                pairs[(o.reader_id, o.case_id, o.task)][o.condition] = o
        complete = [p for p in pairs.values() if len(p) == 2]
        if len(complete) < len(pairs):
            logger.warning(f"{len(pairs) - len(complete)} reader-case pair(s) lack one condition and were skipped")
        if not complete:
            raise InferenceError("no reader-case pair was read under both conditions")

        counts = {'correct->correct': 0, 'correct->error': 0, 'error->correct': 0, 'error->error': 0}
        subtypes = defaultdict(lambda: {'initial': 0, 'corrected': 0})
        for pair in complete:
            before, after = pair[Condition.WITHOUT_AI], pair[Condition.WITH_AI]
            key = f"{'correct' if before.correct else 'error'}->{'correct' if after.correct else 'error'}"
            counts[key] += 1
            if not before.correct:
                subtype = f"{before.reference or '?'}->{before.response}"
                subtypes[subtype]['initial'] += 1
                subtypes[subtype]['corrected'] += int(after.correct)
        n = len(complete)
        return {'n_pairs': n, 'counts': counts,
                'fractions': {k: v / n for k, v in counts.items()},
                'initial_error_burden': (counts['error->correct'] + counts['error->error']) / n,
                'corrected': counts['error->correct'] / n,
                'introduced': counts['correct->error'] / n,
                'error_subtypes': {k: dict(v) for k, v in sorted(subtypes.items())}}

    def _accuracy(self, reads: List[ReaderObservation]) -> Optional[float]:
        if not reads:
            return None
        if all(o.reference is not None for o in reads):
            return self.metrics.balanced_accuracy([o.response for o in reads], [o.reference for o in reads])
        return float(np.mean([o.correct for o in reads]))

    def reader_descriptives(self, observations: Sequence[ReaderObservation]) -> Dict[str, List[Dict]]:
        """Per task and sequence summaries by condition, plus per reader and condition rows"""
        if not observations:
            raise InferenceError("no reader observations")
        if any(o.reference is None for o in observations):
            logger.warning("Reader file has no reference labels; reporting plain accuracy instead of balanced accuracy")

        def summary(reads: List[ReaderObservation]) -> Dict[str, Optional[float]]:
            completed = [o.confidence for o in reads if o.confidence is not None]
            return {'accuracy': self._accuracy(reads),
                    'mean_time_s': float(np.mean([o.time_s for o in reads])) if reads else None,
                    'mean_confidence': float(np.mean(completed)) if completed else None,
                    'n': len(reads)}

        by_task = []
        for task in sorted({o.task for o in observations}):
            for sequence, keep in (('All', None), ('Yes', True), ('No', False)):
                reads = [o for o in observations if o.task == task and (keep is None or o.with_ai_first == keep)]
                if not reads:
                    continue
                without = summary([o for o in reads if o.condition == Condition.WITHOUT_AI])
                with_ai = summary([o for o in reads if o.condition == Condition.WITH_AI])
                row = {'task': task, 'with_ai_first': sequence, 'without_ai': without, 'with_ai': with_ai}
                row['delta_accuracy'] = (with_ai['accuracy'] - without['accuracy']
                                         if with_ai['accuracy'] is not None and without['accuracy'] is not None else None)
                row['time_ratio'] = (with_ai['mean_time_s'] / without['mean_time_s']
                                     if with_ai['mean_time_s'] and without['mean_time_s'] else None)
                row['delta_confidence'] = (with_ai['mean_confidence'] - without['mean_confidence']
                                           if with_ai['mean_confidence'] is not None
                                           and without['mean_confidence'] is not None else None)
                by_task.append(row)

        by_reader = []
        for reader in sorted({o.reader_id for o in observations}):
            for condition in Condition:
                reads = [o for o in observations if o.reader_id == reader and o.condition == condition]
                if reads:
                    by_reader.append({'reader_id': reader, 'experience': reads[0].experience.value,
                                      'condition': condition.value, **summary(reads)})
        return {'by_task': by_task, 'by_reader': by_reader}

