"""
Survival Module - Time-to-event analysis
Kaplan-Meier curves, log-rank tests, Cox regression with Breslow ties,
concordance index and covariate-adjusted survival curves
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from lifelines.utils import concordance_index as lifelines_cindex
from scipy import stats
from statsmodels.duration.hazard_regression import PHReg
from statsmodels.duration.survfunc import SurvfuncRight, survdiff

from cohort_module import SurvivalRecord
from resample_module import BootstrapResult, ResampleError, ResampleModule

logger = logging.getLogger(__name__)

TIES = 'breslow'
RISK_GROUP = 'risk_group'
# log hazard ratio per covariate SD beyond this signals a monotone likelihood
DIVERGENCE_EFFECT = 15.0
Z95 = stats.norm.ppf(0.975)


class SurvivalError(ValueError):
    """Raised for inestimable survival analyses"""


@dataclass(frozen=True)
class KmCurve:
    event_times: List[float]
    survival: List[float]
    at_risk: List[int]
    events: List[int]
    n: int

    def to_rows(self, group: Optional[str] = None) -> List[Dict]:
        """Tidy step rows starting at time 0 for plot-data CSV"""
        rows = [{'time': 0.0, 'survival': 1.0, 'at_risk': self.n, 'events': 0}]
        rows += [{'time': t, 'survival': s, 'at_risk': r, 'events': e}
                 for t, s, r, e in zip(self.event_times, self.survival, self.at_risk, self.events)]
        if group is not None:
            for row in rows:
                row['group'] = group
        return rows


@dataclass(frozen=True)
class HazardRatio:
    beta: float
    se: Optional[float]
    hr: float
    ci: Tuple[Optional[float], Optional[float]]
    p: Optional[float]
    bootstrap_ci: Optional[Tuple[float, float]] = None
    bootstrap_p: Optional[float] = None


@dataclass(frozen=True)
class CoxFit:
    coefficients: Dict[str, HazardRatio]
    log_partial_likelihood: float
    n: int
    n_events: int
    converged: bool
    ties_method: str = TIES
    baseline_times: List[float] = field(default_factory=list)
    baseline_cumhaz: List[float] = field(default_factory=list)
    design: pd.DataFrame = field(default=None, repr=False, compare=False)

    def baseline_at(self, times: Sequence[float]) -> np.ndarray:
        """Breslow cumulative baseline hazard (covariates at zero) as a right-continuous step function"""
        idx = np.searchsorted(np.asarray(self.baseline_times), np.asarray(times, dtype=float), side='right') - 1
        cumhaz = np.concatenate([[0.0], np.asarray(self.baseline_cumhaz, dtype=float)])
        return cumhaz[idx + 1]


@dataclass(frozen=True)
class LogrankResult:
    chi2: float
    p: float
    n_a: int
    n_b: int


def _arrays(records: Sequence[SurvivalRecord]) -> Tuple[np.ndarray, np.ndarray]:
    if not records:
        raise SurvivalError("no survival records")
    return (np.array([r.time for r in records], dtype=float),
            np.array([r.event for r in records], dtype=int))


def covariate_frame(records: Sequence[SurvivalRecord], covariates: Sequence[str],
                    extra: Optional[Mapping[str, Sequence]] = None) -> pd.DataFrame:
    """Numeric covariate columns; text covariates become indicator columns"""
    frame = pd.DataFrame({name: [r.covariates.get(name) for r in records] for name in covariates})
    for name, values in (extra or {}).items():
        if len(values) != len(records):
            raise SurvivalError(f"column '{name}' does not align with the records")
        frame[name] = list(values)
    missing = [c for c in frame.columns if frame[c].isna().any()]
    if missing:
        raise SurvivalError(f"covariate(s) {missing} missing for some records")
    text = [c for c in frame.columns if frame[c].map(lambda v: isinstance(v, str)).any()]
    if text:
        frame = pd.get_dummies(frame, columns=text, drop_first=True, dtype=float)
    return frame.astype(float)


class SurvivalModule:
    """Survival estimation and risk-score evaluation"""

    def __init__(self, resample_module: Optional[ResampleModule] = None):
        self.resample = resample_module or ResampleModule()

    def kaplan_meier(self, records: Sequence[SurvivalRecord]) -> KmCurve:
        """Product-limit estimate; censorings at an event time count as at risk for that event"""
        time, event = _arrays(records)
        if event.sum() == 0:
            return KmCurve(event_times=[], survival=[], at_risk=[], events=[], n=int(time.size))
        sf = SurvfuncRight(time, event)
        return KmCurve(event_times=[float(t) for t in sf.surv_times],
                       survival=[float(s) for s in sf.surv_prob],
                       at_risk=[int(r) for r in sf.n_risk], events=[int(e) for e in sf.n_events],
                       n=int(time.size))

    def logrank_test(self, group_a: Sequence[SurvivalRecord], group_b: Sequence[SurvivalRecord]) -> LogrankResult:
        if not group_a or not group_b:
            raise SurvivalError("log-rank test needs two non-empty groups")
        time_a, event_a = _arrays(group_a)
        time_b, event_b = _arrays(group_b)
        if event_a.sum() + event_b.sum() == 0:
            raise SurvivalError("log-rank test needs at least one event")
        chi2, p = survdiff(np.concatenate([time_a, time_b]), np.concatenate([event_a, event_b]),
                           np.concatenate([np.zeros(time_a.size), np.ones(time_b.size)]))
        chi2 = max(0.0, float(chi2))
        return LogrankResult(chi2=chi2, p=float(stats.chi2.sf(chi2, 1)), n_a=len(group_a), n_b=len(group_b))

    def _phreg(self, time: np.ndarray, event: np.ndarray, design: pd.DataFrame):
        if event.sum() == 0:
            raise SurvivalError("Cox model needs at least one event")
        constant = [c for c in design.columns if design[c].nunique() <= 1]
        if constant:
            raise SurvivalError(f"constant covariate(s) {constant}")
        model = PHReg(time, design, status=event, ties=TIES)
        try:
            return model, model.fit(disp=False)
        except np.linalg.LinAlgError as e:
            raise SurvivalError(f"Cox fit failed: {e}") from None

    def cox_fit(self, records: Sequence[SurvivalRecord], covariates: Sequence[str],
                extra: Optional[Mapping[str, Sequence]] = None, bootstrap: bool = True,
                n_resamples: Optional[int] = None) -> CoxFit:
        """
        Cox proportional hazards with Breslow ties

        Args:
            covariates: names from the records' covariate maps
            extra: additional per-record columns, e.g. a risk group indicator
            bootstrap: attach percentile HR intervals and zero-crossing p from case resampling
        """
        time, event = _arrays(records)
        design = covariate_frame(records, covariates, extra)
        if design.shape[1] == 0:
            raise SurvivalError("no covariates given")
        _, result = self._phreg(time, event, design)

        params = np.asarray(result.params, dtype=float)
        bse = np.asarray(result.bse, dtype=float)
        pvalues = np.asarray(result.pvalues, dtype=float)
        converged = bool((getattr(result, 'mle_retvals', None) or {}).get('converged', True))
        per_sd = np.abs(params) * design.std(ddof=0).to_numpy()
        if not converged or not np.all(np.isfinite(per_sd)) or np.any(per_sd > DIVERGENCE_EFFECT):
            logger.warning(f"Cox fit diverging (monotone likelihood?): beta={params.round(3).tolist()}")
            converged = False

        boot = {}
        if bootstrap:
            boot = self._bootstrap_hr(time, event, design, n_resamples)

        coefficients = {}
        for j, name in enumerate(design.columns):
            se = float(bse[j]) if np.isfinite(bse[j]) else None
            ci = (float(np.exp(params[j] - Z95 * se)), float(np.exp(params[j] + Z95 * se))) \
                if se is not None else (None, None)
            b_ci, b_p = boot.get(name, (None, None))
            coefficients[name] = HazardRatio(beta=float(params[j]), se=se, hr=float(np.exp(params[j])), ci=ci,
                                             p=float(pvalues[j]) if np.isfinite(pvalues[j]) else None,
                                             bootstrap_ci=b_ci, bootstrap_p=b_p)

        base_time, base_cumhaz, _ = result.baseline_cumulative_hazard[0]
        return CoxFit(coefficients=coefficients, log_partial_likelihood=float(result.llf), n=int(time.size),
                      n_events=int(event.sum()), converged=converged,
                      baseline_times=[float(t) for t in base_time], baseline_cumhaz=[float(h) for h in base_cumhaz],
                      design=design)

    def _bootstrap_hr(self, time, event, design, n_resamples) -> Dict[str, Tuple[Tuple[float, float], float]]:
        """One Cox fit per resample; every coefficient's interval comes from the same replicate set"""
        columns = list(design.columns)

        def betas(t, e, x):
            frame = pd.DataFrame(np.asarray(x), columns=columns)
            _, fit = self._phreg(np.asarray(t), np.asarray(e), frame)
            return np.asarray(fit.params, dtype=float)

        try:
            vectors = self.resample.replicate_vectors(betas, (time, event, design.to_numpy()), n_resamples)
        except ResampleError as e:
            logger.warning(f"No bootstrap HR intervals: {e}")
            return {}
        out = {}
        for j, name in enumerate(columns):
            values = [None if v is None else float(v[j]) for v in vectors]
            try:
                ci = self.resample.percentile_ci(None, values)
                out[name] = ((float(np.exp(ci.lo)), float(np.exp(ci.hi))), self.resample.zero_crossing_p(values))
            except ResampleError as e:
                logger.warning(f"No bootstrap interval for HR of '{name}': {e}")
        return out

    def concordance_index(self, risk_scores: Sequence[float], records: Sequence[SurvivalRecord]) -> float:
        """Harrell's C: higher risk should fail earlier; tied risks count one half"""
        time, event = _arrays(records)
        risk = np.asarray(risk_scores, dtype=float)
        if risk.size != time.size:
            raise SurvivalError(f"{risk.size} risk scores for {time.size} records")
        try:
            return float(lifelines_cindex(time, -risk, event))
        except ZeroDivisionError:
            raise SurvivalError("no comparable pairs") from None

    def cindex_ci(self, risk_scores: Sequence[float], records: Sequence[SurvivalRecord]) -> BootstrapResult:
        time, event = _arrays(records)

        def stat(r, t, e):
            try:
                return float(lifelines_cindex(np.asarray(t), -np.asarray(r), np.asarray(e)))
            except ZeroDivisionError:
                return None

        return self.resample.bootstrap_ci(stat, (np.asarray(risk_scores, dtype=float), time, event))

    def cross_validated_cindex(self, records: Sequence[SurvivalRecord],
                               n_per_fold: Optional[int] = None) -> Tuple[Dict[int, float], BootstrapResult]:
        """Per-fold C-index and a pooled interval from resampling within each fold"""
        folds = sorted({r.fold for r in records if r.fold is not None})
        if not folds:
            raise SurvivalError("records carry no fold assignment")
        if any(r.risk_score is None for r in records):
            raise SurvivalError("every record needs a risk score")
        per_fold, data = {}, []
        for k in folds:
            members = [r for r in records if r.fold == k]
            per_fold[k] = self.concordance_index([r.risk_score for r in members], members)
            data.append((np.array([r.risk_score for r in members]),) + _arrays(members))

        def stat(r, t, e):
            try:
                return float(lifelines_cindex(np.asarray(t), -np.asarray(r), np.asarray(e)))
            except ZeroDivisionError:
                return None

        return per_fold, self.resample.bootstrap_folds(stat, data, n_per_fold)

    def average_fold_scores(self, fold_scores: np.ndarray) -> np.ndarray:
        """External risk score: mean of the fold models' scores (cases x folds)"""
        fold_scores = np.asarray(fold_scores, dtype=float)
        if fold_scores.ndim != 2 or fold_scores.shape[1] == 0:
            raise SurvivalError("fold scores must be a cases x folds matrix")
        return fold_scores.mean(axis=1)

    def risk_dichotomize(self, risk_scores: Sequence[float], cut: Optional[float] = None) -> Tuple[np.ndarray, float]:
        """High risk (1) when score > cut; default cut is the median, so ties go low"""
        risk = np.asarray(risk_scores, dtype=float)
        if risk.size < 2:
            raise SurvivalError("risk split needs at least 2 cases")
        cut = float(np.median(risk)) if cut is None else float(cut)
        return (risk > cut).astype(int), cut

    def adjusted_curves(self, fit: CoxFit, group_covariate: str,
                        times: Optional[Sequence[float]] = None) -> Dict[str, List[Dict]]:
        """
        Direct-adjusted survival per group level

        S_g(t) averages exp(-H0(t) exp(x_i b)) over the fitted cohort with the group column set to g.
        """
        if group_covariate not in fit.coefficients:
            raise SurvivalError(f"model has no covariate '{group_covariate}'")
        design = fit.design
        beta = np.array([fit.coefficients[c].beta for c in design.columns])
        times = np.asarray(fit.baseline_times if times is None else times, dtype=float)
        cumhaz = fit.baseline_at(times)
        curves = {}
        for level in sorted(design[group_covariate].unique()):
            forced = design.copy()
            forced[group_covariate] = level
            hazard_ratio = np.exp(forced.to_numpy() @ beta)
            survival = np.exp(-np.outer(cumhaz, hazard_ratio)).mean(axis=1)
            key = str(int(level)) if float(level).is_integer() else str(level)
            curves[key] = [{'time': float(t), 'survival': float(s)} for t, s in zip(times, survival)]
        return curves
