"""
Cohort Module - Data model, CSV ingestion and validation
Loads case-level score files, paired biomarker labels, survival records and
reader-study exports, and selects challenging subgroups by tag
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

TIMEOUT = "TIMEOUT"
SCORE_SUM_TOLERANCE = 1e-6


class CohortValidationError(ValueError):
    """Raised when an input file violates a type invariant"""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class Stage(str, Enum):
    PRE = "pre"
    INTRA = "intra"
    POST = "post"


class CohortRole(str, Enum):
    TRAIN = "train"
    VAL = "val"
    INTERNAL_TEST = "internal_test"
    RETROSPECTIVE_EXTERNAL = "retrospective_external"
    PROSPECTIVE = "prospective"


class Experience(str, Enum):
    JUNIOR = "junior"
    SENIOR = "senior"


class Condition(str, Enum):
    WITHOUT_AI = "without_ai"
    WITH_AI = "with_ai"


@dataclass(frozen=True)
class ClassMap:
    """Ordered class labels, with an optional positive/event class"""
    names: Tuple[str, ...]
    positive_index: Optional[int] = None

    def __post_init__(self):
        if not self.names:
            raise CohortValidationError("class map has no classes")
        if len(set(self.names)) != len(self.names):
            raise CohortValidationError(f"duplicate class names in {list(self.names)}")
        if self.positive_index is not None and not 0 <= self.positive_index < len(self.names):
            raise CohortValidationError(f"positive_index {self.positive_index} out of range")

    def index_of(self, label: str) -> int:
        try:
            return self.names.index(label)
        except ValueError:
            raise CohortValidationError(f"unknown class label '{label}'") from None

    def resolve_positive(self) -> int:
        """Positive class index; binary maps without one default to the second class"""
        if self.positive_index is not None:
            return self.positive_index
        if len(self.names) == 2:
            return 1
        raise CohortValidationError("positive class required for a binary analysis of a multi-class task")

    @classmethod
    def from_schema(cls, schema: Mapping) -> 'ClassMap':
        names = tuple(str(n) for n in schema.get('classes', []))
        positive = schema.get('positive')
        positive_index = names.index(positive) if positive is not None and positive in names else None
        if positive is not None and positive_index is None:
            raise CohortValidationError(f"positive class '{positive}' not among classes {list(names)}")
        return cls(names=names, positive_index=positive_index)


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    true_label: int
    scores: Tuple[float, ...]
    subgroup_tags: FrozenSet[str] = frozenset()
    center: str = ""
    stage: Optional[Stage] = None


@dataclass(frozen=True)
class Cohort:
    name: str
    class_map: ClassMap
    records: Tuple[CaseRecord, ...]
    role: CohortRole = CohortRole.INTERNAL_TEST
    task: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.true_label for r in self.records], dtype=int)

    def score_matrix(self) -> np.ndarray:
        return np.array([r.scores for r in self.records], dtype=float).reshape(len(self.records), len(self.class_map.names))

    def positive_scores(self) -> np.ndarray:
        return self.score_matrix()[:, self.class_map.resolve_positive()]

    def binary_labels(self) -> np.ndarray:
        return (self.labels() == self.class_map.resolve_positive()).astype(int)

    def case_ids(self) -> List[str]:
        return [r.case_id for r in self.records]

    def centers(self) -> List[str]:
        return sorted({r.center for r in self.records})


@dataclass(frozen=True)
class PairedLabelRecord:
    case_id: str
    biomarker: str
    pre_label: int   # 1 = positive, 0 = negative
    post_label: int


@dataclass(frozen=True)
class SurvivalRecord:
    case_id: str
    time: float
    event: int
    covariates: Mapping[str, Union[float, str]] = field(default_factory=dict)
    risk_score: Optional[float] = None
    fold: Optional[int] = None


@dataclass(frozen=True)
class ReaderObservation:
    reader_id: str
    experience: Experience
    case_id: str
    task: str
    condition: Condition
    period: int
    with_ai_first: bool
    response: str
    correct: bool
    confidence: Optional[int]
    time_s: float
    timed_out: bool
    reference: Optional[str] = None


_TRUE = {'1', 'true', 'yes', 'y', 't'}
_FALSE = {'0', 'false', 'no', 'n', 'f'}


def _parse_bool(value: str, column: str, row: int) -> bool:
    text = value.strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise CohortValidationError(f"column '{column}' expects a boolean, got '{value}'", row)


def _parse_float(value: str, column: str, row: int) -> float:
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise CohortValidationError(f"column '{column}' expects a number, got '{value}'", row) from None
    if math.isnan(number):
        raise CohortValidationError(f"column '{column}' is missing", row)
    return number


def _read_table(path: Union[str, Path], required: List[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise CohortValidationError(f"file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise CohortValidationError(f"{path.name}: no records") from None
    except pd.errors.ParserError as e:
        raise CohortValidationError(f"{path.name}: malformed CSV ({e})") from None
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise CohortValidationError(f"{path.name}: missing column(s) {missing}")
    if frame.empty:
        raise CohortValidationError(f"{path.name}: no records")
    if 'case_id' in frame.columns:
        # uniqueness is judged on the ids as stored
        frame['case_id'] = frame['case_id'].str.strip()
    return frame


def _check_unique(ids: List[str]) -> None:
    seen = {}
    for row, case_id in enumerate(ids, start=2):
        if case_id in seen:
            raise CohortValidationError(f"duplicate case_id '{case_id}' (first seen on row {seen[case_id]})", row)
        seen[case_id] = row


class CohortModule:
    """Loads, validates, writes and filters evaluation cohorts"""

    def load_schema(self, path: Union[str, Path]) -> Tuple[ClassMap, str, bool]:
        """Read a JSON schema file into (class map, task name, normalized flag)"""
        with open(path, 'r', encoding='utf-8') as f:
            schema = json.load(f)
        return ClassMap.from_schema(schema), str(schema.get('task', '')), bool(schema.get('normalized', True))

    def load_cohort(self, path: Union[str, Path], class_map: ClassMap, name: Optional[str] = None,
                    role: CohortRole = CohortRole.INTERNAL_TEST, task: str = "",
                    normalized: bool = True) -> Cohort:
        """
        Load a cohort CSV

        Args:
            path: CSV with case_id, label, and either score_<class> columns or one `score` column
            class_map: declared classes; labels are matched by name
            normalized: require per-class score vectors to sum to 1
        """
        frame = _read_table(path, ['case_id', 'label'])
        n_classes = len(class_map.names)
        score_columns = [f"score_{c}" for c in class_map.names]
        has_vector = all(c in frame.columns for c in score_columns)
        if not has_vector:
            if n_classes != 2 or 'score' not in frame.columns:
                raise CohortValidationError(f"{Path(path).name}: missing column(s) "
                                            f"{[c for c in score_columns if c not in frame.columns]}")
            positive = class_map.resolve_positive()

        _check_unique(frame['case_id'].tolist())

        records = []
        for row, item in enumerate(frame.to_dict('records'), start=2):
            case_id = item['case_id'].strip()
            if not case_id:
                raise CohortValidationError("empty case_id", row)
            try:
                label = class_map.index_of(item['label'].strip())
            except CohortValidationError as e:
                raise CohortValidationError(str(e), row) from None

            if has_vector:
                scores = [_parse_float(item[c], c, row) for c in score_columns]
            else:
                p = _parse_float(item['score'], 'score', row)
                scores = [0.0, 0.0]
                scores[positive] = p
                scores[1 - positive] = 1.0 - p
            for column, value in zip(score_columns, scores):
                if not 0.0 <= value <= 1.0:
                    raise CohortValidationError(f"score {column}={value} outside [0, 1]", row)
            if has_vector and normalized and abs(sum(scores) - 1.0) > SCORE_SUM_TOLERANCE:
                raise CohortValidationError(f"scores sum to {sum(scores):.8f}, expected 1", row)

            tags = frozenset(t.strip() for t in item.get('tags', '').split(';') if t.strip())
            stage_text = item.get('stage', '').strip().lower()
            try:
                stage = Stage(stage_text) if stage_text else None
            except ValueError:
                raise CohortValidationError(f"unknown stage '{stage_text}'", row) from None

            records.append(CaseRecord(case_id=case_id, true_label=label, scores=tuple(scores),
                                      subgroup_tags=tags, center=item.get('center', '').strip(), stage=stage))

        cohort = Cohort(name=name or Path(path).stem, class_map=class_map, records=tuple(records),
                        role=role, task=task)
        logger.info(f"Loaded cohort '{cohort.name}' with {len(records)} records from {path}")
        return cohort

    def write_cohort(self, cohort: Cohort, path: Union[str, Path]) -> Path:
        """Write a cohort in the full score-vector layout"""
        rows = []
        for r in cohort.records:
            row = {'case_id': r.case_id, 'label': cohort.class_map.names[r.true_label]}
            for name, value in zip(cohort.class_map.names, r.scores):
                row[f"score_{name}"] = repr(float(value))
            row['tags'] = ';'.join(sorted(r.subgroup_tags))
            row['center'] = r.center
            row['stage'] = r.stage.value if r.stage else ''
            rows.append(row)
        path = Path(path)
        pd.DataFrame(rows).to_csv(path, index=False)
        return path

    def class_distribution(self, cohort: Cohort) -> Dict[str, int]:
        """Count of records per class, in class-map order"""
        counts = {name: 0 for name in cohort.class_map.names}
        for r in cohort.records:
            counts[cohort.class_map.names[r.true_label]] += 1
        return counts

    def subgroup_filter(self, cohort: Cohort, tag: str) -> Cohort:
        """Records carrying `tag`; an empty result is logged, not raised"""
        if not tag or not tag.strip():
            raise CohortValidationError("subgroup tag must be non-empty")
        kept = tuple(r for r in cohort.records if tag in r.subgroup_tags)
        if not kept:
            logger.warning(f"Subgroup '{tag}' is empty in cohort '{cohort.name}'")
        return replace(cohort, name=f"{cohort.name}[{tag}]", records=kept)

    def subgroup_tags(self, cohort: Cohort) -> List[str]:
        return sorted({t for r in cohort.records for t in r.subgroup_tags})

    def split_by_center(self, cohort: Cohort) -> Dict[str, Cohort]:
        """One sub-cohort per center value"""
        return {center: replace(cohort, name=f"{cohort.name}[{center}]",
                                records=tuple(r for r in cohort.records if r.center == center))
                for center in cohort.centers()}

    def load_paired(self, path: Union[str, Path]) -> List[PairedLabelRecord]:
        """Load paired pre/post biomarker labels; only evaluable pairs are admitted"""
        frame = _read_table(path, ['case_id', 'biomarker', 'pre_label', 'post_label'])
        values = {'positive': 1, 'pos': 1, '1': 1, 'negative': 0, 'neg': 0, '0': 0}
        records = []
        seen = set()
        for row, item in enumerate(frame.to_dict('records'), start=2):
            labels = []
            for column in ('pre_label', 'post_label'):
                text = item[column].strip().lower()
                if text not in values:
                    raise CohortValidationError(f"column '{column}' expects positive/negative, got '{item[column]}'", row)
                labels.append(values[text])
            key = (item['case_id'].strip(), item['biomarker'].strip())
            if key in seen:
                raise CohortValidationError(f"duplicate pair {key}", row)
            seen.add(key)
            records.append(PairedLabelRecord(case_id=key[0], biomarker=key[1],
                                             pre_label=labels[0], post_label=labels[1]))
        logger.info(f"Loaded {len(records)} paired biomarker records from {path}")
        return records

    def load_survival(self, path: Union[str, Path]) -> List[SurvivalRecord]:
        """Load survival records; cov_* columns become covariates"""
        frame = _read_table(path, ['case_id', 'time_months', 'event'])
        _check_unique(frame['case_id'].tolist())
        cov_columns = [c for c in frame.columns if c.startswith('cov_')]
        fold_columns = sorted((c for c in frame.columns if c.startswith('risk_fold_')),
                              key=lambda c: int(c.rsplit('_', 1)[-1]))
        records = []
        for row, item in enumerate(frame.to_dict('records'), start=2):
            time = _parse_float(item['time_months'], 'time_months', row)
            if time <= 0:
                raise CohortValidationError(f"time_months must be positive, got {time}", row)
            event_text = item['event'].strip()
            if event_text not in ('0', '1'):
                raise CohortValidationError(f"event must be 0 or 1, got '{event_text}'", row)

            covariates = {}
            for column in cov_columns:
                text = item[column].strip()
                try:
                    covariates[column[4:]] = float(text)
                except ValueError:
                    covariates[column[4:]] = text

            risk_text = item.get('risk_score', '').strip()
            risk = _parse_float(risk_text, 'risk_score', row) if risk_text else None
            if risk is None and fold_columns:
                fold_scores = [_parse_float(item[c], c, row) for c in fold_columns if item[c].strip()]
                risk = float(np.mean(fold_scores)) if fold_scores else None

            fold_text = item.get('fold', '').strip()
            records.append(SurvivalRecord(case_id=item['case_id'].strip(), time=time, event=int(event_text),
                                          covariates=covariates, risk_score=risk,
                                          fold=int(fold_text) if fold_text else None))
        logger.info(f"Loaded {len(records)} survival records from {path}")
        return records

    def load_priority_table(self, path: Union[str, Path]) -> pd.DataFrame:
        """
        Load a genomic-testing prioritization table

        Columns: case_id, mutation (0/1), score_model, optional score_clinical and
        score_clinical_plus_model, optional cov_* clinical variables (numeric)
        """
        frame = _read_table(path, ['case_id', 'mutation', 'score_model'])
        _check_unique(frame['case_id'].tolist())
        out = pd.DataFrame({'case_id': frame['case_id'].str.strip()})
        for row, text in enumerate(frame['mutation'], start=2):
            if text.strip() not in ('0', '1'):
                raise CohortValidationError(f"mutation must be 0 or 1, got '{text}'", row)
        out['mutation'] = frame['mutation'].str.strip().astype(int)
        for column in [c for c in frame.columns if c.startswith('score_') or c.startswith('cov_')]:
            values = [_parse_float(v, column, row) for row, v in enumerate(frame[column], start=2)]
            if column.startswith('score_') and not all(0.0 <= v <= 1.0 for v in values):
                raise CohortValidationError(f"{column} outside [0, 1]")
            out[column] = values
        logger.info(f"Loaded prioritization table with {len(out)} cases from {path}")
        return out

    def load_readers(self, path: Union[str, Path]) -> List[ReaderObservation]:
        """Load reader-study reads; timeout rows must carry the TIMEOUT response"""
        required = ['reader_id', 'experience', 'case_id', 'task', 'condition', 'period',
                    'with_ai_first', 'response', 'correct', 'confidence', 'time_s', 'timed_out']
        frame = _read_table(path, required)
        observations = []
        seen = set()
        for row, item in enumerate(frame.to_dict('records'), start=2):
            try:
                experience = Experience(item['experience'].strip().lower())
                condition = Condition(item['condition'].strip().lower())
            except ValueError as e:
                raise CohortValidationError(str(e), row) from None
            period = int(_parse_float(item['period'], 'period', row))
            if period not in (1, 2):
                raise CohortValidationError(f"period must be 1 or 2, got {period}", row)
            timed_out = _parse_bool(item['timed_out'], 'timed_out', row)
            correct = _parse_bool(item['correct'], 'correct', row)
            response = item['response'].strip()
            confidence_text = item['confidence'].strip()
            time_s = _parse_float(item['time_s'], 'time_s', row)
            if time_s <= 0:
                raise CohortValidationError(f"time_s must be positive, got {time_s}", row)

            if timed_out:
                if correct or response != TIMEOUT or confidence_text:
                    raise CohortValidationError("timed-out read must be incorrect, respond TIMEOUT and carry no confidence", row)
                confidence = None
            else:
                if not confidence_text:
                    raise CohortValidationError("completed read is missing confidence", row)
                confidence = int(_parse_float(confidence_text, 'confidence', row))
                if not 1 <= confidence <= 10:
                    raise CohortValidationError(f"confidence must be 1-10, got {confidence}", row)

            key = (item['reader_id'].strip(), item['case_id'].strip(), item['task'].strip(), condition)
            if key in seen:
                raise CohortValidationError(f"duplicate read {key}", row)
            seen.add(key)
            reference = item.get('reference', '').strip() or None
            observations.append(ReaderObservation(
                reader_id=key[0], experience=experience, case_id=key[1], task=key[2],
                condition=condition, period=period,
                with_ai_first=_parse_bool(item['with_ai_first'], 'with_ai_first', row),
                response=response, correct=correct, confidence=confidence, time_s=time_s,
                timed_out=timed_out, reference=reference))
        logger.info(f"Loaded {len(observations)} reader observations from {path}")
        return observations
