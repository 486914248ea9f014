"""Shared fixtures for the triagebench test suite"""

import numpy as np
import pytest

from cohort_module import (CaseRecord, ClassMap, Cohort, Condition, Experience, ReaderObservation,
                           TIMEOUT)
from resample_module import ResampleModule

BINARY = ClassMap(names=('negative', 'positive'), positive_index=1)


def make_cohort(scores, labels, tags=None, centers=None, name='cohort', task='frozen_section'):
    """Binary cohort from positive-class scores and 0/1 labels"""
    tags = tags or [()] * len(scores)
    centers = centers or [''] * len(scores)
    records = tuple(CaseRecord(case_id=f"c{i:03d}", true_label=int(y), scores=(1.0 - float(s), float(s)),
                               subgroup_tags=frozenset(t), center=c)
                    for i, (s, y, t, c) in enumerate(zip(scores, labels, tags, centers)))
    return Cohort(name=name, class_map=BINARY, records=records, task=task)


def write_text(path, text):
    path.write_text(text.strip() + '\n', encoding='utf-8')
    return path


def simulate_reads(n_readers=6, seed=3, tasks=('grading', 'subtyping'), n_cases=8):
    """Crossover reader study; readers in the upper half are senior"""
    rng = np.random.default_rng(seed)
    observations = []
    for r in range(n_readers):
        experience = Experience.SENIOR if r >= n_readers // 2 else Experience.JUNIOR
        with_ai_first = r % 2 == 0
        for task in tasks:
            for c in range(n_cases):
                reference = 'A' if c % 2 == 0 else 'B'
                for condition in (Condition.WITHOUT_AI, Condition.WITH_AI):
                    period = 1 if (condition == Condition.WITH_AI) == with_ai_first else 2
                    p_correct = 0.85 if condition == Condition.WITH_AI else 0.6
                    timed_out = rng.random() < 0.05
                    if timed_out:
                        response, correct, confidence = TIMEOUT, False, None
                    else:
                        correct = bool(rng.random() < p_correct)
                        response = reference if correct else ('B' if reference == 'A' else 'A')
                        confidence = int(rng.integers(4, 10))
                    time_s = float(rng.uniform(20, 60) * (0.8 if condition == Condition.WITH_AI else 1.0))
                    observations.append(ReaderObservation(
                        reader_id=f"R{r}", experience=experience, case_id=f"{task}-{c}", task=task,
                        condition=condition, period=period, with_ai_first=with_ai_first, response=response,
                        correct=correct, confidence=confidence, time_s=time_s, timed_out=timed_out,
                        reference=reference))
    return observations


def write_reads(path, observations):
    """Reader CSV in the load_readers layout"""
    rows = ["reader_id,experience,case_id,task,condition,period,with_ai_first,response,correct,"
            "confidence,time_s,timed_out,reference"]
    for o in observations:
        rows.append(','.join([o.reader_id, o.experience.value, o.case_id, o.task, o.condition.value, str(o.period),
                              str(o.with_ai_first).lower(), o.response, str(o.correct).lower(),
                              '' if o.confidence is None else str(o.confidence), f"{o.time_s:.3f}",
                              str(o.timed_out).lower(), o.reference or '']))
    return write_text(path, '\n'.join(rows))


@pytest.fixture
def resample():
    return ResampleModule(n_resamples=200, seed=7)


@pytest.fixture
def binary_cohort():
    rng = np.random.default_rng(11)
    labels = np.array([0] * 40 + [1] * 20)
    scores = np.clip(np.where(labels == 1, rng.normal(0.7, 0.15, 60), rng.normal(0.3, 0.15, 60)), 0.0, 1.0)
    centers = ['H4'] * 30 + ['H15'] * 30
    tags = [('Defer',) if i % 5 == 0 else () for i in range(60)]
    return make_cohort(scores.round(4), labels, tags=tags, centers=centers)


@pytest.fixture
def reader_observations():
    """Two tasks, six readers (three senior), eight cases per task, crossover sequence"""
    return simulate_reads()
