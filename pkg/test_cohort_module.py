import json
import logging

import pytest

from cohort_module import (ClassMap, CohortModule, CohortValidationError, Condition, Experience, Stage,
                           TIMEOUT)
from conftest import BINARY, write_text

THREE_CLASS = ClassMap(names=('benign', 'borderline', 'malignant'), positive_index=2)

READER_HEADER = "reader_id,experience,case_id,task,condition,period,with_ai_first,response,correct,confidence,time_s,timed_out"


@pytest.fixture
def cohorts():
    return CohortModule()


def test_binary_score_column_implies_complement(cohorts, tmp_path):
    path = write_text(tmp_path / 'binary.csv', """
case_id,label,score,tags,center,stage
a,positive,0.8,Defer;NAC,H4,intra
b,negative,0.25,,H15,
""")
    cohort = cohorts.load_cohort(path, BINARY, task='frozen_section')
    assert len(cohort) == 2
    assert cohort.records[0].scores == pytest.approx((0.2, 0.8))
    assert cohort.records[0].subgroup_tags == frozenset({'Defer', 'NAC'})
    assert cohort.records[0].stage is Stage.INTRA
    assert cohort.records[1].stage is None
    assert cohort.positive_scores().tolist() == pytest.approx([0.8, 0.25])
    assert cohort.binary_labels().tolist() == [1, 0]
    assert cohort.centers() == ['H15', 'H4']


def test_score_vector_must_sum_to_one(cohorts, tmp_path):
    path = write_text(tmp_path / 'multi.csv', """
case_id,label,score_benign,score_borderline,score_malignant
a,benign,0.7,0.2,0.1
b,malignant,0.5,0.3,0.3
""")
    with pytest.raises(CohortValidationError) as err:
        cohorts.load_cohort(path, THREE_CLASS)
    assert err.value.row == 3

    cohort = cohorts.load_cohort(path, THREE_CLASS, normalized=False)
    assert cohort.score_matrix().shape == (2, 3)


@pytest.mark.parametrize('body, row', [
    ("a,positive,0.4\nb,unknown,0.2", 3),
    ("a,positive,0.4\na,negative,0.2", 3),
    ("a,positive,1.4", 2),
    ("a,positive,", 2),
])
def test_invalid_rows_name_the_row(cohorts, tmp_path, body, row):
    path = write_text(tmp_path / 'bad.csv', "case_id,label,score\n" + body)
    with pytest.raises(CohortValidationError) as err:
        cohorts.load_cohort(path, BINARY)
    assert err.value.row == row


def test_missing_columns_and_files(cohorts, tmp_path):
    with pytest.raises(CohortValidationError, match='not found'):
        cohorts.load_cohort(tmp_path / 'absent.csv', BINARY)
    path = write_text(tmp_path / 'noscore.csv', "case_id,label\na,positive")
    with pytest.raises(CohortValidationError, match='missing column'):
        cohorts.load_cohort(path, BINARY)


def test_write_then_load_preserves_records(cohorts, tmp_path):
    path = write_text(tmp_path / 'multi.csv', """
case_id,label,score_benign,score_borderline,score_malignant,tags,center
a,benign,0.7,0.2,0.1,NeedIHC,H12
b,malignant,0.125,0.375,0.5,,H16
""")
    cohort = cohorts.load_cohort(path, THREE_CLASS)
    copy_path = cohorts.write_cohort(cohort, tmp_path / 'copy.csv')
    again = cohorts.load_cohort(copy_path, THREE_CLASS)
    assert again.records == cohort.records


def test_schema_file(cohorts, tmp_path):
    path = tmp_path / 'schema.json'
    path.write_text(json.dumps({'task': 'margin', 'classes': ['negative', 'positive'],
                                'positive': 'positive', 'normalized': False}))
    class_map, task, normalized = cohorts.load_schema(path)
    assert class_map == BINARY
    assert task == 'margin'
    assert normalized is False


def test_positive_class_must_be_declared():
    with pytest.raises(CohortValidationError):
        ClassMap.from_schema({'classes': ['a', 'b'], 'positive': 'c'})
    with pytest.raises(CohortValidationError):
        ClassMap(names=('a', 'b', 'c')).resolve_positive()


def test_subgroup_filter(cohorts, binary_cohort, caplog):
    deferred = cohorts.subgroup_filter(binary_cohort, 'Defer')
    assert len(deferred) == 12
    assert all('Defer' in r.subgroup_tags for r in deferred.records)
    assert cohorts.subgroup_tags(binary_cohort) == ['Defer']

    with caplog.at_level(logging.WARNING):
        empty = cohorts.subgroup_filter(binary_cohort, 'Deformation')
    assert len(empty) == 0
    assert 'Deformation' in caplog.text

    with pytest.raises(CohortValidationError):
        cohorts.subgroup_filter(binary_cohort, '  ')


def test_split_by_center(cohorts, binary_cohort):
    parts = cohorts.split_by_center(binary_cohort)
    assert sorted(parts) == ['H15', 'H4']
    assert sum(len(c) for c in parts.values()) == len(binary_cohort)
    assert cohorts.class_distribution(binary_cohort) == {'negative': 40, 'positive': 20}


def test_load_paired(cohorts, tmp_path):
    path = write_text(tmp_path / 'paired.csv', """
case_id,biomarker,pre_label,post_label
p1,ER,positive,positive
p1,PR,negative,Positive
p2,ER,neg,0
""")
    records = cohorts.load_paired(path)
    assert [(r.biomarker, r.pre_label, r.post_label) for r in records] == [('ER', 1, 1), ('PR', 0, 1), ('ER', 0, 0)]

    bad = write_text(tmp_path / 'bad.csv', "case_id,biomarker,pre_label,post_label\np1,ER,equivocal,positive")
    with pytest.raises(CohortValidationError) as err:
        cohorts.load_paired(bad)
    assert err.value.row == 2


def test_load_survival_averages_fold_scores(cohorts, tmp_path):
    path = write_text(tmp_path / 'surv.csv', """
case_id,time_months,event,risk_score,fold,risk_fold_1,risk_fold_2,cov_stage,cov_grade
s1,12.5,1,0.9,1,,,2,G3
s2,30,0,,,0.2,0.4,1,G1
""")
    records = cohorts.load_survival(path)
    assert records[0].risk_score == 0.9
    assert records[0].fold == 1
    assert records[1].risk_score == pytest.approx(0.3)
    assert records[1].fold is None
    assert records[0].covariates == {'stage': 2.0, 'grade': 'G3'}

    bad = write_text(tmp_path / 'bad.csv', "case_id,time_months,event\ns1,0,1")
    with pytest.raises(CohortValidationError, match='positive'):
        cohorts.load_survival(bad)


def test_load_priority_table(cohorts, tmp_path):
    path = write_text(tmp_path / 'prio.csv', """
case_id,mutation,score_model,cov_age
m1,1,0.8,61
m2,0,0.1,47
""")
    frame = cohorts.load_priority_table(path)
    assert frame['mutation'].tolist() == [1, 0]
    assert frame['cov_age'].tolist() == [61.0, 47.0]

    bad = write_text(tmp_path / 'bad.csv', "case_id,mutation,score_model\nm1,2,0.5")
    with pytest.raises(CohortValidationError):
        cohorts.load_priority_table(bad)


def test_load_readers(cohorts, tmp_path):
    path = write_text(tmp_path / 'readers.csv', READER_HEADER + ",reference\n" + "\n".join([
        "R1,senior,c1,grading,without_ai,1,false,A,true,7,41.5,false,A",
        f"R1,senior,c1,grading,with_ai,2,false,{TIMEOUT},false,,120,true,A",
    ]))
    observations = cohorts.load_readers(path)
    assert observations[0].experience is Experience.SENIOR
    assert observations[0].confidence == 7
    assert observations[1].condition is Condition.WITH_AI
    assert observations[1].confidence is None
    assert observations[1].reference == 'A'


@pytest.mark.parametrize('row', [
    f"R1,junior,c1,grading,with_ai,1,true,{TIMEOUT},false,5,120,true",
    "R1,junior,c1,grading,with_ai,1,true,A,true,,30,false",
    "R1,junior,c1,grading,with_ai,3,true,A,true,5,30,false",
    "R1,junior,c1,grading,with_ai,1,true,A,true,11,30,false",
])
def test_reader_rows_are_validated(cohorts, tmp_path, row):
    path = write_text(tmp_path / 'readers.csv', READER_HEADER + "\n" + row)
    with pytest.raises(CohortValidationError) as err:
        cohorts.load_readers(path)
    assert err.value.row == 2


@pytest.mark.parametrize('header, rows, load', [
    ("case_id,label,score", ["a,positive,0.9", " a,negative,0.1"],
     lambda m, p: m.load_cohort(p, BINARY)),
    ("case_id,time_months,event", ["s1,10,1", "s1 ,12,0"], lambda m, p: m.load_survival(p)),
    ("case_id,mutation,score_model", ["m1,1,0.8", "  m1,0,0.2"], lambda m, p: m.load_priority_table(p)),
])
def test_duplicate_ids_after_whitespace_trim(cohorts, tmp_path, header, rows, load):
    path = tmp_path / 'dupes.csv'
    path.write_text('\n'.join([header] + rows) + '\n', encoding='utf-8')
    with pytest.raises(CohortValidationError, match='duplicate case_id') as err:
        load(cohorts, path)
    assert err.value.row == 3


def test_empty_and_malformed_files(cohorts, tmp_path):
    empty = tmp_path / 'empty.csv'
    empty.write_bytes(b'')
    with pytest.raises(CohortValidationError, match='no records'):
        cohorts.load_cohort(empty, BINARY)

    header_only = write_text(tmp_path / 'header.csv', "case_id,label,score")
    with pytest.raises(CohortValidationError, match='no records'):
        cohorts.load_cohort(header_only, BINARY)

    ragged = write_text(tmp_path / 'ragged.csv', "case_id,label,score\na,positive,0.9\nb,negative,0.1,extra,field")
    with pytest.raises(CohortValidationError, match='malformed'):
        cohorts.load_cohort(ragged, BINARY)
