"""
评估测试 - 混淆矩阵、标量指标、ROC/PR、一对其余与 k 折交叉验证
"""
import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from models.genomics import Dataset
from services.eval_service import EvalService
from utils.errors import DataError, ParameterError, UndefinedMetricError
from utils.metrics import (
    ConfusionCounts,
    ScoredSet,
    confusion,
    multiclass_accuracy,
    one_vs_rest,
    pr_auprc,
    roc_auc,
    scalar_metrics
)
from utils.rng import derive_rng

HAND_SCORES = [0.9, 0.8, 0.3, 0.7, 0.1, 0.2, 0.3, 0.4, 0.05, 0.0]
HAND_LABELS = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]


def _mann_whitney(scores, labels):
    scores, labels = np.asarray(scores), np.asarray(labels)
    positives, negatives = scores[labels == 1], scores[labels == 0]
    wins = 0.0
    for p in positives:
        for n in negatives:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(positives) * len(negatives))


# ==================== 混淆矩阵与标量指标 ====================

def test_hand_confusion_case():
    c = confusion(HAND_SCORES, HAND_LABELS, 0.5)
    assert (c.tp, c.tn, c.fp, c.fn) == (2, 6, 1, 1)
    m = scalar_metrics(c)
    assert m.acc == 0.8
    assert m.precision == 2 / 3 and m.recall == 2 / 3
    assert m.f1 == pytest.approx(2 / 3, abs=1e-15)
    assert m.fpr == pytest.approx(1 / 7)
    assert m.degenerate == []


def test_infinite_thresholds():
    c = confusion(HAND_SCORES, HAND_LABELS, -np.inf)
    assert c.fn == 0 and c.tn == 0
    c = confusion(HAND_SCORES, HAND_LABELS, np.inf)
    assert c.tp == 0 and c.fp == 0


def test_perfect_and_degenerate_metrics():
    m = scalar_metrics(ConfusionCounts(tp=3, tn=2, fp=0, fn=0))
    assert (m.acc, m.precision, m.recall, m.f1, m.fpr) == (1.0, 1.0, 1.0, 1.0, 0.0)
    m = scalar_metrics(ConfusionCounts(tp=0, tn=4, fp=0, fn=2))
    assert m.precision == 0.0 and 'precision' in m.degenerate
    assert m.f1 == 0.0 and 'f1' in m.degenerate


def test_f1_is_harmonic_mean():
    rng = derive_rng(0, 'confusion')
    for _ in range(50):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 20, size=4))
        if tp + tn + fp + fn == 0:
            continue
        m = scalar_metrics(ConfusionCounts(tp, tn, fp, fn))
        if m.precision + m.recall > 0:
            expected = 2 * m.precision * m.recall / (m.precision + m.recall)
            assert m.f1 == pytest.approx(expected, abs=1e-12)


def test_confusion_input_errors():
    with pytest.raises(DataError):
        confusion([], [])
    with pytest.raises(DataError):
        ScoredSet([0.1, 0.2], [1])
    with pytest.raises(DataError):
        ScoredSet([0.1, 0.2], [0, 2])


# ==================== ROC / PR ====================

def test_roc_perfect_and_all_tied():
    assert roc_auc(ScoredSet([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])).auc == 1.0
    curve = roc_auc(ScoredSet([0.5] * 6, [1, 0, 1, 0, 0, 1]))
    assert curve.auc == 0.5
    assert (curve.x[0], curve.y[0]) == (0.0, 0.0)
    assert (curve.x[-1], curve.y[-1]) == (1.0, 1.0)


def test_roc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc(ScoredSet([0.1, 0.2], [1, 1]))


@pytest.mark.parametrize('seed', range(100))
def test_roc_matches_mann_whitney(seed):
    rng = derive_rng(seed, 'auc')
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    scores = rng.random(n)
    if seed % 2:
        scores = np.round(scores * 5) / 5
    auc = roc_auc(ScoredSet(scores, labels)).auc
    assert auc == pytest.approx(_mann_whitney(scores, labels), abs=1e-9)


def test_roc_rank_invariances():
    rng = derive_rng(1, 'auc')
    scores, labels = rng.normal(size=80), rng.integers(0, 2, size=80)
    auc = roc_auc(ScoredSet(scores, labels)).auc
    assert roc_auc(ScoredSet(np.exp(3 * scores), labels)).auc == pytest.approx(auc, abs=1e-12)
    assert auc + roc_auc(ScoredSet(-scores, labels)).auc == pytest.approx(1.0, abs=1e-12)


def test_auprc_hand_stepped():
    curve = pr_auprc(ScoredSet([0.9, 0.8, 0.7, 0.6, 0.5], [1, 0, 1, 0, 1]))
    assert curve.auc == pytest.approx(1 / 3 + (1 / 3) * (2 / 3) + (1 / 3) * (3 / 5), abs=1e-12)
    assert (curve.x[0], curve.y[0]) == (0.0, 1.0)
    assert pr_auprc(ScoredSet([0.9, 0.8, 0.2], [1, 1, 0])).auc == 1.0


def test_auprc_random_scores_near_prevalence():
    rng = derive_rng(2, 'auprc')
    labels = (rng.random(2000) < 0.3).astype(int)
    auprc = pr_auprc(ScoredSet(rng.random(2000), labels)).auc
    assert abs(auprc - labels.mean()) <= 0.05


def test_auprc_without_positives_is_undefined():
    with pytest.raises(UndefinedMetricError):
        pr_auprc(ScoredSet([0.3, 0.4], [0, 0]))


# ==================== 一对其余 ====================

def test_one_vs_rest():
    logits = np.array([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
    labels = [0, 1, 2, 1]
    sets = [one_vs_rest(logits, labels, c) for c in range(3)]
    assert sum(s.n_positive for s in sets) == len(labels)
    assert_array_equal(sets[1].labels, [0, 1, 0, 1])
    assert sets[0].scores[3] == pytest.approx(1 / 3)
    with pytest.raises(ParameterError):
        one_vs_rest(logits, labels, 3)


def test_binary_one_vs_rest_equals_binary_evaluation():
    logits = derive_rng(3, 'logits').normal(size=(20, 2))
    labels = np.r_[np.zeros(10, dtype=int), np.ones(10, dtype=int)]
    report = EvalService.evaluate_logits(logits, labels)
    assert report.auc == roc_auc(one_vs_rest(logits, labels, 1)).auc


def test_multiclass_accuracy_ties_take_lowest_index():
    assert multiclass_accuracy([[1.0, 1.0], [0.0, 2.0]], [0, 1]) == 1.0


# ==================== 评估报告 ====================

def test_evaluate_three_class_report():
    rng = derive_rng(4, 'logits')
    labels = np.repeat([0, 1, 2], 10)
    logits = np.eye(3)[labels] * 2.0 + rng.normal(0.0, 0.5, size=(30, 3))
    report = EvalService.evaluate_logits(logits, labels, ['health', 'bacterial', 'viral'])
    assert [c.class_name for c in report.per_class] == ['health', 'bacterial', 'viral']
    assert report.auc == pytest.approx(np.mean([c.auc for c in report.per_class]))
    for value in report.scalars().values():
        assert 0.0 <= value <= 1.0
    data = report.to_dict(with_curves=False)
    assert 'roc_curve' not in data['per_class'][0]


def test_evaluate_single_class_marks_degenerate():
    report = EvalService.evaluate_logits(np.zeros((3, 2)), [1, 1, 1])
    assert report.auc is None
    assert 'auc[0]' in report.degenerate and 'auc[1]' in report.degenerate


def test_evaluate_input_errors():
    with pytest.raises(DataError):
        EvalService.evaluate_logits(np.zeros((0, 2)), [])
    with pytest.raises(DataError):
        EvalService.evaluate_logits(np.zeros((3, 2)), [0, 1])


def test_write_curves(tmp_path):
    logits = derive_rng(5, 'logits').normal(size=(12, 2))
    report = EvalService.evaluate_logits(logits, [0, 1] * 6, ['health', 'infection'])
    written = EvalService.write_curves(report, tmp_path, 'student')
    assert len(written) == 4
    roc = pd.read_csv(tmp_path / 'student_roc_infection.csv')
    assert list(roc.columns) == ['threshold', 'fpr', 'tpr']
    assert roc['tpr'].iloc[-1] == 1.0


# ==================== k 折交叉验证 ====================

def test_stratified_folds_cover_disjointly():
    labels = [0, 1, 0, 1, 0, 1, 0, 1]
    folds = EvalService.stratified_folds(labels, 4, seed=0)
    assert [len(f) for f in folds] == [2, 2, 2, 2]
    assert_array_equal(np.sort(np.concatenate(folds)), np.arange(8))
    for fold in folds:
        assert set(np.asarray(labels)[fold]) == {0, 1}
    again = EvalService.stratified_folds(labels, 4, seed=0)
    for a, b in zip(folds, again):
        assert_array_equal(a, b)


def test_stratified_folds_errors():
    with pytest.raises(ParameterError):
        EvalService.stratified_folds([0, 1, 0, 1], 1, seed=0)
    with pytest.raises(DataError) as exc:
        EvalService.stratified_folds([0, 0, 0, 1, 1], 3, seed=0, class_names=['health', 'viral'])
    assert 'viral' in str(exc.value)


def _majority_trainer(train, fold_index):
    majority = int(np.bincount(train.labels).argmax())

    def predict(features):
        logits = np.zeros((len(features), 2))
        logits[:, majority] = 1.0
        return logits
    return predict


def _dataset(labels):
    labels = np.asarray(labels)
    return Dataset(features=np.arange(len(labels), dtype=float).reshape(-1, 1), labels=labels,
                   sample_ids=[f'S{i}' for i in range(len(labels))],
                   class_names=['health', 'infection'])


def test_kfold_majority_trainer_accuracy_is_prevalence():
    data = _dataset([0] * 8 + [1] * 4)
    result = EvalService.kfold_cv(data, 4, _majority_trainer, seed=3)
    assert result.summary['acc']['mean'] == pytest.approx(2 / 3)
    assert result.summary['acc']['stdev'] == pytest.approx(0.0)
    assert result.summary['auc']['mean'] == 0.5
    assert result.to_dict()['fold_sizes'] == [3, 3, 3, 3]


def test_kfold_parallel_matches_serial():
    data = _dataset([0, 1] * 6)
    rng_logits = derive_rng(6, 'logits').normal(size=(12, 2))

    def trainer(train, fold_index):
        return lambda features: rng_logits[features[:, 0].astype(int)]

    serial = EvalService.kfold_cv(data, 3, trainer, seed=1)
    parallel = EvalService.kfold_cv(data, 3, trainer, seed=1, parallel=3)
    assert [r.to_dict() for r in serial.reports] == [r.to_dict() for r in parallel.reports]


def test_summarize_folds_skips_undefined():
    reports = [EvalService.evaluate_logits(np.zeros((2, 2)), [0, 0]),
               EvalService.evaluate_logits(np.array([[0.0, 1.0], [1.0, 0.0]]), [1, 0])]
    summary = EvalService.summarize_folds(reports)
    assert summary['auc'] == {'mean': 1.0, 'stdev': 0.0}
    assert summary['acc']['mean'] == pytest.approx(0.5)
