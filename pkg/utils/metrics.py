"""
评估指标模块 - 混淆矩阵、标量指标、ROC/PR 曲线

ACC = (TP+TN)/总数，Recall = TPR = TP/(TP+FN)，FPR = FP/(TN+FP)，
Precision = TP/(TP+FP)，F1 = 2·P·R/(P+R)。
分母为 0 的指标记为 0 并在 degenerate 中标注。
"""
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from utils.errors import DataError, ParameterError, UndefinedMetricError

DEFAULT_THRESHOLD = 0.5


@dataclass
class ScoredSet:
    """二分类打分集合"""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.scores) != len(self.labels):
            raise DataError(f"分数({len(self.scores)})与标签({len(self.labels)})数量不一致")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise DataError("二分类标签必须为 0 或 1")

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return int(len(self.labels) - self.labels.sum())


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class ScalarMetrics:
    acc: float
    precision: float
    recall: float
    fpr: float
    f1: float
    degenerate: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            'acc': self.acc,
            'precision': self.precision,
            'recall': self.recall,
            'fpr': self.fpr,
            'f1': self.f1,
            'degenerate': list(self.degenerate)
        }


def confusion(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """
    按阈值统计混淆矩阵，分数 ≥ 阈值判为阳性

    Raises:
        DataError: 输入为空
    """
    s = scores if isinstance(scores, ScoredSet) else ScoredSet(scores, labels)
    if len(s.labels) == 0:
        raise DataError("混淆矩阵的输入不能为空")
    predicted = s.scores >= threshold
    actual = s.labels == 1
    return ConfusionCounts(
        tp=int(np.sum(predicted & actual)),
        tn=int(np.sum(~predicted & ~actual)),
        fp=int(np.sum(predicted & ~actual)),
        fn=int(np.sum(~predicted & actual))
    )


def _ratio(numerator: float, denominator: float, name: str, flags: List[str]) -> float:
    if denominator == 0:
        flags.append(name)
        return 0.0
    return numerator / denominator


def scalar_metrics(c: ConfusionCounts) -> ScalarMetrics:
    """由混淆矩阵计算 ACC、Precision、Recall、FPR、F1"""
    flags: List[str] = []
    acc = _ratio(c.tp + c.tn, c.total, 'acc', flags)
    recall = _ratio(c.tp, c.tp + c.fn, 'recall', flags)
    fpr = _ratio(c.fp, c.tn + c.fp, 'fpr', flags)
    precision = _ratio(c.tp, c.tp + c.fp, 'precision', flags)
    f1 = _ratio(2 * precision * recall, precision + recall, 'f1', flags)
    return ScalarMetrics(acc=acc, precision=precision, recall=recall, fpr=fpr, f1=f1,
                         degenerate=flags)


def _threshold_sweep(s: ScoredSet):
    """按分数降序，在每个不同分数处累计 TP/FP"""
    order = np.argsort(-s.scores, kind='mergesort')
    scores, labels = s.scores[order], s.labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    tps = np.cumsum(labels)[last_of_group]
    fps = (last_of_group + 1) - tps
    return scores[last_of_group], tps.astype(np.float64), fps.astype(np.float64)


@dataclass
class Curve:
    auc: float
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray


def roc_auc(s: ScoredSet) -> Curve:
    """
    ROC 曲线与梯形法 AUC

    在每个不同分数处取阈值，并列分数一次跨越，AUC 等于 Mann–Whitney 统计量
    (一致对 + 0.5·并列对) / (P·N)。曲线从 (0,0) 开始、到 (1,1) 结束。

    Raises:
        UndefinedMetricError: 只含单一类别
    """
    if s.n_positive == 0 or s.n_negative == 0:
        raise UndefinedMetricError("ROC AUC 需要同时包含阳性与阴性样本")
    thresholds, tps, fps = _threshold_sweep(s)
    tpr = np.r_[0.0, tps / s.n_positive]
    fpr = np.r_[0.0, fps / s.n_negative]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return Curve(auc=auc, x=fpr, y=tpr, thresholds=np.r_[np.inf, thresholds])


def pr_auprc(s: ScoredSet) -> Curve:
    """
    PR 曲线与阶梯式 AUPRC：Σ (R_i - R_{i-1})·P_i，召回率升序

    曲线首点为 (recall=0, precision=1)。

    Raises:
        UndefinedMetricError: 没有阳性样本
    """
    if s.n_positive == 0:
        raise UndefinedMetricError("AUPRC 需要至少一个阳性样本")
    thresholds, tps, fps = _threshold_sweep(s)
    precision = tps / (tps + fps)
    recall = tps / s.n_positive
    auprc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return Curve(auc=auprc, x=np.r_[0.0, recall], y=np.r_[1.0, precision],
                 thresholds=np.r_[np.inf, thresholds])


def softmax_probabilities(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def one_vs_rest(logits, labels: Sequence[int], cls: int) -> ScoredSet:
    """
    一对其余：分数为该类的 softmax 概率，标签二值化

    Raises:
        ParameterError: 类别下标越界
    """
    probabilities = softmax_probabilities(logits)
    if not 0 <= cls < probabilities.shape[1]:
        raise ParameterError(f"类别下标 {cls} 越界，类别数 {probabilities.shape[1]}")
    return ScoredSet(probabilities[:, cls], (np.asarray(labels) == cls).astype(np.int64))


def argmax_predictions(logits) -> np.ndarray:
    """多分类预测，并列时取最小类别下标"""
    return np.argmax(np.asarray(logits), axis=1)


def multiclass_accuracy(logits, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("准确率的输入不能为空")
    return float(np.mean(argmax_predictions(logits) == labels))
