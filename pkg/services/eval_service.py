"""
评估服务 - 评估报告组装、曲线导出与分层 k 折交叉验证
"""
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from models.genomics import Dataset
from services.data_service import atomic_write_text
from utils.errors import DataError, ParameterError, UndefinedMetricError
from utils.metrics import (
    DEFAULT_THRESHOLD,
    argmax_predictions,
    confusion,
    one_vs_rest,
    pr_auprc,
    roc_auc,
    scalar_metrics,
    softmax_probabilities
)
from utils.rng import derive_rng

logger = logging.getLogger(__name__)

SCALAR_KEYS = ('acc', 'precision', 'recall', 'f1', 'auc', 'auprc')


@dataclass
class ClassReport:
    """单个类别的一对其余评估结果"""

    class_index: int
    class_name: str
    auc: Optional[float]
    auprc: Optional[float]
    roc_curve: Dict[str, List[float]] = field(default_factory=dict)
    pr_curve: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self, with_curves: bool = True) -> Dict[str, Any]:
        data = {'class_index': self.class_index, 'class_name': self.class_name,
                'auc': self.auc, 'auprc': self.auprc}
        if with_curves:
            data.update({'roc_curve': self.roc_curve, 'pr_curve': self.pr_curve})
        return data


@dataclass
class EvalReport:
    """
    评估报告

    二分类时标量指标针对类别 1（阈值 0.5）；多分类时 acc 为 argmax 准确率，
    precision/recall/f1/auc/auprc 为各类别一对其余结果的宏平均。
    """

    acc: float
    precision: float
    recall: float
    f1: float
    auc: Optional[float]
    auprc: Optional[float]
    n_samples: int
    per_class: List[ClassReport] = field(default_factory=list)
    degenerate: List[str] = field(default_factory=list)
    threshold: float = DEFAULT_THRESHOLD

    def scalars(self) -> Dict[str, Optional[float]]:
        return {key: getattr(self, key) for key in SCALAR_KEYS}

    def to_dict(self, with_curves: bool = True) -> Dict[str, Any]:
        data = self.scalars()
        data.update({
            'n_samples': self.n_samples,
            'threshold': self.threshold,
            'degenerate': list(self.degenerate),
            'per_class': [c.to_dict(with_curves) for c in self.per_class]
        })
        return data


def _curve_dict(curve, x_name: str, y_name: str) -> Dict[str, List[float]]:
    return {
        'threshold': [float(t) for t in curve.thresholds],
        x_name: [float(v) for v in curve.x],
        y_name: [float(v) for v in curve.y]
    }


def _class_report(logits: np.ndarray, labels: np.ndarray, cls: int, name: str,
                  degenerate: List[str]) -> ClassReport:
    scored = one_vs_rest(logits, labels, cls)
    report = ClassReport(class_index=cls, class_name=name, auc=None, auprc=None)
    try:
        roc = roc_auc(scored)
        report.auc = roc.auc
        report.roc_curve = _curve_dict(roc, 'fpr', 'tpr')
    except UndefinedMetricError:
        degenerate.append(f'auc[{name}]')
    try:
        pr = pr_auprc(scored)
        report.auprc = pr.auc
        report.pr_curve = _curve_dict(pr, 'recall', 'precision')
    except UndefinedMetricError:
        degenerate.append(f'auprc[{name}]')
    return report


def _mean_defined(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


# ==================== 交叉验证 ====================

Trainer = Callable[[Dataset, int], Callable[[np.ndarray], np.ndarray]]


@dataclass
class KFoldResult:
    folds: List[np.ndarray]
    reports: List[EvalReport]
    summary: Dict[str, Dict[str, Optional[float]]]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'k': len(self.folds),
            'folds': [r.to_dict(with_curves=False) for r in self.reports],
            'fold_sizes': [len(f) for f in self.folds],
            'summary': self.summary
        }


class EvalService:
    """评估服务类 - 评估报告、曲线导出与 k 折交叉验证"""

    @staticmethod
    def evaluate_logits(logits: np.ndarray, labels: Sequence[int], class_names: Sequence[str] = None,
                        threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
        """
        由 logits 与真实标签生成评估报告

        单一类别导致 AUC/AUPRC 无定义时记为 None 并在 degenerate 中标注。

        Args:
            logits: batch×C logits
            labels: 类别下标
            class_names: 类别名称，默认使用下标
            threshold: 二分类阳性阈值

        Raises:
            DataError: 输入为空或数量不一致
        """
        logits = np.asarray(logits, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if logits.ndim != 2 or len(logits) == 0:
            raise DataError("评估输入为空")
        if len(logits) != len(labels):
            raise DataError(f"logits({len(logits)})与标签({len(labels)})数量不一致")
        n_classes = logits.shape[1]
        names = list(class_names) if class_names else [str(c) for c in range(n_classes)]
        degenerate: List[str] = []
        per_class = [_class_report(logits, labels, c, names[c], degenerate) for c in range(n_classes)]

        if n_classes == 2:
            positive = softmax_probabilities(logits)[:, 1]
            metrics = scalar_metrics(confusion(positive, labels, threshold))
            degenerate.extend(metrics.degenerate)
            target = per_class[1]
            return EvalReport(acc=metrics.acc, precision=metrics.precision, recall=metrics.recall,
                              f1=metrics.f1, auc=target.auc, auprc=target.auprc,
                              n_samples=len(labels), per_class=per_class, degenerate=degenerate,
                              threshold=threshold)

        predictions = argmax_predictions(logits)
        per_class_metrics = []
        for c in range(n_classes):
            m = scalar_metrics(confusion((predictions == c).astype(np.float64),
                                         (labels == c).astype(np.int64), 0.5))
            degenerate.extend(f'{flag}[{names[c]}]' for flag in m.degenerate)
            per_class_metrics.append(m)
        return EvalReport(
            acc=float(np.mean(predictions == labels)),
            precision=float(np.mean([m.precision for m in per_class_metrics])),
            recall=float(np.mean([m.recall for m in per_class_metrics])),
            f1=float(np.mean([m.f1 for m in per_class_metrics])),
            auc=_mean_defined([c.auc for c in per_class]),
            auprc=_mean_defined([c.auprc for c in per_class]),
            n_samples=len(labels), per_class=per_class, degenerate=degenerate, threshold=threshold
        )

    @staticmethod
    def write_curves(report: EvalReport, out_dir, prefix: str = 'eval') -> List[str]:
        """
        把每个类别的 ROC 与 PR 曲线写成 CSV，返回写出的文件路径

        列：threshold, fpr, tpr / threshold, recall, precision
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for c in report.per_class:
            for kind, curve in (('roc', c.roc_curve), ('pr', c.pr_curve)):
                if not curve:
                    continue
                path = out_dir / f'{prefix}_{kind}_{c.class_name}.csv'
                atomic_write_text(path, pd.DataFrame(curve).to_csv(index=False))
                written.append(str(path))
        return written

    @staticmethod
    def stratified_folds(labels: Sequence[int], k: int, seed: int,
                         class_names: Sequence[str] = None) -> List[np.ndarray]:
        """
        分层 k 折划分：每个类别打乱后轮流分配到各折

        Returns:
            List[np.ndarray]: 每折的样本下标（升序），互不相交且覆盖全部样本

        Raises:
            ParameterError: k < 2
            DataError: 某类别样本数少于 k（错误信息给出类别）
        """
        if k < 2:
            raise ParameterError(f"折数至少为 2，实际: {k}")
        labels = np.asarray(labels)
        rng = derive_rng(seed, 'kfold')
        assignments: List[List[int]] = [[] for _ in range(k)]
        offset = 0
        for cls in np.unique(labels):
            members = np.flatnonzero(labels == cls)
            if len(members) < k:
                name = class_names[cls] if class_names is not None and cls < len(class_names) else cls
                raise DataError(f"类别 {name} 只有 {len(members)} 个样本，不足以分层为 {k} 折")
            for position, index in enumerate(rng.permutation(members)):
                assignments[(position + offset) % k].append(int(index))
            offset += len(members)
        return [np.sort(np.array(fold, dtype=np.int64)) for fold in assignments]

    @staticmethod
    def summarize_folds(reports: Sequence[EvalReport]) -> Dict[str, Dict[str, Optional[float]]]:
        """各指标在折间的均值与样本标准差（未定义的折跳过）"""
        summary = {}
        for key in SCALAR_KEYS:
            values = [getattr(r, key) for r in reports if getattr(r, key) is not None]
            summary[key] = {
                'mean': float(np.mean(values)) if values else None,
                'stdev': float(statistics.stdev(values)) if len(values) > 1 else 0.0 if values else None
            }
        return summary

    @staticmethod
    def kfold_cv(data: Dataset, k: int, trainer: Trainer, seed: int,
                 parallel: int = 1) -> KFoldResult:
        """
        分层 k 折交叉验证

        trainer(train_data, fold_index) 返回一个打分函数 features → logits；
        在其余 k−1 折上训练、在留出折上评估。并行时结果仍按折序排列。

        Args:
            data: 数据集
            k: 折数
            trainer: 训练过程
            seed: 划分种子
            parallel: 并行线程数

        Returns:
            KFoldResult: 每折报告与均值/标准差
        """
        folds = EvalService.stratified_folds(data.labels, k, seed, data.class_names)
        all_indices = np.arange(len(data))

        def run(fold_index: int) -> EvalReport:
            held_out = folds[fold_index]
            train = data.subset(np.setdiff1d(all_indices, held_out))
            test = data.subset(held_out)
            predict = trainer(train, fold_index)
            report = EvalService.evaluate_logits(predict(test.features), test.labels, data.class_names)
            logger.info("第 %d/%d 折: acc=%.4f auc=%s", fold_index + 1, k, report.acc,
                        'n/a' if report.auc is None else f"{report.auc:.4f}")
            return report

        if parallel > 1:
            with ThreadPoolExecutor(max_workers=parallel) as executor:
                reports = list(executor.map(run, range(k)))
        else:
            reports = [run(i) for i in range(k)]
        return KFoldResult(folds=folds, reports=reports, summary=EvalService.summarize_folds(reports))

