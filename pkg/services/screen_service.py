"""
基因对筛选服务 - 通路内配对、r_dis、Fisher 精确检验与 DGP 面板选择
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from models.genomics import (
    ContingencyTable,
    DgpPanel,
    ExpressionMatrix,
    GenePair,
    LabelVector,
    PathwayCatalog
)
from utils.errors import DataError, ParameterError
from utils.stats import fisher_exact_two_sided

logger = logging.getLogger(__name__)

# 对数前的零表达截断值
EXPR_EPS = 1e-8
DEFAULT_PANEL_SIZE = 35
FEATURE_MODES = ('binary', 'continuous')

_CHUNK = 2048


def r_dis(expr_g1: float, expr_g2: float) -> float:
    """
    基因对的对数表达差：ln(max(e1, ε)) - ln(max(e2, ε))，ε = 1e-8

    Raises:
        DataError: 表达值为负
    """
    if expr_g1 < 0 or expr_g2 < 0:
        raise DataError(f"表达值不能为负: ({expr_g1}, {expr_g2})")
    return float(np.log(max(expr_g1, EXPR_EPS)) - np.log(max(expr_g2, EXPR_EPS)))


def _log_expression(values: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(values, EXPR_EPS))


def binarize_labels(labels: np.ndarray) -> np.ndarray:
    """多分类标签折叠为 健康(0) / 感染(1)"""
    return (np.asarray(labels) > 0).astype(np.int64)


def _check_alignment(expr: ExpressionMatrix, labels: LabelVector) -> None:
    if list(labels.sample_ids) != list(expr.sample_ids):
        raise DataError("标签样本顺序与表达矩阵不一致，请先对齐标签")


def _fisher_batch(tables: Sequence[Tuple[int, int, int, int]]) -> List[float]:
    return [fisher_exact_two_sided(ContingencyTable(*t)) for t in tables]


@dataclass
class ScreeningResult:
    """全部候选基因对的打分结果"""

    candidates: List[GenePair]
    degenerate_tables: int

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)


def rank_key(pair: GenePair):
    """排名键：p 值升序，|case-control| 降序，(g1, g2) 字典序"""
    return pair.p_value, -pair.ratio_gap, pair.g1, pair.g2


class ScreenService:
    """基因对筛选服务类 - 列联表、候选打分、DGP 面板选择与特征化"""

    @staticmethod
    def build_contingency(pair: Tuple[str, str], expr: ExpressionMatrix,
                          labels: LabelVector) -> ContingencyTable:
        """
        构建基因对的 2×2 列联表

        a = #(r_dis>0, 标签0)  b = #(r_dis>0, 标签1)
        c = #(r_dis≤0, 标签0)  d = #(r_dis≤0, 标签1)

        Args:
            pair: (g1, g2)
            expr: 表达矩阵
            labels: 与表达矩阵样本对齐的标签，非 0 类别视为 1

        Raises:
            DataError: 基因缺失或标签未对齐
        """
        _check_alignment(expr, labels)
        g1, g2 = pair
        positive = _log_expression(expr.gene_row(g1)) > _log_expression(expr.gene_row(g2))
        case = binarize_labels(labels.labels) == 1
        a = int(np.sum(positive & ~case))
        b = int(np.sum(positive & case))
        return ContingencyTable(a=a, b=b, c=int(np.sum(~case)) - a, d=int(np.sum(case)) - b)

    @staticmethod
    def page_ratio(pair: Tuple[str, str], expr: ExpressionMatrix,
                   sample_subset: Sequence[str]) -> float:
        """
        样本子集中呈现 expr(g1) > expr(g2) 模式的比例（严格大于，相等不计）

        Raises:
            ParameterError: 子集为空
        """
        if len(sample_subset) == 0:
            raise ParameterError("计算 PAGE 比例的样本子集不能为空")
        columns = expr.sample_columns(sample_subset)
        g1, g2 = pair
        return float(np.mean(expr.gene_row(g1)[columns] > expr.gene_row(g2)[columns]))

    @staticmethod
    def enumerate_pairs(catalog: PathwayCatalog, expr: ExpressionMatrix) -> Iterator[Tuple[str, str, str]]:
        """
        枚举通路内的候选基因对

        每个无序基因对只产出一次（记录第一个贡献它的通路），按 (g1, g2) 字典序输出，g1 < g2。

        Yields:
            Tuple[str, str, str]: (g1, g2, pathway)
        """
        first_pathway: Dict[Tuple[str, str], str] = {}
        for name, genes in catalog.pathways.items():
            present = sorted({g for g in genes if expr.has_gene(g)})
            for i, g1 in enumerate(present):
                for g2 in present[i + 1:]:
                    first_pathway.setdefault((g1, g2), name)
        for g1, g2 in sorted(first_pathway):
            yield g1, g2, first_pathway[(g1, g2)]

    @staticmethod
    def score_candidates(expr: ExpressionMatrix, labels: LabelVector, catalog: PathwayCatalog,
                         parallel: int = 1) -> ScreeningResult:
        """
        为每个候选基因对定向、构建列联表并计算双侧 Fisher p 值

        定向规则：使 page_ratio_case ≥ page_ratio_control（模式在感染组富集）。
        并行时按输入顺序合并，结果与单进程完全一致。

        Args:
            expr: 表达矩阵
            labels: 对齐后的标签
            catalog: 通路集合
            parallel: 计算 p 值的进程数

        Returns:
            ScreeningResult: 候选基因对（按枚举顺序）与退化列联表数量
        """
        _check_alignment(expr, labels)
        case = binarize_labels(labels.labels) == 1
        n_case, n_control = int(case.sum()), int((~case).sum())
        if n_case == 0 or n_control == 0:
            logger.warning("筛选标签只包含单一类别，所有列联表都将退化")

        candidates = list(ScreenService.enumerate_pairs(catalog, expr))
        log_values = _log_expression(expr.values)

        oriented: List[Tuple[str, str, str, float, float]] = []
        tables: List[Tuple[int, int, int, int]] = []
        for start in range(0, len(candidates), _CHUNK):
            chunk = candidates[start:start + _CHUNK]
            idx1 = expr.gene_indices([c[0] for c in chunk])
            idx2 = expr.gene_indices([c[1] for c in chunk])
            x, y = expr.values[idx1], expr.values[idx2]
            forward, reverse = x > y, y > x
            ratio_case_f = forward[:, case].mean(axis=1) if n_case else np.zeros(len(chunk))
            ratio_ctrl_f = forward[:, ~case].mean(axis=1) if n_control else np.zeros(len(chunk))
            ratio_case_r = reverse[:, case].mean(axis=1) if n_case else np.zeros(len(chunk))
            ratio_ctrl_r = reverse[:, ~case].mean(axis=1) if n_control else np.zeros(len(chunk))
            keep = ratio_case_f >= ratio_ctrl_f

            lx, ly = log_values[idx1], log_values[idx2]
            positive = np.where(keep[:, None], lx > ly, ly > lx)
            a = np.sum(positive & ~case, axis=1)
            b = np.sum(positive & case, axis=1)

            for j, (g1, g2, pathway) in enumerate(chunk):
                if keep[j]:
                    oriented.append((g1, g2, pathway, ratio_case_f[j], ratio_ctrl_f[j]))
                else:
                    oriented.append((g2, g1, pathway, ratio_case_r[j], ratio_ctrl_r[j]))
                tables.append((int(a[j]), int(b[j]), n_control - int(a[j]), n_case - int(b[j])))

        unique_tables = sorted(set(tables))
        if parallel > 1 and len(unique_tables) > 1:
            size = -(-len(unique_tables) // parallel)
            batches = [unique_tables[i:i + size] for i in range(0, len(unique_tables), size)]
            with ProcessPoolExecutor(max_workers=parallel) as executor:
                p_values = [p for batch in executor.map(_fisher_batch, batches) for p in batch]
        else:
            p_values = _fisher_batch(unique_tables)
        p_by_table = dict(zip(unique_tables, p_values))

        degenerate = sum(1 for t in tables if ContingencyTable(*t).degenerate)
        scored = [
            GenePair(g1=g1, g2=g2, pathway=pathway, p_value=p_by_table[table],
                     page_ratio_case=float(rc), page_ratio_control=float(rn))
            for (g1, g2, pathway, rc, rn), table in zip(oriented, tables)
        ]
        logger.info("候选基因对 %d 个，退化列联表 %d 个", len(scored), degenerate)
        return ScreeningResult(candidates=scored, degenerate_tables=degenerate)

    @staticmethod
    def select_dgps(expr: ExpressionMatrix, labels: LabelVector, catalog: PathwayCatalog,
                    k: int = DEFAULT_PANEL_SIZE, parallel: int = 1,
                    scored: ScreeningResult = None) -> DgpPanel:
        """
        选出差异最显著的 k 个基因对

        Args:
            expr: 表达矩阵
            labels: 对齐后的标签
            catalog: 通路集合
            k: 面板大小
            parallel: 进程数
            scored: 已有的打分结果，为空时重新计算

        Returns:
            DgpPanel: 排名后的前 k 个基因对

        Raises:
            ParameterError: k < 1
            DataError: 候选基因对不足 k 个
        """
        if k < 1:
            raise ParameterError(f"面板大小必须至少为 1，实际: {k}")
        if scored is None:
            scored = ScreenService.score_candidates(expr, labels, catalog, parallel=parallel)
        if scored.n_candidates < k:
            raise DataError(f"候选基因对只有 {scored.n_candidates} 个，不足面板大小 {k}")
        ranked = sorted(scored.candidates, key=rank_key)
        return DgpPanel(ranked[:k])

    @staticmethod
    def featurize(expr: ExpressionMatrix, panel: DgpPanel, mode: str = 'binary') -> np.ndarray:
        """
        把表达矩阵转换为 样本×k 特征矩阵，列顺序与面板一致

        binary: expr(g1) > expr(g2) 记 1，否则 0
        continuous: r_dis 值

        Raises:
            ParameterError: 未知模式
            DataError: 面板基因缺失（列出所有缺失基因）
        """
        if mode not in FEATURE_MODES:
            raise ParameterError(f"未知特征模式: {mode}，可选 {FEATURE_MODES}")
        missing = expr.missing_genes(panel.genes())
        if missing:
            raise DataError(f"表达矩阵缺少面板基因: {', '.join(missing)}")

        idx1 = expr.gene_indices([p.g1 for p in panel.pairs])
        idx2 = expr.gene_indices([p.g2 for p in panel.pairs])
        if mode == 'binary':
            features = expr.values[idx1] > expr.values[idx2]
        else:
            log_values = _log_expression(expr.values)
            features = log_values[idx1] - log_values[idx2]
        return np.ascontiguousarray(features.T, dtype=np.float64)

    @staticmethod
    def panel_summary(panel: DgpPanel, case_threshold: float = 0.7) -> Dict[str, float]:
        """面板中各基因对模式的病例/对照比例概况"""
        case = np.array([p.page_ratio_case for p in panel.pairs])
        control = np.array([p.page_ratio_control for p in panel.pairs])
        return {
            'k': panel.k,
            'mean_case_ratio': float(case.mean()) if panel.k else 0.0,
            'mean_control_ratio': float(control.mean()) if panel.k else 0.0,
            'share_case_ratio_above_threshold': float(np.mean(case >= case_threshold)) if panel.k else 0.0,
            'case_threshold': case_threshold
        }

