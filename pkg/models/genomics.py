"""
基因组数据模型 - 表达矩阵、标签、通路集合、基因对与数据集
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from utils.errors import DataError, ShapeError


def _find_duplicates(ids: Sequence[str]) -> List[str]:
    seen, duplicates = set(), []
    for item in ids:
        if item in seen and item not in duplicates:
            duplicates.append(item)
        seen.add(item)
    return duplicates


@dataclass
class ExpressionMatrix:
    """基因×样本的非负表达矩阵"""

    gene_ids: List[str]
    sample_ids: List[str]
    values: np.ndarray

    def __post_init__(self):
        self.gene_ids = [str(g) for g in self.gene_ids]
        self.sample_ids = [str(s) for s in self.sample_ids]
        self.values = np.asarray(self.values, dtype=np.float64)

        duplicates = _find_duplicates(self.gene_ids)
        if duplicates:
            raise DataError(f"基因ID重复: {', '.join(duplicates)}")
        duplicates = _find_duplicates(self.sample_ids)
        if duplicates:
            raise DataError(f"样本ID重复: {', '.join(duplicates)}")
        expected = (len(self.gene_ids), len(self.sample_ids))
        if self.values.shape != expected:
            raise ShapeError(f"表达矩阵形状 {self.values.shape} 与ID数量 {expected} 不符")
        if not np.all(np.isfinite(self.values)):
            raise DataError("表达矩阵包含非有限值")
        if np.any(self.values < 0):
            raise DataError("表达矩阵包含负值")
        self._gene_index = {gene: i for i, gene in enumerate(self.gene_ids)}

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def has_gene(self, gene: str) -> bool:
        return gene in self._gene_index

    def gene_row(self, gene: str) -> np.ndarray:
        """
        获取单个基因在所有样本上的表达值

        Raises:
            DataError: 基因不存在
        """
        index = self._gene_index.get(gene)
        if index is None:
            raise DataError(f"表达矩阵中缺少基因: {gene}")
        return self.values[index]

    def missing_genes(self, genes: Sequence[str]) -> List[str]:
        return sorted({g for g in genes if g not in self._gene_index})

    def gene_indices(self, genes: Sequence[str]) -> np.ndarray:
        missing = self.missing_genes(genes)
        if missing:
            raise DataError(f"表达矩阵中缺少基因: {', '.join(missing)}")
        return np.array([self._gene_index[g] for g in genes], dtype=np.int64)

    def sample_columns(self, sample_ids: Sequence[str]) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.sample_ids)}
        missing = [s for s in sample_ids if s not in index]
        if missing:
            raise DataError(f"表达矩阵中缺少样本: {', '.join(missing)}")
        return np.array([index[s] for s in sample_ids], dtype=np.int64)


@dataclass
class LabelVector:
    """样本标签（类别索引）"""

    sample_ids: List[str]
    labels: np.ndarray
    class_names: List[str] = field(default_factory=lambda: ['health', 'infection'])

    def __post_init__(self):
        self.sample_ids = [str(s) for s in self.sample_ids]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sample_ids) != len(self.labels):
            raise DataError(f"样本数 {len(self.sample_ids)} 与标签数 {len(self.labels)} 不一致")
        duplicates = _find_duplicates(self.sample_ids)
        if duplicates:
            raise DataError(f"标签文件中样本ID重复: {', '.join(duplicates)}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"标签超出已声明的类别范围 0..{len(self.class_names) - 1}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass
class PathwayCatalog:
    """通路集合：通路名 -> 基因列表（保持文件顺序）"""

    pathways: Dict[str, List[str]]
    descriptions: Dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.pathways)

    def genes(self) -> List[str]:
        return sorted({g for genes in self.pathways.values() for g in genes})


@dataclass(frozen=True)
class ContingencyTable:
    """
    2×2 列联表

    行: r_dis > 0 / r_dis ≤ 0；列: 标签 0 / 标签 1
        a  b
        c  d
    """

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 0:
            raise DataError(f"列联表计数不能为负: {self.as_tuple()}")
        if self.total < 1:
            raise DataError("列联表总数至少为 1")

    @property
    def total(self) -> int:
        return self.a + self.b + self.c + self.d

    @property
    def degenerate(self) -> bool:
        """任一行或列边际为 0 时，同边际的表只有一张"""
        return 0 in (self.a + self.b, self.c + self.d, self.a + self.c, self.b + self.d)

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return self.a, self.b, self.c, self.d


@dataclass(frozen=True)
class GenePair:
    """有序基因对及其筛选统计量，模式为 expr(g1) > expr(g2)"""

    g1: str
    g2: str
    pathway: str
    p_value: float = 1.0
    page_ratio_case: float = 0.0
    page_ratio_control: float = 0.0

    def __post_init__(self):
        if self.g1 == self.g2:
            raise DataError(f"基因对两端不能相同: {self.g1}")
        if not 0.0 <= self.p_value <= 1.0:
            raise DataError(f"p 值必须在 [0, 1] 内: {self.p_value}")

    @property
    def ratio_gap(self) -> float:
        return abs(self.page_ratio_case - self.page_ratio_control)

    @property
    def key(self) -> frozenset:
        return frozenset((self.g1, self.g2))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'g1': self.g1,
            'g2': self.g2,
            'pathway': self.pathway,
            'p_value': self.p_value,
            'page_ratio_case': self.page_ratio_case,
            'page_ratio_control': self.page_ratio_control
        }


@dataclass
class DgpPanel:
    """按排名排列的差异基因对（DGP）面板，定义模型的特征空间"""

    pairs: List[GenePair]

    def __post_init__(self):
        keys = [pair.key for pair in self.pairs]
        if len(set(keys)) != len(keys):
            raise DataError("面板中存在重复的基因对")

    @property
    def k(self) -> int:
        return len(self.pairs)

    def genes(self) -> List[str]:
        return sorted({g for pair in self.pairs for g in (pair.g1, pair.g2)})

    def to_records(self) -> List[Dict[str, Any]]:
        return [dict(pair.to_dict(), rank=rank) for rank, pair in enumerate(self.pairs, start=1)]

    @classmethod
    def from_records(cls, records: Sequence[Dict[str, Any]]) -> 'DgpPanel':
        ordered = sorted(records, key=lambda r: int(r.get('rank', 0)))
        return cls([
            GenePair(
                g1=str(r['g1']),
                g2=str(r['g2']),
                pathway=str(r['pathway']),
                p_value=float(r['p_value']),
                page_ratio_case=float(r['page_ratio_case']),
                page_ratio_control=float(r['page_ratio_control'])
            )
            for r in ordered
        ])


@dataclass
class Dataset:
    """模型输入：样本×k 特征矩阵与类别标签"""

    features: np.ndarray
    labels: np.ndarray
    sample_ids: List[str]
    class_names: List[str]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = [str(s) for s in self.sample_ids]
        if self.features.ndim != 2:
            raise ShapeError(f"特征矩阵必须是二维的，实际形状: {self.features.shape}")
        n = self.features.shape[0]
        if len(self.labels) != n or len(self.sample_ids) != n:
            raise DataError(
                f"特征({n})、标签({len(self.labels)})与样本ID({len(self.sample_ids)})数量不一致")
        if not np.all(np.isfinite(self.features)):
            raise DataError("特征矩阵包含非有限值")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[indices],
            labels=self.labels[indices],
            sample_ids=[self.sample_ids[i] for i in indices],
            class_names=list(self.class_names)
        )
