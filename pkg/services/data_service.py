"""
数据服务模块 - 文件解析与写出、合成数据生成、数据集划分

文件格式：
- 表达矩阵: CSV/TSV，首行 "gene_id" + 样本ID，每行一个基因
- 标签: 两列 CSV "sample_id,label"，整数类别
- 通路: GMT，每行 名称\t描述\t基因1\t基因2...
- 面板: CSV，列 g1,g2,pathway,p_value,page_ratio_case,page_ratio_control,rank
"""
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from models.genomics import (
    Dataset,
    DgpPanel,
    ExpressionMatrix,
    LabelVector,
    PathwayCatalog
)
from utils.errors import ConfigError, DataError, ParameterError
from utils.rng import derive_rng

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

PANEL_COLUMNS = ['g1', 'g2', 'pathway', 'p_value', 'page_ratio_case', 'page_ratio_control', 'rank']
PAN_INFECTION_CLASSES = ['health', 'bacterial', 'viral']
BINARY_CLASSES = ['health', 'infection']


def _separator(path: Path) -> str:
    return '\t' if path.suffix.lower() in ('.tsv', '.txt') else ','


def _require_file(path: PathLike) -> Path:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"文件不存在: {path}")
    return path


def atomic_write_text(path: PathLike, text: str) -> None:
    """先写临时文件再重命名，保证写入原子性"""
    atomic_write_bytes(path, text.encode('utf-8'))


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


# ==================== 解析 ====================

# ==================== 写出 ====================

# ==================== 合成数据 ====================

@dataclass
class SynthConfig:
    """合成数据配置"""

    n_samples: int = 300
    n_genes: int = 300
    n_pathways: int = 20
    planted_pairs: int = 15
    flip_noise: float = 0.1
    seed: int = 0
    n_classes: int = 2
    shared_fraction: float = 0.4

    def validate(self) -> 'SynthConfig':
        """
        Raises:
            ConfigError: 参数越界或植入基因对超过容量
        """
        if self.n_samples < 2:
            raise ConfigError(f"每类样本数至少为 2，实际: {self.n_samples}")
        if self.n_classes < 2:
            raise ConfigError(f"类别数至少为 2，实际: {self.n_classes}")
        if not 0.0 <= self.flip_noise < 0.5:
            raise ConfigError(f"flip_noise 必须在 [0, 0.5) 内，实际: {self.flip_noise}")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ConfigError(f"shared_fraction 必须在 [0, 1] 内，实际: {self.shared_fraction}")
        if self.n_pathways < 1 or self.planted_pairs < 0:
            raise ConfigError("通路数至少为 1，植入基因对数不能为负")
        if 2 * self.planted_pairs > self.n_genes:
            raise ConfigError(
                f"植入 {self.planted_pairs} 个基因对需要 {2 * self.planted_pairs} 个基因，"
                f"只有 {self.n_genes} 个")
        if self.n_genes // self.n_pathways < 2:
            raise ConfigError(f"{self.n_genes} 个基因不足以组成 {self.n_pathways} 条通路")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SyntheticData:
    """合成数据与植入的真实基因对"""

    expression: ExpressionMatrix
    labels: LabelVector
    catalog: PathwayCatalog
    planted: List[Dict[str, Any]] = field(default_factory=list)

    def planted_keys(self) -> List[frozenset]:
        return [frozenset((p['g1'], p['g2'])) for p in self.planted]


# ==================== 数据集 ====================


class DataService:
    """数据服务类 - 文件读写、合成数据与数据集划分"""

    @staticmethod
    def read_expression(path: PathLike) -> ExpressionMatrix:
        """
        读取表达矩阵

        Args:
            path: CSV（逗号）或 TSV/TXT（制表符）文件

        Returns:
            ExpressionMatrix: 基因顺序与文件一致

        Raises:
            DataError: 表头不合法、行长度不符、非数值单元格、ID 重复，均附文件与行号
        """
        path = _require_file(path)
        try:
            frame = pd.read_csv(path, sep=_separator(path), dtype=str, header=None,
                                keep_default_na=False, na_filter=False, encoding='utf-8-sig',
                                skip_blank_lines=True)
        except pd.errors.ParserError as e:
            raise DataError(f"{path}: 行长度不一致: {e}")
        except (UnicodeDecodeError, pd.errors.EmptyDataError) as e:
            raise DataError(f"{path}: 无法解析: {e}")

        header = [str(h).strip() for h in frame.iloc[0].tolist()]
        if not header or header[0] != 'gene_id' or len(header) < 2:
            raise DataError(f"{path}:1: 表头必须以 gene_id 开头并至少包含一个样本")
        sample_ids = header[1:]

        body = frame.iloc[1:]
        gene_ids: List[str] = []
        seen: Dict[str, int] = {}
        values = np.empty((len(body), len(sample_ids)))
        for row_number, (_, row) in enumerate(body.iterrows(), start=2):
            cells = row.tolist()
            if any(c is None or (isinstance(c, float) and np.isnan(c)) for c in cells):
                raise DataError(f"{path}:{row_number}: 行长度与表头不一致")
            gene = str(cells[0]).strip()
            if gene in seen:
                raise DataError(f"{path}:{row_number}: 基因ID重复: {gene}（首次出现在第 {seen[gene]} 行）")
            seen[gene] = row_number
            gene_ids.append(gene)
            for col, cell in enumerate(cells[1:]):
                try:
                    values[row_number - 2, col] = float(str(cell).strip())
                except ValueError:
                    raise DataError(
                        f"{path}:{row_number}: 样本 {sample_ids[col]} 的值不是数值: {cell!r}")
        if not np.all(np.isfinite(values)):
            raise DataError(f"{path}: 表达值必须是有限数值")
        if np.any(values < 0):
            row = int(np.argwhere(values < 0)[0][0])
            raise DataError(f"{path}:{row + 2}: 表达值不能为负（基因 {gene_ids[row]}）")

        logger.debug("读取表达矩阵 %s: %d 基因 × %d 样本", path, len(gene_ids), len(sample_ids))
        return ExpressionMatrix(gene_ids=gene_ids, sample_ids=sample_ids, values=values)

    @staticmethod
    def read_labels(path: PathLike, class_names: Sequence[str] = None) -> LabelVector:
        """
        读取两列标签文件 sample_id,label

        Raises:
            DataError: 列名不符、标签不是整数、样本重复
        """
        path = _require_file(path)
        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8-sig')
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise DataError(f"{path}: 无法解析: {e}")
        columns = [c.strip() for c in frame.columns]
        if columns != ['sample_id', 'label']:
            raise DataError(f"{path}:1: 表头必须为 sample_id,label，实际: {','.join(columns)}")

        labels = []
        for row_number, value in enumerate(frame.iloc[:, 1].tolist(), start=2):
            try:
                labels.append(int(str(value).strip()))
            except ValueError:
                raise DataError(f"{path}:{row_number}: 标签不是整数: {value!r}")
        labels = np.array(labels, dtype=np.int64)
        if class_names is None:
            n_classes = int(labels.max()) + 1 if len(labels) else 2
            class_names = PAN_INFECTION_CLASSES if n_classes == 3 else (
                BINARY_CLASSES if n_classes <= 2 else [f'class_{i}' for i in range(n_classes)])
        return LabelVector(sample_ids=[s.strip() for s in frame.iloc[:, 0].tolist()],
                           labels=labels, class_names=list(class_names))

    @staticmethod
    def align_labels(labels: LabelVector, sample_ids: Sequence[str]) -> LabelVector:
        """
        把标签重排为表达矩阵的样本顺序

        Raises:
            DataError: 两侧样本集合不一致
        """
        index = {s: i for i, s in enumerate(labels.sample_ids)}
        missing = [s for s in sample_ids if s not in index]
        extra = sorted(set(labels.sample_ids) - set(sample_ids))
        if missing or extra:
            raise DataError(
                f"标签与表达矩阵样本不一致，缺少标签: {', '.join(missing[:10]) or '无'}；"
                f"多余标签: {', '.join(extra[:10]) or '无'}")
        order = [index[s] for s in sample_ids]
        return LabelVector(sample_ids=list(sample_ids), labels=labels.labels[order],
                           class_names=list(labels.class_names))

    @staticmethod
    def read_gmt(path: PathLike) -> PathwayCatalog:
        """
        读取 GMT 通路文件

        Raises:
            DataError: 字段少于 3 个、基因列表为空、通路名重复，附行号
        """
        path = _require_file(path)
        pathways: Dict[str, List[str]] = {}
        descriptions: Dict[str, str] = {}
        with open(path, encoding='utf-8', newline=None) as f:
            for line_number, line in enumerate(f, start=1):
                line = line.rstrip('\r\n')
                if not line.strip():
                    continue
                fields = line.split('\t')
                if len(fields) < 3:
                    raise DataError(f"{path}:{line_number}: GMT 行至少需要 3 个制表符分隔字段")
                name, description = fields[0].strip(), fields[1]
                genes = list(dict.fromkeys(g.strip() for g in fields[2:] if g.strip()))
                if not genes:
                    raise DataError(f"{path}:{line_number}: 通路 {name} 的基因列表为空")
                if name in pathways:
                    raise DataError(f"{path}:{line_number}: 通路名重复: {name}")
                pathways[name] = genes
                descriptions[name] = description
        logger.debug("读取通路 %s: %d 条", path, len(pathways))
        return PathwayCatalog(pathways=pathways, descriptions=descriptions)

    @staticmethod
    def read_panel(path: PathLike) -> DgpPanel:
        path = _require_file(path)
        frame = pd.read_csv(path, dtype={'g1': str, 'g2': str, 'pathway': str})
        missing = [c for c in PANEL_COLUMNS if c not in frame.columns]
        if missing:
            raise DataError(f"{path}: 面板文件缺少列: {', '.join(missing)}")
        return DgpPanel.from_records(frame.to_dict(orient='records'))

    @staticmethod
    def write_expression(expr: ExpressionMatrix, path: PathLike) -> None:
        path = Path(path)
        frame = pd.DataFrame(expr.values, columns=expr.sample_ids)
        frame.insert(0, 'gene_id', expr.gene_ids)
        atomic_write_text(path, frame.to_csv(sep=_separator(path), index=False,
                                             float_format='%.17g', lineterminator='\n'))

    @staticmethod
    def write_labels(labels: LabelVector, path: PathLike) -> None:
        frame = pd.DataFrame({'sample_id': labels.sample_ids, 'label': labels.labels})
        atomic_write_text(path, frame.to_csv(index=False, lineterminator='\n'))

    @staticmethod
    def write_gmt(catalog: PathwayCatalog, path: PathLike) -> None:
        lines = ['\t'.join([name, catalog.descriptions.get(name, 'na'), *genes])
                 for name, genes in catalog.pathways.items()]
        atomic_write_text(path, '\n'.join(lines) + '\n')

    @staticmethod
    def write_panel(panel: DgpPanel, path: PathLike) -> None:
        frame = pd.DataFrame(panel.to_records(), columns=PANEL_COLUMNS)
        atomic_write_text(path, frame.to_csv(index=False, float_format='%.17g', lineterminator='\n'))

    @staticmethod
    def write_json(data: Any, path: PathLike) -> None:
        atomic_write_text(path, json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + '\n')

    @staticmethod
    def generate_synthetic(cfg: SynthConfig) -> SyntheticData:
        """
        生成合成表达数据

        背景表达为独立同分布对数正态。对每个植入基因对 (g1, g2)：富集类别的样本以
        1 - flip_noise 的概率呈现 g1 > g2，其余样本以 flip_noise 的概率呈现，
        通过交换两个值强制方向。多分类时一部分植入对在所有感染类别富集，其余按类别分配。
        通路把植入基因与诱饵基因混合分组。

        Args:
            cfg: 合成配置

        Returns:
            SyntheticData: 表达矩阵、标签、通路与植入真值（由 cfg 唯一确定）
        """
        cfg.validate()
        rng = derive_rng(cfg.seed, 'synthetic')
        n_total = cfg.n_samples * cfg.n_classes
        width = len(str(cfg.n_genes - 1))
        gene_ids = [f"G{i:0{width}d}" for i in range(cfg.n_genes)]
        sample_ids = [f"S{i:0{len(str(n_total - 1))}d}" for i in range(n_total)]
        labels = np.repeat(np.arange(cfg.n_classes), cfg.n_samples)

        values = rng.lognormal(mean=2.0, sigma=1.0, size=(cfg.n_genes, n_total))

        gene_order = rng.permutation(cfg.n_genes)
        planted_genes = gene_order[:2 * cfg.planted_pairs].reshape(-1, 2)
        n_shared = cfg.planted_pairs if cfg.n_classes == 2 else int(round(cfg.shared_fraction * cfg.planted_pairs))
        planted = []
        for index, (i1, i2) in enumerate(planted_genes):
            if index < n_shared:
                enriched = list(range(1, cfg.n_classes))
            else:
                enriched = [1 + (index - n_shared) % (cfg.n_classes - 1)]
            in_case = np.isin(labels, enriched)
            probability = np.where(in_case, 1.0 - cfg.flip_noise, cfg.flip_noise)
            want_greater = rng.random(n_total) < probability
            x, y = values[i1].copy(), values[i2].copy()
            high, low = np.maximum(x, y), np.minimum(x, y)
            values[i1] = np.where(want_greater, high, low)
            values[i2] = np.where(want_greater, low, high)
            planted.append({'g1': gene_ids[i1], 'g2': gene_ids[i2], 'enriched_classes': enriched})

        pathway_of_gene = np.empty(cfg.n_genes, dtype=np.int64)
        pathway_of_gene[gene_order] = np.arange(cfg.n_genes) % cfg.n_pathways
        for i1, i2 in planted_genes:
            pathway_of_gene[i2] = pathway_of_gene[i1]
        pathways = {}
        for p in range(cfg.n_pathways):
            members = [gene_ids[g] for g in range(cfg.n_genes) if pathway_of_gene[g] == p]
            if len(members) >= 2:
                pathways[f"PATHWAY_{p:03d}"] = members

        class_names = PAN_INFECTION_CLASSES if cfg.n_classes == 3 else (
            BINARY_CLASSES if cfg.n_classes == 2 else [f'class_{i}' for i in range(cfg.n_classes)])
        return SyntheticData(
            expression=ExpressionMatrix(gene_ids=gene_ids, sample_ids=sample_ids, values=values),
            labels=LabelVector(sample_ids=sample_ids, labels=labels, class_names=list(class_names)),
            catalog=PathwayCatalog(pathways=pathways,
                                   descriptions={name: 'synthetic' for name in pathways}),
            planted=planted
        )

    @staticmethod
    def make_dataset(features: np.ndarray, labels: LabelVector) -> Dataset:
        return Dataset(features=features, labels=labels.labels, sample_ids=labels.sample_ids,
                       class_names=labels.class_names)

    @staticmethod
    def task_subset(dataset: Dataset, positive_classes: Sequence[int],
                    negative_classes: Sequence[int] = (0,),
                    class_names: Sequence[str] = None) -> Dataset:
        """
        从多分类数据集中派生二分类任务（例如 健康 vs 细菌感染）

        Raises:
            ParameterError: 正负类别有交集或为空
        """
        positive, negative = set(positive_classes), set(negative_classes)
        if not positive or not negative or positive & negative:
            raise ParameterError(f"正负类别必须非空且互不相交: {sorted(positive)} / {sorted(negative)}")
        keep = np.flatnonzero(np.isin(dataset.labels, list(positive | negative)))
        subset = dataset.subset(keep)
        subset.labels = np.isin(subset.labels, list(positive)).astype(np.int64)
        if class_names is None:
            class_names = ['+'.join(dataset.class_names[c] for c in sorted(negative)),
                           '+'.join(dataset.class_names[c] for c in sorted(positive))]
        subset.class_names = list(class_names)
        return subset

    @staticmethod
    def stratified_split_indices(labels: np.ndarray, train_fraction: float,
                                 seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        分层划分的样本下标

        Raises:
            ParameterError: 比例不在 (0, 1) 内
            DataError: 某类别样本少于 2 个
        """
        if not 0.0 < train_fraction < 1.0:
            raise ParameterError(f"训练集比例必须在 (0, 1) 内，实际: {train_fraction}")
        labels = np.asarray(labels)
        rng = derive_rng(seed, 'split')
        train, val = [], []
        for cls in np.unique(labels):
            members = np.flatnonzero(labels == cls)
            if len(members) < 2:
                raise DataError(f"类别 {cls} 只有 {len(members)} 个样本，无法分层划分")
            members = rng.permutation(members)
            n_train = int(round(train_fraction * len(members)))
            n_train = min(max(n_train, 1), len(members) - 1)
            train.extend(members[:n_train])
            val.extend(members[n_train:])
        return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))

    @staticmethod
    def stratified_split(dataset: Dataset, train_fraction: float = 0.8,
                         seed: int = 0) -> Tuple[Dataset, Dataset]:
        """按类别比例把数据集划分为训练集与验证集，同一种子结果相同"""
        train_idx, val_idx = DataService.stratified_split_indices(dataset.labels, train_fraction, seed)
        return dataset.subset(train_idx), dataset.subset(val_idx)

