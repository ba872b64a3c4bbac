"""
训练服务 - AdamW、蒸馏损失与交叉熵、教师训练与学生蒸馏

蒸馏损失（每个样本，n 为类别数，随后对批次取平均）：
- kl:       Σᵢ qᵢ·(ln qᵢ − pᵢ) / (n·τ²)
- verbatim: Σᵢ qᵢ·(qᵢ − pᵢ) / (n·τ²)
其中 qᵢ 为教师在温度 τ 下的软目标，pᵢ 为学生在温度 τ 下的 log-softmax。
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Union

import numpy as np

from models.genomics import Dataset
from models.network import ModelInstance, ModelSpec, build_model, forward
from services.data_service import DataService
from utils import tensor as T
from utils.errors import (
    ConfigError,
    DataError,
    ParameterError,
    ShapeError
)
from utils.metrics import (
    multiclass_accuracy,
    one_vs_rest,
    roc_auc
)
from utils.rng import derive_rng

logger = logging.getLogger(__name__)

KD_FORMS = ('kl', 'verbatim')

LossValue = Union[float, T.Node]


# ==================== AdamW ====================

@dataclass
class AdamWState:
    """AdamW 优化器状态：一阶/二阶矩、步数与超参数"""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ParameterError(f"学习率不能为负，实际: {self.lr}")
        for name in ('beta1', 'beta2'):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ParameterError(f"{name} 必须在 [0, 1) 内，实际: {value}")
        if not self.eps > 0:
            raise ParameterError(f"eps 必须为正，实际: {self.eps}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay 不能为负，实际: {self.weight_decay}")


def adamw_step(state: AdamWState, params: Mapping[str, T.Node],
               grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """
    执行一步 AdamW 更新（原地修改参数值）

    先做解耦权重衰减 w ← w − lr·wd·w，再做带偏差修正的 Adam 更新。

    Args:
        state: 优化器状态，步数加 1
        params: 名称到参数节点的映射
        grads: 名称到梯度的映射，缺省时使用各节点的 grad

    Raises:
        ShapeError: 梯度或矩与参数形状不一致
    """
    if grads is None:
        grads = {name: node.grad for name, node in params.items()}
    for name, node in params.items():
        if name not in grads:
            raise ShapeError(f"缺少参数 {name} 的梯度")
        if np.shape(grads[name]) != node.shape:
            raise ShapeError(f"参数 {name} 形状 {node.shape} 与梯度形状 {np.shape(grads[name])} 不一致")
        if name in state.m and state.m[name].shape != node.shape:
            raise ShapeError(f"参数 {name} 的一阶矩形状 {state.m[name].shape} 与参数不一致")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, node in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(node.value)
            v = np.zeros_like(node.value)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v

        w = node.value
        if state.weight_decay:
            w = w - state.lr * state.weight_decay * w
        node.value = w - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


# ==================== 损失函数 ====================

def soft_targets(teacher_logits, temperature: float) -> np.ndarray:
    """
    教师软目标：温度 τ 下的行 softmax

    Raises:
        ParameterError: τ ≤ 0
    """
    logits = teacher_logits.value if isinstance(teacher_logits, T.Node) else teacher_logits
    return T.softmax_rows(T.constant(logits), temperature).value


def class_map_matrix(name: str, teacher_classes: int, student_classes: int) -> np.ndarray:
    """
    教师类别概率到学生类别概率的聚合矩阵（teacher_classes × student_classes）

    - infected: 学生 0 = 教师 0（健康），学生 1 = 其余所有感染类别之和
    - identity: 类别数相同时一一对应
    - 't:s,...': 自定义映射，例如 '0:0,1:1,2:1'

    Raises:
        ConfigError: 未知映射、映射不完整或输出宽度与学生类别数不一致
    """
    matrix = np.zeros((teacher_classes, student_classes))
    if name == 'infected':
        if student_classes != 2:
            raise ConfigError(f"infected 映射输出 2 类，学生类别数为 {student_classes}")
        matrix[0, 0] = 1.0
        matrix[1:, 1] = 1.0
        return matrix
    if name == 'identity':
        if teacher_classes != student_classes:
            raise ConfigError(
                f"identity 映射要求类别数相同: 教师 {teacher_classes}，学生 {student_classes}")
        return np.eye(teacher_classes)

    try:
        pairs = [tuple(int(x) for x in item.split(':')) for item in name.split(',')]
    except ValueError:
        raise ConfigError(f"无法解析类别映射: {name}")
    mapped = set()
    for pair in pairs:
        if len(pair) != 2:
            raise ConfigError(f"类别映射项格式应为 教师:学生，实际: {name}")
        t, s = pair
        if not 0 <= t < teacher_classes or t in mapped:
            raise ConfigError(f"类别映射中的教师类别 {t} 越界或重复")
        if not 0 <= s < student_classes:
            raise ConfigError(f"类别映射输出类别 {s} 超出学生类别数 {student_classes}")
        matrix[t, s] = 1.0
        mapped.add(t)
    if len(mapped) != teacher_classes:
        raise ConfigError(f"类别映射未覆盖全部 {teacher_classes} 个教师类别: {name}")
    return matrix


def _check_kd_form(kd_form: str) -> None:
    if kd_form not in KD_FORMS:
        raise ConfigError(f"未知蒸馏损失形式: {kd_form}，可选 {KD_FORMS}")


def distill_loss_from_targets(targets: np.ndarray, student_logits: T.Node,
                              temperature: float, kd_form: str = 'kl') -> T.Node:
    """
    给定软目标 q 的蒸馏损失，梯度只流向学生 logits

    Raises:
        ShapeError: q 与学生 logits 形状不一致
    """
    _check_kd_form(kd_form)
    q = np.asarray(targets, dtype=np.float64)
    if q.shape != student_logits.shape:
        raise ShapeError(f"软目标形状 {q.shape} 与学生 logits 形状 {student_logits.shape} 不一致")
    tau = float(temperature)
    log_p = T.log_softmax_rows(student_logits, tau)
    batch, n = q.shape
    norm = 1.0 / (batch * n * tau * tau)

    if kd_form == 'kl':
        positive = q > 0
        own = float(np.sum(q[positive] * np.log(q[positive])))
    else:
        own = float(np.sum(q * q))
    cross = T.sum_all(T.mul(T.constant(q), log_p))
    return T.scale(T.sub(T.constant(own), cross), norm)


def distill_loss(teacher_logits, student_logits: T.Node, temperature: float,
                 kd_form: str = 'kl', class_map: Optional[np.ndarray] = None) -> T.Node:
    """
    蒸馏损失

    Args:
        teacher_logits: 教师 logits（数组或节点，均视为常量）
        student_logits: 学生 logits 节点
        temperature: 温度 τ
        kd_form: 'kl' 或 'verbatim'
        class_map: 可选的教师→学生类别聚合矩阵，作用于软化后的教师概率

    Raises:
        ShapeError: 形状不一致
        ParameterError: τ ≤ 0
    """
    logits = teacher_logits.value if isinstance(teacher_logits, T.Node) else T.as_tensor(teacher_logits)
    if logits.shape[0] != student_logits.rows:
        raise ShapeError(f"教师批次 {logits.shape[0]} 与学生批次 {student_logits.rows} 不一致")
    q = soft_targets(logits, temperature)
    if class_map is not None:
        q = q @ class_map
    return distill_loss_from_targets(q, student_logits, temperature, kd_form)


def _one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != num_classes:
            raise ShapeError(f"one-hot 标签宽度 {labels.shape[1]} 与类别数 {num_classes} 不一致")
        return labels.astype(np.float64)
    labels = labels.astype(np.int64).reshape(-1)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ParameterError(f"类别下标超出范围 [0, {num_classes})")
    encoded = np.zeros((len(labels), num_classes))
    encoded[np.arange(len(labels)), labels] = 1.0
    return encoded


def cross_entropy(student_logits: T.Node, labels) -> T.Node:
    """
    交叉熵：批次内 −log softmax(真实类别) 的平均值

    Args:
        student_logits: batch×C logits
        labels: 类别下标或 one-hot

    Raises:
        ParameterError: 类别下标越界
        ShapeError: 标签数量与批次不一致
    """
    target = _one_hot(labels, student_logits.cols)
    if target.shape[0] != student_logits.rows:
        raise ShapeError(f"标签数 {target.shape[0]} 与批次 {student_logits.rows} 不一致")
    log_p = T.log_softmax_rows(student_logits)
    return T.scale(T.sum_all(T.mul(T.constant(target), log_p)), -1.0 / student_logits.rows)


def total_loss(l_distill: LossValue, l_ce: LossValue, w_distill: float, w_ce: float) -> LossValue:
    """加权总损失 w_distill·L_distill + w_ce·L_ce，输入为节点时返回节点"""
    if not isinstance(l_distill, T.Node) and not isinstance(l_ce, T.Node):
        return w_distill * float(l_distill) + w_ce * float(l_ce)
    d = l_distill if isinstance(l_distill, T.Node) else T.constant(l_distill)
    c = l_ce if isinstance(l_ce, T.Node) else T.constant(l_ce)
    return T.add(T.scale(d, w_distill), T.scale(c, w_ce))


# ==================== 训练配置 ====================

@dataclass
class TrainHyper:
    """训练超参数"""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 100
    train_fraction: float = 0.8

    def validate(self) -> 'TrainHyper':
        if self.batch_size < 1:
            raise ConfigError(f"batch_size 至少为 1，实际: {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs 至少为 1，实际: {self.epochs}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"训练集比例必须在 (0, 1) 内，实际: {self.train_fraction}")
        try:
            self.optimizer()
        except ParameterError as e:
            raise ConfigError(str(e))
        return self

    def optimizer(self) -> AdamWState:
        return AdamWState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                          weight_decay=self.weight_decay)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class DistillConfig:
    """蒸馏配置"""

    temperature: float = 5.0
    w_distill: float = 0.2
    w_ce: float = 0.8
    kd_form: str = 'kl'
    class_map: str = 'infected'

    def validate(self) -> 'DistillConfig':
        if not self.temperature > 0:
            raise ConfigError(f"温度必须为正，实际: {self.temperature}")
        if self.w_distill < 0 or self.w_ce < 0:
            raise ConfigError(f"损失权重不能为负: w_distill={self.w_distill}, w_ce={self.w_ce}")
        _check_kd_form(self.kd_form)
        return self

    @property
    def vanilla(self) -> bool:
        return self.w_distill == 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainRun:
    """一次训练的结果：模型、逐轮记录与复现信息"""

    seed: int
    epochs: int
    batch_size: int
    trace: List[Dict[str, Any]]
    model: ModelInstance
    best_epoch: int
    wall_clock: float
    hyper: TrainHyper
    train_indices: np.ndarray
    val_indices: np.ndarray
    val_sample_ids: List[str] = field(default_factory=list)
    distill: Optional[DistillConfig] = None
    checkpoint_path: Optional[str] = None

    def losses(self) -> List[float]:
        return [entry['train_loss'] for entry in self.trace]

    def to_manifest(self) -> Dict[str, Any]:
        return {
            'seed': self.seed,
            'spec': self.model.spec.to_dict(),
            'hyperparameters': self.hyper.to_dict(),
            'distill': self.distill.to_dict() if self.distill else None,
            'epochs': self.epochs,
            'batch_size': self.batch_size,
            'trace': self.trace,
            'best_epoch': self.best_epoch,
            'wall_clock_seconds': self.wall_clock,
            'val_sample_ids': list(self.val_sample_ids),
            'checkpoint': self.checkpoint_path
        }


# ==================== 训练循环 ====================

BatchLoss = Callable[[np.ndarray, T.Node], T.Node]


def _validation_metrics(model: ModelInstance, val: Dataset) -> Dict[str, Optional[float]]:
    if len(val) == 0:
        return {'val_loss': None, 'val_acc': None, 'val_auc': None}
    was_training = model.training
    model.eval()
    try:
        logits = forward(model, val.features)
        loss = cross_entropy(logits, val.labels).item()
    finally:
        model.training = was_training
    aucs = []
    classes = range(1, 2) if logits.cols == 2 else range(logits.cols)
    for cls in classes:
        scored = one_vs_rest(logits.value, val.labels, cls)
        if 0 < scored.n_positive < len(scored.labels):
            aucs.append(roc_auc(scored).auc)
    return {
        'val_loss': loss,
        'val_acc': multiclass_accuracy(logits.value, val.labels),
        'val_auc': float(np.mean(aucs)) if aucs else None
    }


def _fit(model: ModelInstance, train: Dataset, val: Dataset, hyper: TrainHyper,
         seed: int, batch_loss: BatchLoss, tag: str) -> Dict[str, Any]:
    """
    小批量训练循环，每轮按 'batches' 随机流打乱训练样本

    Returns:
        dict: trace、best_epoch、wall_clock
    """
    state = hyper.optimizer()
    batch_rng = derive_rng(seed, 'batches')
    n = len(train)
    trace: List[Dict[str, Any]] = []
    started = time.perf_counter()

    for epoch in range(1, hyper.epochs + 1):
        model.train()
        order = batch_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            T.zero_grad(model.parameters())
            logits = forward(model, train.features[idx])
            loss = batch_loss(idx, logits)
            T.backward(loss)
            adamw_step(state, model.params)
            epoch_loss += loss.item() * len(idx)

        entry = {'epoch': epoch, 'train_loss': epoch_loss / n}
        entry.update(_validation_metrics(model, val))
        trace.append(entry)
        logger.info("[%s] epoch %d/%d train_loss=%.4f val_loss=%s val_acc=%s val_auc=%s",
                    tag, epoch, hyper.epochs, entry['train_loss'],
                    _fmt(entry['val_loss']), _fmt(entry['val_acc']), _fmt(entry['val_auc']))

    model.eval()
    scored = [(e['val_loss'], e['epoch']) for e in trace if e['val_loss'] is not None]
    best_epoch = min(scored)[1] if scored else hyper.epochs
    return {'trace': trace, 'best_epoch': best_epoch,
            'wall_clock': time.perf_counter() - started}


def _fmt(value: Optional[float]) -> str:
    return 'n/a' if value is None else f"{value:.4f}"


def _check_training_data(data: Dataset, spec: ModelSpec) -> None:
    if len(data) == 0:
        raise DataError("训练数据为空")
    if data.features.shape[1] != spec.num_features:
        raise ShapeError(f"特征宽度 {data.features.shape[1]} 与模型特征数 {spec.num_features} 不一致")
    if np.any(data.labels < 0) or np.any(data.labels >= spec.num_classes):
        raise DataError(f"标签超出模型类别范围 [0, {spec.num_classes})")


def _check_classes_present(train: Dataset, num_classes: int) -> None:
    absent = sorted(set(range(num_classes)) - set(np.unique(train.labels).tolist()))
    if absent:
        names = [train.class_names[c] if c < len(train.class_names) else str(c) for c in absent]
        raise DataError(f"训练集中缺少类别: {', '.join(names)}")


def _split(data: Dataset, hyper: TrainHyper, seed: int):
    train_idx, val_idx = DataService.stratified_split_indices(data.labels, hyper.train_fraction, seed)
    return train_idx, val_idx


def _teacher_source(teacher: Optional[ModelInstance], data: Dataset, cfg: DistillConfig,
                    teacher_features: Optional[np.ndarray]) -> Optional[np.ndarray]:
    """教师输入特征（与 data 行对齐）；vanilla 时返回 None"""
    if cfg.vanilla:
        return None
    if teacher is None:
        raise ConfigError("w_distill > 0 时必须提供教师模型")
    source = data.features if teacher_features is None else np.asarray(teacher_features, dtype=np.float64)
    if source.shape[0] != len(data):
        raise ShapeError(f"教师特征行数 {source.shape[0]} 与数据样本数 {len(data)} 不一致")
    if source.shape[1] != teacher.spec.num_features:
        raise ShapeError(
            f"教师特征宽度 {source.shape[1]} 与教师特征数 {teacher.spec.num_features} 不一致")
    return source


def _distill_fit(spec: ModelSpec, teacher: Optional[ModelInstance], train: Dataset, val: Dataset,
                 cfg: DistillConfig, hyper: TrainHyper, seed: int,
                 train_source: Optional[np.ndarray], tag: str):
    targets = None
    if train_source is not None:
        targets = TrainService.teacher_soft_targets(teacher, train_source, cfg, spec.num_classes)
    labels = train.labels

    def batch_loss(idx: np.ndarray, logits: T.Node) -> T.Node:
        l_ce = cross_entropy(logits, labels[idx])
        if targets is None:
            return T.scale(l_ce, cfg.w_ce)
        l_distill = distill_loss_from_targets(targets[idx], logits, cfg.temperature, cfg.kd_form)
        return total_loss(l_distill, l_ce, cfg.w_distill, cfg.w_ce)

    model = build_model(spec, derive_rng(seed, 'init'), derive_rng(seed, 'dropout'))
    return model, _fit(model, train, val, hyper, seed, batch_loss, tag)


class TrainService:
    """训练服务类 - 教师训练、学生蒸馏与按折训练"""

    @staticmethod
    def train_classifier(spec: ModelSpec, train: Dataset, val: Dataset, hyper: TrainHyper,
                         seed: int, tag: str = 'train') -> ModelInstance:
        """
        在给定划分上用交叉熵训练一个模型（k 折交叉验证中按折调用）

        Returns:
            ModelInstance: 推理模式的模型
        """
        hyper.validate()
        _check_training_data(train, spec)
        model = build_model(spec, derive_rng(seed, 'init'), derive_rng(seed, 'dropout'))
        labels = train.labels
        _fit(model, train, val, hyper, seed, lambda idx, logits: cross_entropy(logits, labels[idx]), tag)
        return model

    @staticmethod
    def train_teacher(data: Dataset, spec: ModelSpec, hyper: TrainHyper, seed: int) -> TrainRun:
        """
        在多分类数据上训练教师模型

        按 train_fraction 分层划分训练/验证集，以 AdamW 最小化交叉熵。
        同一种子下结果逐位可复现。

        Args:
            data: 特征与类别标签（健康/细菌/病毒）
            spec: 教师结构
            hyper: 训练超参数
            seed: 随机种子

        Returns:
            TrainRun: 训练记录，模型为最后一轮的权重

        Raises:
            DataError: 数据为空或训练集缺少某个类别
        """
        hyper.validate()
        _check_training_data(data, spec)
        train_idx, val_idx = _split(data, hyper, seed)
        train, val = data.subset(train_idx), data.subset(val_idx)
        _check_classes_present(train, spec.num_classes)

        logger.info("训练教师模型: 训练样本 %d，验证样本 %d，seed=%d", len(train), len(val), seed)
        model = build_model(spec, derive_rng(seed, 'init'), derive_rng(seed, 'dropout'))
        labels = train.labels
        result = _fit(model, train, val, hyper, seed,
                      lambda idx, logits: cross_entropy(logits, labels[idx]), 'teacher')
        return TrainRun(seed=seed, epochs=hyper.epochs, batch_size=hyper.batch_size, model=model,
                        hyper=hyper, train_indices=train_idx, val_indices=val_idx,
                        val_sample_ids=val.sample_ids, **result)

    @staticmethod
    def teacher_soft_targets(teacher: ModelInstance, features: np.ndarray, cfg: DistillConfig,
                             student_classes: int) -> np.ndarray:
        """
        教师在推理模式下的软目标，经类别映射聚合到学生类别

        Raises:
            ConfigError: 类别映射输出宽度与学生类别数不一致
        """
        matrix = class_map_matrix(cfg.class_map, teacher.spec.num_classes, student_classes)
        was_training = teacher.training
        teacher.eval()
        try:
            logits = forward(teacher, features).value
        finally:
            teacher.training = was_training
        return soft_targets(logits, cfg.temperature) @ matrix

    @staticmethod
    def distill_student(student_spec: ModelSpec, teacher: Optional[ModelInstance], data: Dataset,
                        cfg: DistillConfig, hyper: TrainHyper, seed: int,
                        teacher_features: Optional[np.ndarray] = None) -> TrainRun:
        """
        知识蒸馏训练学生模型

        每个批次：教师前向（无梯度）→ 类别映射 → 温度 τ 下的软目标，
        学生按 w_distill·L_distill + w_ce·L_ce 更新。w_distill 为 0 时不使用教师，
        与普通训练（vanilla）逐位一致。

        Args:
            student_spec: 学生结构
            teacher: 训练好的教师；vanilla 训练时可为 None
            data: 学生任务的特征与二分类标签
            cfg: 蒸馏配置
            hyper: 训练超参数
            seed: 随机种子
            teacher_features: 教师输入特征（与 data 行对齐），学生使用独立面板时提供

        Returns:
            TrainRun: 训练记录

        Raises:
            ConfigError: 类别映射宽度与学生类别数不一致，或非 vanilla 训练缺少教师
            ShapeError: 教师特征与教师结构或数据不匹配
        """
        cfg.validate()
        hyper.validate()
        _check_training_data(data, student_spec)
        train_idx, val_idx = _split(data, hyper, seed)
        train, val = data.subset(train_idx), data.subset(val_idx)
        _check_classes_present(train, student_spec.num_classes)
        source = _teacher_source(teacher, data, cfg, teacher_features)

        logger.info("训练学生模型 (%s, %s): 训练样本 %d，验证样本 %d，seed=%d",
                    student_spec.kind, 'vanilla' if cfg.vanilla else f"τ={cfg.temperature}",
                    len(train), len(val), seed)
        model, result = _distill_fit(student_spec, teacher, train, val, cfg, hyper, seed,
                                     None if source is None else source[train_idx],
                                     'vanilla' if cfg.vanilla else 'distill')
        return TrainRun(seed=seed, epochs=hyper.epochs, batch_size=hyper.batch_size, model=model,
                        hyper=hyper, train_indices=train_idx, val_indices=val_idx,
                        val_sample_ids=val.sample_ids, distill=cfg, **result)

    @staticmethod
    def distill_classifier(student_spec: ModelSpec, teacher: Optional[ModelInstance], train: Dataset,
                           val: Dataset, cfg: DistillConfig, hyper: TrainHyper, seed: int,
                           teacher_features: Optional[np.ndarray] = None,
                           tag: str = 'distill') -> ModelInstance:
        """
        在给定划分上按蒸馏目标训练学生（k 折交叉验证中按折调用）

        与 distill_student 使用同一目标，只是不再内部划分数据。

        Args:
            teacher_features: 教师输入特征，与 train 行对齐

        Returns:
            ModelInstance: 推理模式的模型
        """
        cfg.validate()
        hyper.validate()
        _check_training_data(train, student_spec)
        source = _teacher_source(teacher, train, cfg, teacher_features)
        model, _ = _distill_fit(student_spec, teacher, train, val, cfg, hyper, seed, source, tag)
        return model
