"""
张量引擎模块 - 二维稠密张量运算与反向模式自动微分

计算图由 Node 组成：
- value: 二维 float64 数组（行主序）
- grad: 与 value 同形状的梯度，初始为 0
- parents: 输入节点
- backward 规则: 给定输出梯度，返回每个父节点的梯度贡献

所有运算均为 float64。注意力中的缩放因子使用每个头的宽度 d_k = d_model / heads。
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ConfigError, ParameterError, ShapeError, UsageError

GELU_COEFF = 0.044715
LAYER_NORM_EPS = 1e-5

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def as_tensor(data) -> np.ndarray:
    """
    转换为二维 float64 数组

    标量转为 1×1，一维数组转为 1×n 行向量。

    Raises:
        ShapeError: 维度超过 2
    """
    array = np.array(data, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"张量必须是二维的，实际维度: {array.ndim}")
    return array


class Node:
    """计算图节点"""

    def __init__(self, value, parents: Sequence['Node'] = (),
                 backward_rule: Callable = None, requires_grad: bool = False,
                 name: str = None):
        """
        初始化节点

        Args:
            value: 节点值（可转为二维数组的任意对象）
            parents: 父节点序列
            backward_rule: 反向规则，接收输出梯度，返回与 parents 对齐的梯度元组
            requires_grad: 叶子节点是否需要梯度
            name: 可选名称，用于报错与调试
        """
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        return float(self.value[0, 0])

    def __repr__(self):
        label = f" {self.name}" if self.name else ''
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str = None) -> Node:
    """创建可学习参数（叶子节点，需要梯度）"""
    return Node(data, requires_grad=True, name=name)


def constant(data, name: str = None) -> Node:
    """创建常量节点（不参与求导）"""
    return Node(data, requires_grad=False, name=name)


def detach(x: Node) -> Node:
    """切断梯度：返回与 x 同值的常量节点"""
    return Node(x.value, requires_grad=False, name=x.name)


def zero_grad(nodes: Iterable[Node]) -> None:
    for node in nodes:
        node.grad = np.zeros_like(node.value)


# ==================== 反向传播 ====================

def _topological_order(root: Node):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """
    从标量根节点执行反向传播

    梯度在本次调用内按逆拓扑序传播，最后累加到各节点的 grad 上，
    因此不清零而重复调用会精确地累加。

    Args:
        root: 值为 1×1 的根节点

    Raises:
        UsageError: 根节点不是标量
    """
    if root.shape != (1, 1):
        raise UsageError(f"backward 需要 1×1 的标量根节点，实际形状: {root.shape}")

    grads: Dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    order = _topological_order(root)
    for node in reversed(order):
        grad = grads.get(id(node))
        if grad is None or node.backward_rule is None:
            continue
        contributions = node.backward_rule(grad)
        for parent, contribution in zip(node.parents, contributions):
            if contribution is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + contribution
            else:
                grads[id(parent)] = contribution

    for node in order:
        grad = grads.get(id(node))
        if grad is not None:
            node.grad = node.grad + grad


# ==================== 基础运算 ====================

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Node, b: Node) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op} 形状不兼容: {a.shape} 与 {b.shape}")


def add(a: Node, b: Node) -> Node:
    """逐元素加法，支持行/列广播"""
    _check_broadcast('add', a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, (a, b), rule)


def sub(a: Node, b: Node) -> Node:
    _check_broadcast('sub', a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Node(a.value - b.value, (a, b), rule)


def mul(a: Node, b: Node) -> Node:
    """逐元素乘法，支持行/列广播"""
    _check_broadcast('mul', a, b)

    def rule(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Node(a.value * b.value, (a, b), rule)


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)
    return Node(a.value * factor, (a,), lambda g: (g * factor,))


def sum_all(a: Node) -> Node:
    """所有元素求和，输出 1×1"""
    return Node(a.value.sum(), (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def mean_all(a: Node) -> Node:
    count = a.value.size
    return Node(a.value.mean(), (a,), lambda g: (np.full(a.shape, g[0, 0] / count),))


def matmul(a: Node, b: Node) -> Node:
    """
    矩阵乘法 a[m×k] · b[k×n]

    Raises:
        ShapeError: 内维不一致，错误信息包含两侧形状
    """
    if a.cols != b.rows:
        raise ShapeError(f"matmul 形状不匹配: {a.shape} × {b.shape}")

    def rule(g):
        return g @ b.value.T, a.value.T @ g

    return Node(a.value @ b.value, (a, b), rule)


def linear(x: Node, weight: Node, bias: Optional[Node] = None) -> Node:
    """线性映射 x·W + b（行为样本/词元）"""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ==================== 激活与归一化 ====================

def _check_temperature(temperature: float) -> float:
    if not temperature > 0:
        raise ParameterError(f"温度必须为正数，实际: {temperature}")
    return float(temperature)


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_rows(x: Node, temperature: float = 1.0) -> Node:
    """
    按行计算带温度的 softmax：exp(x_ij/τ) / Σ_j exp(x_ij/τ)

    先减去行最大值保证数值稳定。

    Raises:
        ParameterError: 温度不为正
    """
    tau = _check_temperature(temperature)
    y = _stable_softmax(x.value / tau)

    def rule(g):
        return ((g - (g * y).sum(axis=1, keepdims=True)) * y / tau,)

    return Node(y, (x,), rule)


def log_softmax_rows(x: Node, temperature: float = 1.0) -> Node:
    """
    按行计算 log-softmax，以 z - logsumexp(z) 的稳定形式求得，
    不对已存储的 softmax 取对数
    """
    tau = _check_temperature(temperature)
    z = x.value / tau
    m = z.max(axis=1, keepdims=True)
    y = z - (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))

    def rule(g):
        return ((g - np.exp(y) * g.sum(axis=1, keepdims=True)) / tau,)

    return Node(y, (x,), rule)


def gelu(x: Node) -> Node:
    """GELU 的 tanh 近似：0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))"""
    v = x.value
    t = np.tanh(_SQRT_2_OVER_PI * (v + GELU_COEFF * v ** 3))
    y = 0.5 * v * (1.0 + t)

    def rule(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * du),)

    return Node(y, (x,), rule)


def relu(x: Node) -> Node:
    """ReLU，0 处次梯度取 0"""
    positive = x.value > 0
    return Node(np.where(positive, x.value, 0.0), (x,), lambda g: (g * positive,))


def layer_norm(x: Node, gain: Node, bias: Node, epsilon: float = LAYER_NORM_EPS) -> Node:
    """
    层归一化：逐行标准化（方差按 1/cols 计算）后做仿射变换

    Args:
        x: 输入 rows×cols
        gain: 1×cols 缩放参数
        bias: 1×cols 偏置参数
        epsilon: 方差平滑项

    Raises:
        ShapeError: gain/bias 宽度与 x 不一致
    """
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise ShapeError(
            f"layer_norm 宽度不匹配: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if not epsilon > 0:
        raise ParameterError(f"epsilon 必须为正数，实际: {epsilon}")

    centered = x.value - x.value.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + epsilon)
    x_hat = centered * inv_std

    def rule(g):
        d_hat = g * gain.value
        dx = inv_std * (d_hat
                        - d_hat.mean(axis=1, keepdims=True)
                        - x_hat * (d_hat * x_hat).mean(axis=1, keepdims=True))
        return dx, (g * x_hat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return Node(x_hat * gain.value + bias.value, (x, gain, bias), rule)


def dropout(x: Node, rate: float, training: bool, rng: np.random.Generator) -> Node:
    """
    Dropout：训练模式下每个元素以 rate 概率置零，保留值放大 1/(1-rate)；
    推理模式或 rate 为 0 时原样返回输入节点

    Raises:
        ParameterError: rate 不在 [0, 1) 内
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout 比例必须在 [0, 1) 内，实际: {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Node(x.value * mask, (x,), lambda g: (g * mask,))


# ==================== 词元与注意力 ====================

def token_embed(features: Node, weight: Node, position: Node) -> Node:
    """
    把每个基因对特征变成一个词元：token_bj = f_bj · E_j + B_j

    Args:
        features: batch×k 特征
        weight: k×d_model 词元向量 E
        position: k×d_model 位置偏置 B

    Returns:
        Node: (batch·k)×d_model，样本 b 的词元占据连续的 k 行
    """
    if weight.rows != features.cols or position.shape != weight.shape:
        raise ShapeError(
            f"token_embed 形状不匹配: features {features.shape}, "
            f"weight {weight.shape}, position {position.shape}")
    batch, k = features.shape
    width = weight.cols
    f = features.value
    out = f[:, :, None] * weight.value[None, :, :] + position.value[None, :, :]

    def rule(g):
        g3 = g.reshape(batch, k, width)
        return (np.einsum('bkd,kd->bk', g3, weight.value),
                np.einsum('bk,bkd->kd', f, g3),
                g3.sum(axis=0))

    return Node(out.reshape(batch * k, width), (features, weight, position), rule)


def mean_pool(x: Node, seq_len: int) -> Node:
    """按序列对词元取平均：(batch·seq_len)×d -> batch×d"""
    if seq_len < 1 or x.rows % seq_len:
        raise ShapeError(f"mean_pool: 行数 {x.rows} 不能被序列长度 {seq_len} 整除")
    batch = x.rows // seq_len

    def rule(g):
        return (np.repeat(g / seq_len, seq_len, axis=0),)

    return Node(x.value.reshape(batch, seq_len, x.cols).mean(axis=1), (x,), rule)


def _split_heads(a: np.ndarray, batch: int, seq_len: int, heads: int) -> np.ndarray:
    return a.reshape(batch, seq_len, heads, -1).transpose(0, 2, 1, 3)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    batch, heads, seq_len, head_dim = a.shape
    return a.transpose(0, 2, 1, 3).reshape(batch * seq_len, heads * head_dim)


def scaled_dot_attention(q: Node, k: Node, v: Node, heads: int,
                         seq_len: Optional[int] = None) -> Node:
    """
    多头缩放点积注意力：Z_h = softmax(Q_h·K_hᵀ / √d_k)·V_h，各头拼接

    q/k/v 的行是词元，若干条长度为 seq_len 的序列纵向堆叠，注意力只在序列内部计算。

    Raises:
        ConfigError: d_model 不能被头数整除
        ShapeError: q/k/v 形状不一致或行数不能被 seq_len 整除
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"注意力输入形状不一致: q {q.shape}, k {k.shape}, v {v.shape}")
    rows, d_model = q.shape
    if heads < 1 or d_model % heads:
        raise ConfigError(f"d_model={d_model} 不能被注意力头数 {heads} 整除")
    seq_len = rows if seq_len is None else seq_len
    if seq_len < 1 or rows % seq_len:
        raise ShapeError(f"注意力: 行数 {rows} 不能被序列长度 {seq_len} 整除")

    batch = rows // seq_len
    scale_factor = 1.0 / math.sqrt(d_model // heads)
    q4 = _split_heads(q.value, batch, seq_len, heads)
    k4 = _split_heads(k.value, batch, seq_len, heads)
    v4 = _split_heads(v.value, batch, seq_len, heads)
    weights = _stable_softmax(q4 @ k4.transpose(0, 1, 3, 2) * scale_factor)

    def rule(g):
        g4 = _split_heads(g, batch, seq_len, heads)
        d_weights = g4 @ v4.transpose(0, 1, 3, 2)
        d_scores = weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True))
        d_scores = d_scores * scale_factor
        return (_merge_heads(d_scores @ k4),
                _merge_heads(d_scores.transpose(0, 1, 3, 2) @ q4),
                _merge_heads(weights.transpose(0, 1, 3, 2) @ g4))

    return Node(_merge_heads(weights @ v4), (q, k, v), rule)


def self_attention(x: Node, weights: Mapping[str, Node], heads: int,
                   seq_len: Optional[int] = None) -> Node:
    """
    多头自注意力：Q=X·W^Q, K=X·W^K, V=X·W^V，各头注意力拼接后经 W^f 映射回原空间

    W^Q/W^K/W^V 为 d_model×d_model，第 h 个头使用第 h 段宽度为 d_k 的列。

    Args:
        x: (batch·seq_len)×d_model 输入
        weights: 键 w_q, w_k, w_v, w_o（必需）与 b_q, b_k, b_v, b_o（可选）
        heads: 头数
        seq_len: 序列长度，默认把 x 视为一条序列

    Returns:
        Node: 与 x 同形状的输出
    """
    if x.cols % heads:
        raise ConfigError(f"d_model={x.cols} 不能被注意力头数 {heads} 整除")
    q = linear(x, weights['w_q'], weights.get('b_q'))
    k = linear(x, weights['w_k'], weights.get('b_k'))
    v = linear(x, weights['w_v'], weights.get('b_v'))
    z = scaled_dot_attention(q, k, v, heads, seq_len)
    return linear(z, weights['w_o'], weights.get('b_o'))


# ==================== 梯度检查 ====================

@dataclass
class GradientReport:
    """梯度检查结果：每个参数的最大相对误差"""

    errors: Dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """相对误差 ‖a−n‖ / (‖a‖+‖n‖)，两者皆为 0 时返回 0"""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradient_check(fn: Callable[[], Node], params: Mapping[str, Node],
                   step: float = 1e-5, tol: float = 1e-4) -> GradientReport:
    """
    用中心差分检查自动微分梯度

    Args:
        fn: 无参函数，每次调用都从 params 重新构建计算图并返回标量根节点
        params: 名称到参数节点的映射
        step: 差分步长
        tol: 判定通过的相对误差上限

    Returns:
        GradientReport: 每个参数的相对误差
    """
    nodes = list(params.values())
    zero_grad(nodes)
    backward(fn())
    analytic = {name: node.grad.copy() for name, node in params.items()}

    report = GradientReport(tol=tol)
    for name, node in params.items():
        numeric = np.zeros_like(node.value)
        for index in np.ndindex(*node.shape):
            original = node.value[index]
            node.value[index] = original + step
            plus = fn().item()
            node.value[index] = original - step
            minus = fn().item()
            node.value[index] = original
            numeric[index] = (plus - minus) / (2.0 * step)
        report.errors[name] = relative_error(analytic[name], numeric)
    zero_grad(nodes)
    return report
