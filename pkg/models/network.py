"""
网络模型 - 教师模型与两种学生模型的结构定义、前向计算与参数统计

结构：
- teacher:    词元嵌入 → 块1（pre-norm 编码层×L1，GELU，dropout）→ 全连接扩展 d1→d2
              → 块2（编码层×L2，ReLU）→ 词元平均池化 → MLP 头（Linear→LN→GELU）→ logits
- student_tx: 词元嵌入 → 块1 → 池化 → MLP 头
- student_mlp: 特征 → (Linear→GELU)×n → logits

每个基因对特征是一个词元：token_j = f_j · E_j + B_j。
编码层内前馈宽度为 4·d_model。
"""
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from utils import tensor as T
from utils.errors import ConfigError, ParameterError, ShapeError

MODEL_KINDS = ('teacher', 'student_tx', 'student_mlp')
ACTIVATIONS = {'gelu': T.gelu, 'relu': T.relu}
FF_RATIO = 4
EMBED_STD = 0.02

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    'desk': {
        'teacher': dict(d_model_1=40, heads_1=5, encoder_layers_1=4, dropout_1=0.1,
                        d_model_2=80, heads_2=2, encoder_layers_2=2,
                        mlp_widths=[64], num_classes=3),
        'student_tx': dict(d_model_1=40, heads_1=5, encoder_layers_1=4, dropout_1=0.0,
                           mlp_widths=[64], num_classes=2),
        'student_mlp': dict(mlp_widths=[64, 32], num_classes=2)
    },
    'paper-scale': {
        'teacher': dict(d_model_1=350, heads_1=5, encoder_layers_1=4, dropout_1=0.1,
                        d_model_2=700, heads_2=2, encoder_layers_2=2,
                        mlp_widths=[512], num_classes=3),
        'student_tx': dict(d_model_1=350, heads_1=5, encoder_layers_1=4, dropout_1=0.0,
                           mlp_widths=[512], num_classes=2),
        'student_mlp': dict(mlp_widths=[1024, 512, 256], num_classes=2)
    }
}


@dataclass
class ModelSpec:
    """模型结构超参数"""

    kind: str
    num_features: int = 35
    d_model_1: int = 0
    heads_1: int = 0
    encoder_layers_1: int = 0
    dropout_1: float = 0.0
    d_model_2: int = 0
    heads_2: int = 0
    encoder_layers_2: int = 0
    mlp_widths: List[int] = field(default_factory=list)
    num_classes: int = 2
    activation_1: str = 'gelu'
    activation_2: str = 'relu'
    head_activation: str = 'gelu'

    def validate(self) -> 'ModelSpec':
        """
        校验结构约束

        Raises:
            ConfigError: 任一约束不满足
        """
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"未知模型类型: {self.kind}，可选 {MODEL_KINDS}")
        if self.num_features < 1:
            raise ConfigError(f"特征数至少为 1，实际: {self.num_features}")
        if self.num_classes < 2:
            raise ConfigError(f"类别数至少为 2，实际: {self.num_classes}")
        if any(w < 1 for w in self.mlp_widths):
            raise ConfigError(f"MLP 宽度必须为正: {self.mlp_widths}")
        for name in (self.activation_1, self.activation_2, self.head_activation):
            if name not in ACTIVATIONS:
                raise ConfigError(f"未知激活函数: {name}")

        if self.kind in ('teacher', 'student_tx'):
            self._validate_block(1, self.d_model_1, self.heads_1, self.encoder_layers_1)
            if not 0.0 <= self.dropout_1 < 1.0:
                raise ConfigError(f"dropout 比例必须在 [0, 1) 内，实际: {self.dropout_1}")
        if self.kind == 'teacher':
            self._validate_block(2, self.d_model_2, self.heads_2, self.encoder_layers_2)
        return self

    @staticmethod
    def _validate_block(index: int, d_model: int, heads: int, layers: int) -> None:
        if d_model < 1 or heads < 1 or layers < 1:
            raise ConfigError(f"块{index} 的宽度、头数与层数必须为正: d={d_model}, heads={heads}, layers={layers}")
        if d_model % heads:
            raise ConfigError(f"块{index} 的 d_model={d_model} 不能被头数 {heads} 整除")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelSpec':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        known['mlp_widths'] = [int(w) for w in known.get('mlp_widths', [])]
        return cls(**known).validate()


def preset_spec(preset: str, kind: str, num_features: int = 35,
                num_classes: Optional[int] = None, **overrides) -> ModelSpec:
    """
    按预设生成 ModelSpec

    Args:
        preset: 'desk' 或 'paper-scale'
        kind: 模型类型
        num_features: 面板大小 k
        num_classes: 覆盖预设类别数
        overrides: 其余字段覆盖

    Raises:
        ConfigError: 预设或类型不存在
    """
    if preset not in PRESETS:
        raise ConfigError(f"未知预设: {preset}，可选 {tuple(PRESETS)}")
    if kind not in PRESETS[preset]:
        raise ConfigError(f"未知模型类型: {kind}，可选 {MODEL_KINDS}")
    values = dict(PRESETS[preset][kind], kind=kind, num_features=num_features)
    values['mlp_widths'] = list(values.get('mlp_widths', []))
    if num_classes is not None:
        values['num_classes'] = num_classes
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ModelSpec(**values).validate()


# ==================== 参数形状 ====================

def _encoder_shapes(prefix: str, d: int) -> List[Tuple[str, Tuple[int, int]]]:
    hidden = FF_RATIO * d
    return [
        (f'{prefix}.ln1.gain', (1, d)), (f'{prefix}.ln1.bias', (1, d)),
        (f'{prefix}.attn.w_q', (d, d)), (f'{prefix}.attn.b_q', (1, d)),
        (f'{prefix}.attn.w_k', (d, d)), (f'{prefix}.attn.b_k', (1, d)),
        (f'{prefix}.attn.w_v', (d, d)), (f'{prefix}.attn.b_v', (1, d)),
        (f'{prefix}.attn.w_o', (d, d)), (f'{prefix}.attn.b_o', (1, d)),
        (f'{prefix}.ln2.gain', (1, d)), (f'{prefix}.ln2.bias', (1, d)),
        (f'{prefix}.ff1.weight', (d, hidden)), (f'{prefix}.ff1.bias', (1, hidden)),
        (f'{prefix}.ff2.weight', (hidden, d)), (f'{prefix}.ff2.bias', (1, d))
    ]


def _block_shapes(name: str, d: int, layers: int) -> List[Tuple[str, Tuple[int, int]]]:
    shapes = []
    for layer in range(layers):
        shapes.extend(_encoder_shapes(f'{name}.layer{layer}', d))
    shapes.extend([(f'{name}.ln_f.gain', (1, d)), (f'{name}.ln_f.bias', (1, d))])
    return shapes


def parameter_shapes(spec: ModelSpec) -> 'OrderedDict[str, Tuple[int, int]]':
    """按固定顺序列出模型的全部参数名与形状"""
    spec.validate()
    shapes: List[Tuple[str, Tuple[int, int]]] = []
    k, classes = spec.num_features, spec.num_classes

    if spec.kind == 'student_mlp':
        width = k
        for i, w in enumerate(spec.mlp_widths):
            shapes += [(f'mlp.fc{i}.weight', (width, w)), (f'mlp.fc{i}.bias', (1, w))]
            width = w
        shapes += [('mlp.out.weight', (width, classes)), ('mlp.out.bias', (1, classes))]
        return OrderedDict(shapes)

    d1 = spec.d_model_1
    shapes += [('embed.weight', (k, d1)), ('embed.position', (k, d1))]
    shapes += _block_shapes('block1', d1, spec.encoder_layers_1)
    width = d1
    if spec.kind == 'teacher':
        d2 = spec.d_model_2
        shapes += [('expand.weight', (d1, d2)), ('expand.bias', (1, d2))]
        shapes += _block_shapes('block2', d2, spec.encoder_layers_2)
        width = d2
    for i, w in enumerate(spec.mlp_widths):
        shapes += [(f'head.fc{i}.weight', (width, w)), (f'head.fc{i}.bias', (1, w)),
                   (f'head.ln{i}.gain', (1, w)), (f'head.ln{i}.bias', (1, w))]
        width = w
    shapes += [('head.out.weight', (width, classes)), ('head.out.bias', (1, classes))]
    return OrderedDict(shapes)


def parameter_names(spec: ModelSpec) -> List[str]:
    return list(parameter_shapes(spec))


def count_parameters(spec: ModelSpec) -> int:
    """
    参数总数的闭式计算（不构建模型）

    编码层: 12d² + 13d；块末层归一化: 2d；MLP 头每层: in·w + w + 2w
    """
    spec.validate()
    k, classes = spec.num_features, spec.num_classes

    def encoder(d):
        return 12 * d * d + 13 * d

    if spec.kind == 'student_mlp':
        total, width = 0, k
        for w in spec.mlp_widths:
            total += width * w + w
            width = w
        return total + width * classes + classes

    d1 = spec.d_model_1
    total = 2 * k * d1 + spec.encoder_layers_1 * encoder(d1) + 2 * d1
    width = d1
    if spec.kind == 'teacher':
        d2 = spec.d_model_2
        total += d1 * d2 + d2 + spec.encoder_layers_2 * encoder(d2) + 2 * d2
        width = d2
    for w in spec.mlp_widths:
        total += width * w + 3 * w
        width = w
    return total + width * classes + classes


def compression_ratio(student: int, teacher: int) -> float:
    """
    压缩率 1 - student/teacher

    Raises:
        ParameterError: 教师参数量不为正
    """
    if teacher <= 0:
        raise ParameterError(f"教师模型参数量必须为正，实际: {teacher}")
    return 1.0 - student / teacher


def format_parameters(number: int) -> str:
    """参数量格式化，例如 18.14 M"""
    if number >= 1_000_000_000:
        return f"{number / 1_000_000_000:.2f} B"
    if number >= 1_000_000:
        return f"{number / 1_000_000:.2f} M"
    if number >= 1_000:
        return f"{number / 1_000:.2f} K"
    return str(number)


def sgd_update(weight: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """
    朴素梯度下降一步：w - lr·grad

    Raises:
        ShapeError: 形状不一致
        ParameterError: 学习率不为正
    """
    weight, grad = np.asarray(weight, dtype=np.float64), np.asarray(grad, dtype=np.float64)
    if weight.shape != grad.shape:
        raise ShapeError(f"权重形状 {weight.shape} 与梯度形状 {grad.shape} 不一致")
    if not lr > 0:
        raise ParameterError(f"学习率必须为正，实际: {lr}")
    return weight - lr * grad


# ==================== 模型实例 ====================

class ModelInstance:
    """模型实例：结构、参数与运行模式"""

    def __init__(self, spec: ModelSpec, params: 'OrderedDict[str, T.Node]',
                 dropout_rng: np.random.Generator):
        self.spec = spec
        self.params = params
        self.dropout_rng = dropout_rng
        self.training = True

    @property
    def mode(self) -> str:
        return 'train' if self.training else 'eval'

    def train(self) -> 'ModelInstance':
        self.training = True
        return self

    def eval(self) -> 'ModelInstance':
        self.training = False
        return self

    def parameters(self) -> List[T.Node]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(node.value.size for node in self.params.values()))

    def state_arrays(self) -> 'OrderedDict[str, np.ndarray]':
        return OrderedDict((name, node.value.copy()) for name, node in self.params.items())

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, node in self.params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != node.shape:
                raise ShapeError(f"参数 {name} 形状 {value.shape} 与模型 {node.shape} 不符")
            node.value = value.copy()
            node.grad = np.zeros_like(node.value)


def _initial_value(name: str, shape: Tuple[int, int], fan_in: int,
                   rng: np.random.Generator) -> np.ndarray:
    if name.endswith('.gain'):
        return np.ones(shape)
    if '.ln' in name and name.endswith('.bias'):
        return np.zeros(shape)
    if name.startswith('embed.'):
        return rng.normal(0.0, EMBED_STD, size=shape)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_model(spec: ModelSpec, rng: np.random.Generator,
                dropout_rng: np.random.Generator = None) -> ModelInstance:
    """
    按结构构建模型并初始化参数

    初始化：线性映射权重与偏置 U(-1/√fan_in, 1/√fan_in)，嵌入 N(0, 0.02)，层归一化 gain=1、bias=0。

    Args:
        spec: 模型结构
        rng: 初始化随机数生成器
        dropout_rng: dropout 随机数生成器，默认由 rng 派生

    Returns:
        ModelInstance: 训练模式的模型实例

    Raises:
        ConfigError: 结构非法
    """
    shapes = parameter_shapes(spec)
    params: 'OrderedDict[str, T.Node]' = OrderedDict()
    fan_in = 1
    for name, shape in shapes.items():
        if name.endswith('.weight') or '.attn.w_' in name:
            fan_in = shape[0]
        params[name] = T.parameter(_initial_value(name, shape, fan_in, rng), name=name)
    if dropout_rng is None:
        dropout_rng = np.random.default_rng(int(rng.integers(0, 2 ** 63 - 1)))
    return ModelInstance(spec, params, dropout_rng)


def _encoder_layer(model: ModelInstance, x: T.Node, prefix: str, heads: int,
                   activation: str, dropout_rate: float) -> T.Node:
    p = model.params
    seq_len = model.spec.num_features
    act = ACTIVATIONS[activation]

    h = T.layer_norm(x, p[f'{prefix}.ln1.gain'], p[f'{prefix}.ln1.bias'])
    attn_weights = {key: p[f'{prefix}.attn.{key}']
                    for key in ('w_q', 'b_q', 'w_k', 'b_k', 'w_v', 'b_v', 'w_o', 'b_o')}
    a = T.self_attention(h, attn_weights, heads, seq_len=seq_len)
    x = T.add(x, T.dropout(a, dropout_rate, model.training, model.dropout_rng))

    h = T.layer_norm(x, p[f'{prefix}.ln2.gain'], p[f'{prefix}.ln2.bias'])
    h = act(T.linear(h, p[f'{prefix}.ff1.weight'], p[f'{prefix}.ff1.bias']))
    h = T.linear(h, p[f'{prefix}.ff2.weight'], p[f'{prefix}.ff2.bias'])
    return T.add(x, T.dropout(h, dropout_rate, model.training, model.dropout_rng))


def _block(model: ModelInstance, x: T.Node, name: str, layers: int, heads: int,
           activation: str, dropout_rate: float) -> T.Node:
    for layer in range(layers):
        x = _encoder_layer(model, x, f'{name}.layer{layer}', heads, activation, dropout_rate)
    return T.layer_norm(x, model.params[f'{name}.ln_f.gain'], model.params[f'{name}.ln_f.bias'])


def forward(model: ModelInstance, features: Union[np.ndarray, T.Node]) -> T.Node:
    """
    前向计算，返回 batch×num_classes 的 logits（softmax 之前）

    Args:
        model: 模型实例，training 标志决定是否启用 dropout
        features: batch×k 特征

    Raises:
        ShapeError: 特征宽度与 spec.num_features 不一致
    """
    spec, p = model.spec, model.params
    x = features if isinstance(features, T.Node) else T.constant(features)
    if x.cols != spec.num_features:
        raise ShapeError(f"特征宽度 {x.cols} 与模型特征数 {spec.num_features} 不一致")

    if spec.kind == 'student_mlp':
        act = ACTIVATIONS[spec.head_activation]
        for i in range(len(spec.mlp_widths)):
            x = act(T.linear(x, p[f'mlp.fc{i}.weight'], p[f'mlp.fc{i}.bias']))
        return T.linear(x, p['mlp.out.weight'], p['mlp.out.bias'])

    x = T.token_embed(x, p['embed.weight'], p['embed.position'])
    x = _block(model, x, 'block1', spec.encoder_layers_1, spec.heads_1,
               spec.activation_1, spec.dropout_1)
    if spec.kind == 'teacher':
        x = T.linear(x, p['expand.weight'], p['expand.bias'])
        x = _block(model, x, 'block2', spec.encoder_layers_2, spec.heads_2,
                   spec.activation_2, 0.0)
    x = T.mean_pool(x, spec.num_features)

    act = ACTIVATIONS[spec.head_activation]
    for i in range(len(spec.mlp_widths)):
        x = T.linear(x, p[f'head.fc{i}.weight'], p[f'head.fc{i}.bias'])
        x = act(T.layer_norm(x, p[f'head.ln{i}.gain'], p[f'head.ln{i}.bias']))
    return T.linear(x, p['head.out.weight'], p['head.out.bias'])


def predict_proba(model: ModelInstance, features: np.ndarray) -> np.ndarray:
    """推理模式下的类别概率（不改变模型原有模式）"""
    was_training = model.training
    model.eval()
    try:
        logits = forward(model, features)
        return T.softmax_rows(logits).value
    finally:
        model.training = was_training
