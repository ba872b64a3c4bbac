"""
配置文件 - 流水线默认参数与运行配置解析

优先级：内置默认值 < 环境变量 / .env < --config 文件 < 命令行参数
"""
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

from utils.errors import ConfigError

load_dotenv()

RESOLVED_CONFIG_NAME = 'resolved_config.env'


class Config:
    """应用配置类"""

    # 运行配置
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    SEED = int(os.getenv('SEED', 0))
    OUTPUT_DIR = os.getenv('OUTPUT_DIR', 'runs')
    PRESET = os.getenv('PRESET', 'desk')  # desk 或 paper-scale
    PARALLEL = int(os.getenv('PARALLEL', 1))

    # 筛选配置
    PANEL_SIZE = int(os.getenv('PANEL_SIZE', 35))
    FEATURE_MODE = os.getenv('FEATURE_MODE', 'binary')  # binary 或 continuous

    # 训练配置（AdamW）
    TRAIN_LR = float(os.getenv('TRAIN_LR', 1e-3))
    TRAIN_BETA1 = float(os.getenv('TRAIN_BETA1', 0.9))
    TRAIN_BETA2 = float(os.getenv('TRAIN_BETA2', 0.999))
    TRAIN_EPS = float(os.getenv('TRAIN_EPS', 1e-8))
    TRAIN_WEIGHT_DECAY = float(os.getenv('TRAIN_WEIGHT_DECAY', 0.01))
    TRAIN_BATCH_SIZE = int(os.getenv('TRAIN_BATCH_SIZE', 32))
    TRAIN_FRACTION = float(os.getenv('TRAIN_FRACTION', 0.8))
    TEACHER_EPOCHS = int(os.getenv('TEACHER_EPOCHS', 100))
    STUDENT_EPOCHS = int(os.getenv('STUDENT_EPOCHS', 200))

    # 蒸馏配置
    KD_TEMPERATURE = float(os.getenv('KD_TEMPERATURE', 5.0))
    KD_W_DISTILL = float(os.getenv('KD_W_DISTILL', 0.2))
    KD_W_CE = float(os.getenv('KD_W_CE', 0.8))
    KD_FORM = os.getenv('KD_FORM', 'kl')  # kl 或 verbatim
    KD_CLASS_MAP = os.getenv('KD_CLASS_MAP', 'infected')

    # 合成数据配置
    SYNTH_SAMPLES_PER_CLASS = int(os.getenv('SYNTH_SAMPLES_PER_CLASS', 300))
    SYNTH_GENES = int(os.getenv('SYNTH_GENES', 300))
    SYNTH_PATHWAYS = int(os.getenv('SYNTH_PATHWAYS', 20))
    SYNTH_PLANTED_PAIRS = int(os.getenv('SYNTH_PLANTED_PAIRS', 15))
    SYNTH_FLIP_NOISE = float(os.getenv('SYNTH_FLIP_NOISE', 0.1))
    SYNTH_CLASSES = int(os.getenv('SYNTH_CLASSES', 3))  # 3 = 健康/细菌/病毒
    SYNTH_SHARED_FRACTION = float(os.getenv('SYNTH_SHARED_FRACTION', 0.4))

    # 模型结构覆盖（为空时使用预设）
    MODEL_D_MODEL_1 = os.getenv('MODEL_D_MODEL_1') or None
    MODEL_HEADS_1 = os.getenv('MODEL_HEADS_1') or None
    MODEL_LAYERS_1 = os.getenv('MODEL_LAYERS_1') or None
    MODEL_DROPOUT_1 = os.getenv('MODEL_DROPOUT_1') or None
    MODEL_D_MODEL_2 = os.getenv('MODEL_D_MODEL_2') or None
    MODEL_HEADS_2 = os.getenv('MODEL_HEADS_2') or None
    MODEL_LAYERS_2 = os.getenv('MODEL_LAYERS_2') or None
    MODEL_MLP_WIDTHS = os.getenv('MODEL_MLP_WIDTHS') or None  # 逗号分隔，如 64,32

    # 命令输入（命令行参数同样写入运行配置，resolved_config.env 可直接复现一次运行）
    INPUT_EXPRESSION = os.getenv('INPUT_EXPRESSION') or None
    INPUT_LABELS = os.getenv('INPUT_LABELS') or None
    INPUT_GMT = os.getenv('INPUT_GMT') or None
    INPUT_PANEL = os.getenv('INPUT_PANEL') or None
    INPUT_TEACHER = os.getenv('INPUT_TEACHER') or None
    INPUT_CHECKPOINT = os.getenv('INPUT_CHECKPOINT') or None
    TASK_CLASSES = os.getenv('TASK_CLASSES') or None  # 逗号分隔的感染类别，如 1 或 1,2
    STUDENT_KIND = os.getenv('STUDENT_KIND', 'student_tx')  # student_tx 或 student_mlp
    KFOLD = os.getenv('KFOLD') or None
    KFOLD_EPOCHS = os.getenv('KFOLD_EPOCHS') or None
    RUN_NAME = os.getenv('RUN_NAME') or None
    PANEL_NAME = os.getenv('PANEL_NAME') or None
    REPORT_CHECKPOINTS = os.getenv('REPORT_CHECKPOINTS') or None  # 逗号分隔的检查点路径
    REPORT_TEACHER = os.getenv('REPORT_TEACHER') or None
    REPORT_PARAM_COUNTS = os.getenv('REPORT_PARAM_COUNTS') or None  # 如 teacher=18142949,student_tx=8178842

    @classmethod
    def as_dict(cls) -> Dict[str, Any]:
        """全部配置项（已应用环境变量）"""
        return {key: getattr(cls, key) for key in dir(cls) if key.isupper()}

    @classmethod
    def get_adamw_config(cls, values: Mapping[str, Any] = None) -> Dict[str, Any]:
        """获取优化器与训练配置"""
        v = values if values is not None else cls.as_dict()
        return {
            'lr': v['TRAIN_LR'],
            'beta1': v['TRAIN_BETA1'],
            'beta2': v['TRAIN_BETA2'],
            'eps': v['TRAIN_EPS'],
            'weight_decay': v['TRAIN_WEIGHT_DECAY'],
            'batch_size': v['TRAIN_BATCH_SIZE'],
            'train_fraction': v['TRAIN_FRACTION']
        }

    @classmethod
    def get_distill_config(cls, values: Mapping[str, Any] = None) -> Dict[str, Any]:
        """获取蒸馏配置"""
        v = values if values is not None else cls.as_dict()
        return {
            'temperature': v['KD_TEMPERATURE'],
            'w_distill': v['KD_W_DISTILL'],
            'w_ce': v['KD_W_CE'],
            'kd_form': v['KD_FORM'],
            'class_map': v['KD_CLASS_MAP']
        }

    @classmethod
    def get_synth_config(cls, values: Mapping[str, Any] = None) -> Dict[str, Any]:
        """获取合成数据配置"""
        v = values if values is not None else cls.as_dict()
        return {
            'n_samples': v['SYNTH_SAMPLES_PER_CLASS'],
            'n_genes': v['SYNTH_GENES'],
            'n_pathways': v['SYNTH_PATHWAYS'],
            'planted_pairs': v['SYNTH_PLANTED_PAIRS'],
            'flip_noise': v['SYNTH_FLIP_NOISE'],
            'seed': v['SEED'],
            'n_classes': v['SYNTH_CLASSES'],
            'shared_fraction': v['SYNTH_SHARED_FRACTION']
        }

    @classmethod
    def get_model_overrides(cls, values: Mapping[str, Any] = None) -> Dict[str, Any]:
        """获取模型结构覆盖项（未设置的键不返回）"""
        v = values if values is not None else cls.as_dict()
        overrides = {
            'd_model_1': v['MODEL_D_MODEL_1'],
            'heads_1': v['MODEL_HEADS_1'],
            'encoder_layers_1': v['MODEL_LAYERS_1'],
            'dropout_1': v['MODEL_DROPOUT_1'],
            'd_model_2': v['MODEL_D_MODEL_2'],
            'heads_2': v['MODEL_HEADS_2'],
            'encoder_layers_2': v['MODEL_LAYERS_2'],
            'mlp_widths': v['MODEL_MLP_WIDTHS']
        }
        return {k: value for k, value in overrides.items() if value is not None}


# ==================== 运行配置 ====================

def _parse_int_list(raw: Any):
    if isinstance(raw, (list, tuple)):
        return [int(w) for w in raw]
    return [int(w) for w in str(raw).split(',') if w.strip()]


def _parse_str_list(raw: Any):
    if isinstance(raw, (list, tuple)):
        return [str(item) for item in raw]
    return [item.strip() for item in str(raw).split(',') if item.strip()]


# 可以为空的配置项及其解析方式
_OPTIONAL_CASTS: Dict[str, Callable[[Any], Any]] = {
    'MODEL_D_MODEL_1': int,
    'MODEL_HEADS_1': int,
    'MODEL_LAYERS_1': int,
    'MODEL_DROPOUT_1': float,
    'MODEL_D_MODEL_2': int,
    'MODEL_HEADS_2': int,
    'MODEL_LAYERS_2': int,
    'MODEL_MLP_WIDTHS': _parse_int_list,
    'INPUT_EXPRESSION': str,
    'INPUT_LABELS': str,
    'INPUT_GMT': str,
    'INPUT_PANEL': str,
    'INPUT_TEACHER': str,
    'INPUT_CHECKPOINT': str,
    'TASK_CLASSES': _parse_int_list,
    'KFOLD': int,
    'KFOLD_EPOCHS': int,
    'RUN_NAME': str,
    'PANEL_NAME': str,
    'REPORT_CHECKPOINTS': _parse_str_list,
    'REPORT_TEACHER': str,
    'REPORT_PARAM_COUNTS': str
}

CHOICES = {
    'PRESET': ('desk', 'paper-scale'),
    'FEATURE_MODE': ('binary', 'continuous'),
    'KD_FORM': ('kl', 'verbatim'),
    'STUDENT_KIND': ('student_tx', 'student_mlp'),
    'LOG_LEVEL': ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')
}


def _cast(key: str, raw: Any) -> Any:
    if raw is None or raw == '':
        if key in _OPTIONAL_CASTS:
            return None
        raise ConfigError(f"配置项 {key} 不能为空")
    if key in _OPTIONAL_CASTS:
        caster = _OPTIONAL_CASTS[key]
    else:
        default = getattr(Config, key)
        caster = type(default)
    try:
        return caster(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"配置项 {key} 的值无法解析: {raw!r}")


def _format(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ','.join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """一次命令运行的完整解析配置"""

    values: Dict[str, Any]
    config_file: Optional[str] = None
    flags: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values['SEED']

    @property
    def output_dir(self) -> Path:
        return Path(self.values['OUTPUT_DIR'])

    def get_adamw_config(self) -> Dict[str, Any]:
        return Config.get_adamw_config(self.values)

    def get_distill_config(self) -> Dict[str, Any]:
        return Config.get_distill_config(self.values)

    def get_synth_config(self) -> Dict[str, Any]:
        return Config.get_synth_config(self.values)

    def get_model_overrides(self) -> Dict[str, Any]:
        return Config.get_model_overrides(self.values)

    def to_env_text(self) -> str:
        """写成可以通过 --config 读回的 dotenv 文本"""
        lines = [f"{key}={_format(value)}" for key, value in sorted(self.values.items())
                 if value is not None]
        return '\n'.join(lines) + '\n'


def _validate(values: Dict[str, Any]) -> None:
    for key, choices in CHOICES.items():
        if values[key] not in choices:
            raise ConfigError(f"配置项 {key}={values[key]} 无效，可选 {choices}")
    for key in ('PARALLEL', 'PANEL_SIZE', 'TRAIN_BATCH_SIZE', 'TEACHER_EPOCHS', 'STUDENT_EPOCHS'):
        if values[key] < 1:
            raise ConfigError(f"配置项 {key} 至少为 1，实际: {values[key]}")
    if values['KFOLD'] is not None and values['KFOLD'] < 2:
        raise ConfigError(f"配置项 KFOLD 至少为 2，实际: {values['KFOLD']}")
    if values['KFOLD_EPOCHS'] is not None and values['KFOLD_EPOCHS'] < 1:
        raise ConfigError(f"配置项 KFOLD_EPOCHS 至少为 1，实际: {values['KFOLD_EPOCHS']}")
    classes = values['TASK_CLASSES']
    if classes is not None and (not classes or min(classes) < 1):
        raise ConfigError(f"配置项 TASK_CLASSES 应为感染类别下标（≥ 1），实际: {classes}")


def resolve_run_config(config_file: Optional[str] = None,
                       overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    解析运行配置

    Args:
        config_file: dotenv 格式的配置文件（KEY=VALUE）
        overrides: 命令行覆盖项，值为 None 的键忽略

    Returns:
        RunConfig: 解析完成的配置

    Raises:
        ConfigError: 文件不存在、未知键、值无法解析或越界
    """
    values = Config.as_dict()
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError(f"配置文件不存在: {path}")
        file_values = dotenv_values(path)
        unknown = sorted(k for k in file_values if k not in values)
        if unknown:
            raise ConfigError(f"配置文件 {path} 包含未知配置项: {', '.join(unknown)}")
        for key, raw in file_values.items():
            values[key] = _cast(key, raw)

    flags = {k: v for k, v in (overrides or {}).items() if v is not None}
    for key, raw in flags.items():
        if key not in values:
            raise ConfigError(f"未知配置项: {key}")
        values[key] = _cast(key, raw)

    for key in _OPTIONAL_CASTS:
        if values[key] is not None:
            values[key] = _cast(key, values[key])
    values['LOG_LEVEL'] = str(values['LOG_LEVEL']).upper()
    _validate(values)
    return RunConfig(values=values, config_file=config_file, flags=flags)
