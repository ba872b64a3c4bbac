"""
异常定义模块 - TSGPS 各层共用的错误类型

每个错误族对应命令行的一个退出码类别：
- ConfigError  -> 2（配置错误）
- DataError    -> 3（数据错误）
- 其余错误      -> 4（运行时错误）
"""


class TsgpsError(Exception):
    """TSGPS 错误基类"""

    exit_code = 4


class ConfigError(TsgpsError):
    """配置错误：非法的 ModelSpec、SynthConfig 或运行配置"""

    exit_code = 2


class DataError(TsgpsError):
    """数据错误：文件格式不合法、基因缺失、样本对不齐等"""

    exit_code = 3


class ShapeError(TsgpsError, ValueError):
    """张量形状不匹配"""


class ParameterError(TsgpsError, ValueError):
    """数值参数越界（温度、dropout 比例、学习率等）"""


class UsageError(TsgpsError):
    """接口调用方式错误，例如对非标量节点执行 backward"""


class UndefinedMetricError(TsgpsError):
    """指标无定义，例如只含单一类别的 ROC 曲线"""


class CheckpointError(TsgpsError):
    """检查点读写错误基类"""


class VersionMismatchError(CheckpointError):
    """检查点格式版本不兼容"""


class DigestMismatchError(CheckpointError):
    """检查点摘要校验失败（文件被截断或篡改）"""


class CheckpointShapeError(CheckpointError, ShapeError):
    """检查点中记录的张量形状与模型结构不符"""
