"""
统计工具模块 - Fisher 精确检验

点概率按超几何分布计算：
    p = (a+b)!(c+d)!(a+c)!(b+d)! / (a!b!c!d!(a+b+c+d)!)
全部在对数阶乘空间累加，避免阶乘溢出。
"""
import numpy as np
from scipy.special import gammaln

from models.genomics import ContingencyTable

# 浮点并列判定的相对容差
TIE_SLACK = 1e-7


def _log_factorial(n):
    return gammaln(np.asarray(n, dtype=np.float64) + 1.0)


def _log_point_probabilities(a, row1: int, row2: int, col1: int):
    """固定边际下，左上角取 a 时表的对数点概率（a 可为数组）"""
    total = row1 + row2
    a = np.asarray(a, dtype=np.float64)
    b = row1 - a
    c = col1 - a
    d = row2 - c
    return (_log_factorial(row1) + _log_factorial(row2)
            + _log_factorial(col1) + _log_factorial(total - col1)
            - _log_factorial(a) - _log_factorial(b) - _log_factorial(c) - _log_factorial(d)
            - _log_factorial(total))


def margin_support(t: ContingencyTable) -> np.ndarray:
    """与 t 边际相同的所有表的左上角取值范围"""
    row1, row2 = t.a + t.b, t.c + t.d
    col1 = t.a + t.c
    return np.arange(max(0, col1 - row2), min(row1, col1) + 1)


def fisher_point_probability(t: ContingencyTable) -> float:
    """
    列联表在给定边际下的精确超几何概率

    Args:
        t: 列联表

    Returns:
        float: 点概率
    """
    log_p = _log_point_probabilities(t.a, t.a + t.b, t.c + t.d, t.a + t.c)
    return float(np.exp(log_p))


def fisher_exact_two_sided(t: ContingencyTable) -> float:
    """
    双侧 Fisher 精确检验

    对所有与观测表边际相同、且点概率不超过观测表点概率（含 1e-7 相对容差）的表求和。
    退化边际（任一行或列和为 0）按约定返回 1.0，可通过 t.degenerate 判断。

    Returns:
        float: [0, 1] 内的 p 值
    """
    if t.degenerate:
        return 1.0
    row1, row2, col1 = t.a + t.b, t.c + t.d, t.a + t.c
    support = margin_support(t)
    log_probs = _log_point_probabilities(support, row1, row2, col1)
    log_observed = _log_point_probabilities(t.a, row1, row2, col1)
    mask = log_probs <= log_observed + np.log1p(TIE_SLACK)
    p_value = float(np.exp(log_probs[mask]).sum())
    return min(1.0, max(0.0, p_value))
