"""
随机数工具模块 - 由一个顶层种子按名称派生独立随机流

算法：numpy PCG64 位生成器，种子序列为 [seed, crc32(name)]。
同一 (seed, name) 在任意平台上产生相同的随机序列。
"""
import zlib

import numpy as np


def derive_rng(seed: int, name: str) -> np.random.Generator:
    """
    按名称派生随机数生成器

    Args:
        seed: 顶层种子
        name: 随机流名称，例如 'screening'、'init'、'dropout'、'split'

    Returns:
        np.random.Generator: PCG64 生成器
    """
    stream = zlib.crc32(name.encode('utf-8'))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), stream])))
