"""
Utils 包初始化
"""
from utils.errors import ConfigError, DataError, TsgpsError
from utils.rng import derive_rng

__all__ = ['ConfigError', 'DataError', 'TsgpsError', 'derive_rng']
