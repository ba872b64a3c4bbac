"""
日志工具模块
"""
import logging

from config import Config

LOG_FORMAT = '%(asctime)s %(levelname)s [%(name)s] %(message)s'


def setup_logging(level: str = None) -> None:
    """
    配置根日志器，只在命令行入口调用一次

    Args:
        level: 日志级别名称，默认读取 Config.LOG_LEVEL
    """
    level_name = (level or Config.LOG_LEVEL).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        force=True
    )
