"""
Routes 包初始化
"""
from routes.commands import COMMANDS

__all__ = ['COMMANDS']
