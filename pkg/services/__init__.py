"""
Services 包初始化
"""
from services.data_service import DataService
from services.eval_service import EvalService
from services.screen_service import ScreenService
from services.train_service import TrainService

__all__ = ['DataService', 'EvalService', 'ScreenService', 'TrainService']
