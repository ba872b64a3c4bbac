"""
Models 包初始化
"""
from models.genomics import (
    ContingencyTable,
    Dataset,
    DgpPanel,
    ExpressionMatrix,
    GenePair,
    LabelVector,
    PathwayCatalog
)
from models.network import ModelInstance, ModelSpec, build_model, forward

__all__ = [
    'ContingencyTable', 'Dataset', 'DgpPanel', 'ExpressionMatrix', 'GenePair',
    'LabelVector', 'PathwayCatalog', 'ModelInstance', 'ModelSpec', 'build_model', 'forward'
]
