"""
检查点模型 - 自描述的模型持久化格式

一个检查点由两个文件组成：
- <name>.json: 清单（格式版本、ModelSpec、DGP 面板、类别名、参数名与形状、摘要）
- <name>.bin:  按清单顺序排列的小端 float64 参数数据

摘要为 SHA-256(规范化清单 + 数据)，加载时先校验版本，再校验形状，最后校验摘要。
"""
import hashlib
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from models.genomics import DgpPanel
from models.network import ModelInstance, ModelSpec, build_model, parameter_shapes
from services.data_service import atomic_write_bytes, atomic_write_text
from utils.errors import (
    CheckpointError,
    CheckpointShapeError,
    ConfigError,
    DigestMismatchError,
    VersionMismatchError
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BLOB_DTYPE = '<f8'

# 每次运行都会变化、不参与训练清单摘要的字段
VOLATILE_MANIFEST_KEYS = ('wall_clock_seconds',)

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    """可独立加载的模型检查点"""

    spec: ModelSpec
    panel: DgpPanel
    class_names: List[str]
    arrays: 'OrderedDict[str, np.ndarray]'
    feature_mode: str = 'binary'
    training_manifest_digest: Optional[str] = None
    format_version: int = FORMAT_VERSION
    digest: Optional[str] = field(default=None, compare=False)

    @classmethod
    def from_model(cls, model: ModelInstance, panel: DgpPanel, class_names: List[str],
                   feature_mode: str = 'binary',
                   run_manifest: Optional[Dict[str, Any]] = None) -> 'Checkpoint':
        manifest_digest = run_manifest_digest(run_manifest) if run_manifest is not None else None
        return cls(spec=model.spec, panel=panel, class_names=list(class_names),
                   arrays=model.state_arrays(), feature_mode=feature_mode,
                   training_manifest_digest=manifest_digest)

    def to_model(self) -> ModelInstance:
        """重建推理模式的模型实例"""
        model = build_model(self.spec, np.random.default_rng(0))
        model.load_arrays(self.arrays)
        return model.eval()

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


def blob_paths(path: PathLike):
    """清单与数据文件路径"""
    manifest = Path(path)
    if manifest.suffix != '.json':
        manifest = manifest.with_name(manifest.name + '.json')
    return manifest, manifest.with_suffix('.bin')


def run_manifest_digest(run_manifest: Dict[str, Any]) -> str:
    """训练清单摘要，忽略耗时等易变字段"""
    stable = {k: v for k, v in run_manifest.items() if k not in VOLATILE_MANIFEST_KEYS}
    payload = json.dumps(stable, sort_keys=True, default=str).encode('utf-8')
    return hashlib.sha256(payload).hexdigest()


def run_manifest_path(path: PathLike) -> Path:
    """检查点旁的训练清单 <name>_manifest.json"""
    manifest_path, _ = blob_paths(path)
    return manifest_path.with_name(f'{manifest_path.stem}_manifest.json')


def load_run_manifest(path: PathLike, ckpt: 'Checkpoint') -> Optional[Dict[str, Any]]:
    """
    读取检查点旁的训练清单并与检查点中记录的摘要核对

    Returns:
        训练清单；文件不存在或检查点未记录摘要时返回 None

    Raises:
        CheckpointError: 清单不是合法 JSON
        DigestMismatchError: 清单与检查点记录的摘要不符
    """
    path = run_manifest_path(path)
    if ckpt.training_manifest_digest is None or not path.is_file():
        return None
    try:
        with path.open('r', encoding='utf-8') as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: 训练清单不是合法 JSON: {e}")
    if run_manifest_digest(manifest) != ckpt.training_manifest_digest:
        raise DigestMismatchError(f"{path}: 训练清单与检查点记录的摘要不符")
    return manifest


def _manifest_body(ckpt: Checkpoint, blob_name: str) -> Dict[str, Any]:
    return {
        'format_version': ckpt.format_version,
        'spec': ckpt.spec.to_dict(),
        'panel': ckpt.panel.to_records(),
        'class_names': list(ckpt.class_names),
        'feature_mode': ckpt.feature_mode,
        'training_manifest_digest': ckpt.training_manifest_digest,
        'blob': blob_name,
        'dtype': BLOB_DTYPE,
        'tensors': [{'name': name, 'shape': list(a.shape)} for name, a in ckpt.arrays.items()]
    }


def _digest(body: Dict[str, Any], blob: bytes) -> str:
    canonical = json.dumps(body, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return hashlib.sha256(canonical + blob).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: PathLike) -> Path:
    """
    写出检查点（两个文件均原子写入）

    Returns:
        Path: 清单文件路径
    """
    manifest_path, blob_path = blob_paths(path)
    blob = b''.join(np.ascontiguousarray(a, dtype=BLOB_DTYPE).tobytes() for a in ckpt.arrays.values())
    body = _manifest_body(ckpt, blob_path.name)
    ckpt.digest = _digest(body, blob)

    atomic_write_bytes(blob_path, blob)
    atomic_write_text(manifest_path, json.dumps(dict(body, digest=ckpt.digest),
                                                indent=2, sort_keys=True) + '\n')
    logger.info("检查点已保存: %s (%d 个参数)", manifest_path, ckpt.num_parameters())
    return manifest_path


def load_checkpoint(path: PathLike) -> Checkpoint:
    """
    读取并校验检查点

    Raises:
        CheckpointError: 文件缺失或清单无法解析
        VersionMismatchError: 格式版本不符
        CheckpointShapeError: 张量名称或形状与结构不符（给出张量名）
        DigestMismatchError: 摘要不符（包括数据被截断）
    """
    manifest_path, blob_path = blob_paths(path)
    if not manifest_path.is_file():
        raise CheckpointError(f"检查点清单不存在: {manifest_path}")
    try:
        with manifest_path.open('r', encoding='utf-8') as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{manifest_path}: 清单不是合法 JSON: {e}")

    version = document.get('format_version')
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"检查点格式版本 {version} 与当前版本 {FORMAT_VERSION} 不符")

    try:
        spec = ModelSpec.from_dict(document['spec'])
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"{manifest_path}: 模型结构无效: {e}")
    expected = parameter_shapes(spec)
    tensors = document.get('tensors', [])
    names = [t['name'] for t in tensors]
    if names != list(expected):
        missing = [n for n in expected if n not in names]
        extra = [n for n in names if n not in expected]
        raise CheckpointShapeError(f"张量列表与模型结构不符，缺少 {missing}，多余 {extra}")
    for t in tensors:
        if tuple(t['shape']) != tuple(expected[t['name']]):
            raise CheckpointShapeError(
                f"张量 {t['name']} 形状 {tuple(t['shape'])} 与结构要求 {tuple(expected[t['name']])} 不符")

    blob_file = manifest_path.with_name(document.get('blob', blob_path.name))
    if not blob_file.is_file():
        raise CheckpointError(f"检查点数据文件不存在: {blob_file}")
    blob = blob_file.read_bytes()
    body = {k: v for k, v in document.items() if k != 'digest'}
    if _digest(body, blob) != document.get('digest'):
        raise DigestMismatchError(f"{manifest_path}: 检查点摘要不符，文件可能被截断或修改")

    flat = np.frombuffer(blob, dtype=BLOB_DTYPE).astype(np.float64)
    arrays: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    offset = 0
    for name, shape in expected.items():
        size = int(np.prod(shape))
        arrays[name] = flat[offset:offset + size].reshape(shape).copy()
        offset += size

    return Checkpoint(
        spec=spec,
        panel=DgpPanel.from_records(document['panel']),
        class_names=list(document['class_names']),
        arrays=arrays,
        feature_mode=document.get('feature_mode', 'binary'),
        training_manifest_digest=document.get('training_manifest_digest'),
        format_version=version,
        digest=document['digest']
    )
