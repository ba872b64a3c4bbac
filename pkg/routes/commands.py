"""
命令路由模块 - 每个子命令一个处理函数

处理函数返回 (结果, 退出码)，结果统一为 {'success', 'message', 'data'}。
输入路径与参数全部从运行配置读取，命令行参数由 app 映射为配置项。
"""
import argparse
import functools
import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import RESOLVED_CONFIG_NAME, RunConfig
from models.checkpoint import (
    Checkpoint,
    blob_paths,
    load_checkpoint,
    load_run_manifest,
    save_checkpoint
)
from models.genomics import Dataset, ExpressionMatrix, LabelVector
from models.network import (
    compression_ratio,
    count_parameters,
    format_parameters,
    forward,
    predict_proba,
    preset_spec
)
from services.data_service import BINARY_CLASSES, DataService, SynthConfig, atomic_write_text
from services.eval_service import EvalService, Trainer
from services.screen_service import ScreenService
from services.train_service import DistillConfig, TrainHyper, TrainService
from utils.errors import ConfigError, DataError, TsgpsError

logger = logging.getLogger(__name__)

CommandResult = Tuple[Dict[str, Any], int]


def command(func: Callable[[argparse.Namespace, RunConfig], Tuple[str, Any]]):
    """把处理函数的返回值与异常统一包装为结果信封和退出码"""

    @functools.wraps(func)
    def wrapper(args: argparse.Namespace, run_config: RunConfig) -> CommandResult:
        try:
            message, data = func(args, run_config)
            return {'success': True, 'message': message, 'data': data}, 0
        except TsgpsError as e:
            logger.error("%s 失败: %s", func.__name__, e)
            return {'success': False, 'message': str(e), 'data': None}, e.exit_code
        except OSError as e:
            logger.error("%s 文件读写失败: %s", func.__name__, e)
            return {'success': False, 'message': f'文件读写错误: {e}', 'data': None}, 4
        except Exception as e:
            logger.exception("%s 出现未预期的错误", func.__name__)
            return {'success': False, 'message': f'内部错误: {e}', 'data': None}, 4

    return wrapper


# ==================== 公共工具 ====================

def _prepare_output(run_config: RunConfig) -> Path:
    out = run_config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / RESOLVED_CONFIG_NAME, run_config.to_env_text())
    return out


def _required(run_config: RunConfig, key: str, flag: str) -> Any:
    value = run_config[key]
    if value is None:
        raise ConfigError(f"缺少输入：请提供 {flag} 或配置项 {key}")
    return value


def _load_cohort(run_config: RunConfig) -> Tuple[ExpressionMatrix, LabelVector]:
    expr = DataService.read_expression(_required(run_config, 'INPUT_EXPRESSION', '--expression'))
    labels = DataService.read_labels(_required(run_config, 'INPUT_LABELS', '--labels'))
    return expr, DataService.align_labels(labels, expr.sample_ids)


def _task_cohort(expr: ExpressionMatrix, labels: LabelVector,
                 positive: Sequence[int]) -> Tuple[ExpressionMatrix, LabelVector]:
    """保留 健康(0) 与指定感染类别的样本，标签改为 0/1"""
    keep = np.flatnonzero(np.isin(labels.labels, [0, *positive]))
    if len(keep) == 0:
        raise DataError(f"没有属于类别 {positive} 或健康组的样本")
    names = ['+'.join(labels.class_names[c] for c in positive if c < len(labels.class_names))]
    return (
        ExpressionMatrix(gene_ids=list(expr.gene_ids),
                         sample_ids=[expr.sample_ids[i] for i in keep],
                         values=expr.values[:, keep]),
        LabelVector(sample_ids=[labels.sample_ids[i] for i in keep],
                    labels=np.isin(labels.labels[keep], positive).astype(np.int64),
                    class_names=[labels.class_names[0], names[0] or 'infection'])
    )


def _model_dataset(dataset: Dataset, model_classes: int,
                   positive: Optional[Sequence[int]]) -> Dataset:
    """把标签映射到模型的类别空间：二分类模型使用 健康 vs 指定（默认全部）感染类别"""
    if model_classes == 2 and (positive is not None or dataset.n_classes > 2):
        if positive is None:
            positive = list(range(1, dataset.n_classes))
        return DataService.task_subset(dataset, positive, (0,))
    if positive is not None:
        raise DataError(f"--task-classes 只适用于二分类模型，当前模型有 {model_classes} 类")
    return dataset


def _hyper(run_config: RunConfig, epochs: int) -> TrainHyper:
    return TrainHyper(epochs=epochs, **run_config.get_adamw_config()).validate()


def _prediction_frame(sample_ids: Sequence[str], probabilities: np.ndarray,
                      class_names: Sequence[str]) -> pd.DataFrame:
    frame = pd.DataFrame({'sample_id': list(sample_ids)})
    for index, class_name in enumerate(class_names):
        frame[f'prob_{class_name}'] = probabilities[:, index]
    frame['predicted'] = [class_names[i] for i in np.argmax(probabilities, axis=1)]
    return frame


def _write_predictions(frame: pd.DataFrame, path: Path) -> None:
    atomic_write_text(path, frame.to_csv(index=False, float_format='%.17g', lineterminator='\n'))


def _evaluate_run(model, dataset: Dataset, out: Path, name: str) -> Dict[str, Any]:
    """写出评估报告、曲线与逐样本概率（{name}_eval_predictions.csv）"""
    logits = forward(model.eval(), dataset.features).value
    report = EvalService.evaluate_logits(logits, dataset.labels, dataset.class_names)
    DataService.write_json(report.to_dict(), out / f'{name}_eval.json')
    EvalService.write_curves(report, out, prefix=name)
    probabilities = predict_proba(model, dataset.features)
    _write_predictions(_prediction_frame(dataset.sample_ids, probabilities, dataset.class_names),
                       out / f'{name}_eval_predictions.csv')
    return report.to_dict(with_curves=False)


# ==================== 子命令 ====================

@command
def cmd_synth(args: argparse.Namespace, run_config: RunConfig):
    """
    生成合成数据：表达矩阵、标签、GMT 与植入真值
    """
    out = _prepare_output(run_config)
    cfg = SynthConfig(**run_config.get_synth_config())
    data = DataService.generate_synthetic(cfg)
    files = {
        'expression': out / 'expression.csv',
        'labels': out / 'labels.csv',
        'pathways': out / 'pathways.gmt',
        'ground_truth': out / 'ground_truth.json'
    }
    DataService.write_expression(data.expression, files['expression'])
    DataService.write_labels(data.labels, files['labels'])
    DataService.write_gmt(data.catalog, files['pathways'])
    DataService.write_json({'config': cfg.to_dict(), 'class_names': data.labels.class_names,
                            'planted_pairs': data.planted}, files['ground_truth'])
    logger.info("合成数据: %d 基因 × %d 样本，植入 %d 个基因对",
                data.expression.n_genes, data.expression.n_samples, len(data.planted))
    return '合成数据已生成', {k: str(v) for k, v in files.items()}


@command
def cmd_screen(args: argparse.Namespace, run_config: RunConfig):
    """
    筛选 DGP 面板并写出面板 CSV 与筛选报告
    """
    out = _prepare_output(run_config)
    expr, labels = _load_cohort(run_config)
    positive = run_config['TASK_CLASSES']
    if positive is not None:
        expr, labels = _task_cohort(expr, labels, positive)
    catalog = DataService.read_gmt(_required(run_config, 'INPUT_GMT', '--gmt'))
    k = run_config['PANEL_SIZE']

    scored = ScreenService.score_candidates(expr, labels, catalog, parallel=run_config['PARALLEL'])
    panel = ScreenService.select_dgps(expr, labels, catalog, k=k, scored=scored)
    panel_path = out / (run_config['PANEL_NAME'] or 'panel.csv')
    DataService.write_panel(panel, panel_path)

    report = {
        'candidates_tested': scored.n_candidates,
        'degenerate_tables': scored.degenerate_tables,
        'k': k,
        'task_classes': positive,
        'summary': ScreenService.panel_summary(panel),
        'pairs': panel.to_records()
    }
    DataService.write_json(report, panel_path.with_name(panel_path.stem + '_report.json'))
    return f'已选出 {panel.k} 个基因对', {
        'panel': str(panel_path),
        'candidates_tested': scored.n_candidates,
        'degenerate_tables': scored.degenerate_tables
    }


@command
def cmd_train_teacher(args: argparse.Namespace, run_config: RunConfig):
    """
    训练教师模型：特征化 → 分层划分 → 训练 → 评估 → 写出检查点
    """
    out = _prepare_output(run_config)
    panel = DataService.read_panel(_required(run_config, 'INPUT_PANEL', '--panel'))
    expr, labels = _load_cohort(run_config)
    mode = run_config['FEATURE_MODE']
    dataset = DataService.make_dataset(ScreenService.featurize(expr, panel, mode), labels)

    spec = preset_spec(run_config['PRESET'], 'teacher', num_features=panel.k,
                       num_classes=dataset.n_classes, **run_config.get_model_overrides())
    hyper = _hyper(run_config, run_config['TEACHER_EPOCHS'])
    run = TrainService.train_teacher(dataset, spec, hyper, run_config.seed)

    name = run_config['RUN_NAME'] or 'teacher'
    ckpt_path, _ = blob_paths(out / name)
    run.checkpoint_path = str(ckpt_path)
    manifest = run.to_manifest()
    save_checkpoint(Checkpoint.from_model(run.model, panel, dataset.class_names, mode, manifest),
                    ckpt_path)
    DataService.write_json(manifest, out / f'{name}_manifest.json')
    report = _evaluate_run(run.model, dataset.subset(run.val_indices), out, name)
    return '教师模型训练完成', {'checkpoint': str(ckpt_path), 'parameters': count_parameters(spec),
                              'best_epoch': run.best_epoch, 'eval': report}


@command
def cmd_distill(args: argparse.Namespace, run_config: RunConfig):
    """
    蒸馏学生模型；KD_W_DISTILL=0（--vanilla）时作为对照组
    """
    out = _prepare_output(run_config)
    teacher_path = _required(run_config, 'INPUT_TEACHER', '--teacher')
    teacher_ckpt = load_checkpoint(teacher_path)
    panel_path = run_config['INPUT_PANEL']
    panel = DataService.read_panel(panel_path) if panel_path else teacher_ckpt.panel
    expr, labels = _load_cohort(run_config)
    positive = run_config['TASK_CLASSES'] or list(range(1, labels.n_classes))
    expr, labels = _task_cohort(expr, labels, positive)
    mode = run_config['FEATURE_MODE']
    dataset = DataService.make_dataset(ScreenService.featurize(expr, panel, mode), labels)

    teacher_features = None
    if panel.to_records() != teacher_ckpt.panel.to_records():
        teacher_features = ScreenService.featurize(expr, teacher_ckpt.panel, teacher_ckpt.feature_mode)

    cfg = DistillConfig(**run_config.get_distill_config()).validate()
    kind = run_config['STUDENT_KIND']
    spec = preset_spec(run_config['PRESET'], kind, num_features=panel.k,
                       num_classes=len(BINARY_CLASSES), **run_config.get_model_overrides())
    hyper = _hyper(run_config, run_config['STUDENT_EPOCHS'])
    teacher = None if cfg.vanilla else teacher_ckpt.to_model()
    run = TrainService.distill_student(spec, teacher, dataset, cfg, hyper, run_config.seed,
                                       teacher_features=teacher_features)

    name = run_config['RUN_NAME'] or (f'{kind}_vanilla' if cfg.vanilla else kind)
    ckpt_path, _ = blob_paths(out / name)
    run.checkpoint_path = str(ckpt_path)
    manifest = run.to_manifest()
    manifest['teacher_checkpoint'] = str(teacher_path)
    manifest['task_classes'] = list(positive)
    save_checkpoint(Checkpoint.from_model(run.model, panel, dataset.class_names, mode, manifest),
                    ckpt_path)
    DataService.write_json(manifest, out / f'{name}_manifest.json')
    report = _evaluate_run(run.model, dataset.subset(run.val_indices), out, name)
    return '学生模型训练完成', {'checkpoint': str(ckpt_path), 'parameters': count_parameters(spec),
                              'temperature': cfg.temperature, 'vanilla': cfg.vanilla,
                              'eval': report}


def _fold_trainer(ckpt: Checkpoint, manifest: Optional[Dict[str, Any]], expr: ExpressionMatrix,
                  hyper: TrainHyper, seed: int) -> Tuple[str, Trainer]:
    """
    按检查点原来的训练方式构造每折的训练过程

    蒸馏得到的学生在每折上重新蒸馏（教师软目标 + 记录的蒸馏配置），
    其余检查点用交叉熵训练。

    Returns:
        (训练方式, 训练过程)，训练方式为 distill / vanilla / cross_entropy
    """
    distill = (manifest or {}).get('distill')
    if not distill:
        def train_ce(train: Dataset, fold: int):
            model = TrainService.train_classifier(ckpt.spec, train, train.subset([]), hyper,
                                                  seed + fold, tag=f'fold{fold + 1}')
            return lambda x: forward(model.eval(), x).value

        return 'cross_entropy', train_ce

    cfg = DistillConfig(**distill).validate()
    teacher = source = None
    rows: Dict[str, int] = {}
    if not cfg.vanilla:
        teacher_ckpt = load_checkpoint(manifest['teacher_checkpoint'])
        teacher = teacher_ckpt.to_model()
        source = ScreenService.featurize(expr, teacher_ckpt.panel, teacher_ckpt.feature_mode)
        rows = {sample_id: i for i, sample_id in enumerate(expr.sample_ids)}

    def train_distill(train: Dataset, fold: int):
        features = None if source is None else source[[rows[s] for s in train.sample_ids]]
        model = TrainService.distill_classifier(ckpt.spec, teacher, train, train.subset([]), cfg,
                                                hyper, seed + fold, teacher_features=features,
                                                tag=f'fold{fold + 1}')
        return lambda x: forward(model.eval(), x).value

    return ('vanilla' if cfg.vanilla else 'distill'), train_distill


@command
def cmd_evaluate(args: argparse.Namespace, run_config: RunConfig):
    """
    在带标签数据上评估检查点；KFOLD=K 时按检查点结构与训练方式做 K 折交叉验证
    """
    out = _prepare_output(run_config)
    ckpt_path = _required(run_config, 'INPUT_CHECKPOINT', '--checkpoint')
    ckpt = load_checkpoint(ckpt_path)
    manifest = load_run_manifest(ckpt_path, ckpt)
    expr, labels = _load_cohort(run_config)
    features = ScreenService.featurize(expr, ckpt.panel, ckpt.feature_mode)
    positive = run_config['TASK_CLASSES'] or (manifest or {}).get('task_classes')
    dataset = _model_dataset(DataService.make_dataset(features, labels), ckpt.spec.num_classes,
                             positive)
    if len(np.unique(dataset.labels)) < 2:
        raise DataError("评估数据只包含单一类别，AUC 无定义")
    name = run_config['RUN_NAME'] or blob_paths(ckpt_path)[0].stem

    k = run_config['KFOLD']
    if k:
        epochs = run_config['KFOLD_EPOCHS'] or (run_config['TEACHER_EPOCHS'] if ckpt.spec.kind == 'teacher'
                                                else run_config['STUDENT_EPOCHS'])
        training, trainer = _fold_trainer(ckpt, manifest, expr, _hyper(run_config, epochs),
                                          run_config.seed)
        logger.info("%d 折交叉验证 (%s)，每折 %d 轮", k, training, epochs)
        result = EvalService.kfold_cv(dataset, k, trainer, run_config.seed,
                                      parallel=run_config['PARALLEL'])
        data = dict(result.to_dict(), training=training, epochs=epochs)
        DataService.write_json(data, out / f'{name}_kfold.json')
        return f'{k} 折交叉验证完成', data

    data = _evaluate_run(ckpt.to_model(), dataset, out, name)
    return '评估完成', data


@command
def cmd_predict(args: argparse.Namespace, run_config: RunConfig):
    """
    用检查点的面板特征化新样本并输出各类别概率
    """
    out = _prepare_output(run_config)
    ckpt = load_checkpoint(_required(run_config, 'INPUT_CHECKPOINT', '--checkpoint'))
    expr = DataService.read_expression(_required(run_config, 'INPUT_EXPRESSION', '--expression'))
    features = ScreenService.featurize(expr, ckpt.panel, ckpt.feature_mode)
    probabilities = predict_proba(ckpt.to_model(), features)

    frame = _prediction_frame(expr.sample_ids, probabilities, ckpt.class_names)
    path = out / (run_config['RUN_NAME'] or 'predictions.csv')
    _write_predictions(frame, path)
    return f'已预测 {len(frame)} 个样本', {'predictions': str(path), 'samples': len(frame)}


def _parse_counts(raw: Optional[str]) -> Dict[str, int]:
    counts = {}
    for item in (raw or '').split(','):
        if not item.strip():
            continue
        name, _, value = item.partition('=')
        try:
            counts[name.strip()] = int(value.replace('_', ''))
        except ValueError:
            raise DataError(f"--param-counts 应为 name=count 形式，实际: {item}")
    return counts


def _apply_counts(rows: List[Dict[str, Any]], counts: Dict[str, int]) -> None:
    """名称匹配优先；否则覆盖该结构的全部行；都不匹配时新增一行"""
    for key, count in counts.items():
        targets = [r for r in rows if r['name'] == key] or [r for r in rows if r['kind'] == key]
        if not targets:
            rows.append({'name': key, 'kind': key, 'parameters': count})
        for row in targets:
            row['parameters'] = count


@command
def cmd_report(args: argparse.Namespace, run_config: RunConfig):
    """
    汇总参数量、相对教师的压缩率与评估指标
    """
    out = _prepare_output(run_config)
    rows: List[Dict[str, Any]] = []
    for path in run_config['REPORT_CHECKPOINTS'] or []:
        ckpt = load_checkpoint(path)
        manifest_path, _ = blob_paths(path)
        name = manifest_path.stem
        row = {'name': name, 'kind': ckpt.spec.kind, 'parameters': ckpt.num_parameters()}
        eval_path = manifest_path.with_name(f'{name}_eval.json')
        if eval_path.is_file():
            with eval_path.open('r', encoding='utf-8') as f:
                metrics = json.load(f)
            row.update({key: metrics.get(key) for key in ('acc', 'f1', 'auc', 'auprc')})
        rows.append(row)

    _apply_counts(rows, _parse_counts(run_config['REPORT_PARAM_COUNTS']))
    if not rows:
        raise DataError("report 需要至少一个检查点或 --param-counts")

    teacher_name = run_config['REPORT_TEACHER']
    teacher = next((r for r in rows if r['name'] == teacher_name), None) if teacher_name else \
        next((r for r in rows if r['kind'] == 'teacher'), None)
    if teacher_name and teacher is None:
        raise DataError(f"找不到名为 {teacher_name} 的教师模型")
    for row in rows:
        row['parameters_formatted'] = format_parameters(row['parameters'])
        row['compression_ratio'] = (compression_ratio(row['parameters'], teacher['parameters'])
                                    if teacher is not None and row is not teacher else None)
        logger.info("%-20s %-12s %12s  压缩率 %s", row['name'], row['kind'],
                    row['parameters_formatted'],
                    '-' if row['compression_ratio'] is None else f"{row['compression_ratio']:.1%}")

    DataService.write_json({'teacher': teacher['name'] if teacher else None, 'rows': rows},
                           out / 'report.json')
    atomic_write_text(out / 'report.csv', pd.DataFrame(rows).to_csv(index=False, lineterminator='\n'))
    return f'共 {len(rows)} 个模型', {'rows': rows}


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], CommandResult]] = {
    'synth': cmd_synth,
    'screen': cmd_screen,
    'train-teacher': cmd_train_teacher,
    'distill': cmd_distill,
    'evaluate': cmd_evaluate,
    'predict': cmd_predict,
    'report': cmd_report
}
