"""
TSGPS 命令行主程序 - 基因对筛选、教师训练、知识蒸馏与评估流水线

用法示例：
    python app.py --out runs/demo synth
    python app.py --out runs/demo screen --expression runs/demo/expression.csv \
        --labels runs/demo/labels.csv --gmt runs/demo/pathways.gmt
"""
import argparse
import json
import logging
import sys
from typing import List, Optional

from config import Config, resolve_run_config
from routes.commands import COMMANDS
from utils.errors import TsgpsError
from utils.logger import setup_logging

logger = logging.getLogger(__name__)

STUDENT_KINDS = ('student_tx', 'student_mlp')


def _add_cohort_arguments(parser: argparse.ArgumentParser, labels: bool = True) -> None:
    parser.add_argument('--expression', help='表达矩阵 CSV/TSV')
    if labels:
        parser.add_argument('--labels', help='标签 CSV (sample_id,label)')


def create_app() -> argparse.ArgumentParser:
    """
    创建命令行解析器

    Returns:
        argparse.ArgumentParser: 带全部子命令的解析器
    """
    parser = argparse.ArgumentParser(
        prog='tsgps',
        description='基于差异基因对与知识蒸馏的感染诊断模型流水线')
    parser.add_argument('--config', help='dotenv 格式的运行配置文件')
    parser.add_argument('--seed', type=int, help=f'顶层随机种子（默认 {Config.SEED}）')
    parser.add_argument('--out', help=f'输出目录（默认 {Config.OUTPUT_DIR}）')
    parser.add_argument('--preset', choices=('desk', 'paper-scale'), help='模型规模预设')
    parser.add_argument('--parallel', type=int, help='筛选与交叉验证的并行数')
    parser.add_argument('--log-level', help='日志级别')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('synth', help='生成合成数据')

    screen = sub.add_parser('screen', help='筛选 DGP 面板')
    _add_cohort_arguments(screen)
    screen.add_argument('--gmt', help='通路 GMT 文件')
    screen.add_argument('--k', type=int, help='面板大小（默认 35）')
    screen.add_argument('--task-classes', help='只用 健康 vs 指定类别 筛选，例如 1 或 1,2')
    screen.add_argument('--panel-name', help='面板文件名（默认 panel.csv）')

    teacher = sub.add_parser('train-teacher', help='训练教师模型')
    _add_cohort_arguments(teacher)
    teacher.add_argument('--panel', help='DGP 面板 CSV')
    teacher.add_argument('--epochs', type=int, help='训练轮数')
    teacher.add_argument('--name', help='输出名称（默认 teacher）')

    distill = sub.add_parser('distill', help='蒸馏学生模型')
    _add_cohort_arguments(distill)
    distill.add_argument('--teacher', help='教师检查点')
    distill.add_argument('--panel', help='学生面板（默认使用教师面板）')
    distill.add_argument('--task-classes', help='学生任务的感染类别，默认全部')
    distill.add_argument('--student-kind', choices=STUDENT_KINDS, help='学生结构（默认 student_tx）')
    distill.add_argument('--vanilla', action='store_true', help='w_distill=0 的对照训练')
    distill.add_argument('--kd-form', choices=('kl', 'verbatim'), help='蒸馏损失形式')
    distill.add_argument('--temperature', type=float, help='蒸馏温度（默认 5）')
    distill.add_argument('--epochs', type=int, help='训练轮数')
    distill.add_argument('--name', help='输出名称')

    evaluate = sub.add_parser('evaluate', help='评估检查点')
    _add_cohort_arguments(evaluate)
    evaluate.add_argument('--checkpoint', help='检查点清单 (.json)')
    evaluate.add_argument('--task-classes', help='二分类模型评估的感染类别')
    evaluate.add_argument('--kfold', type=int, help='K 折交叉验证')
    evaluate.add_argument('--epochs', type=int, help='交叉验证每折的训练轮数')
    evaluate.add_argument('--name', help='输出名称')

    predict = sub.add_parser('predict', help='对新样本预测')
    _add_cohort_arguments(predict, labels=False)
    predict.add_argument('--checkpoint', help='检查点清单 (.json)')
    predict.add_argument('--name', help='输出文件名（默认 predictions.csv）')

    report = sub.add_parser('report', help='参数量与压缩率汇总')
    report.add_argument('--checkpoints', nargs='*', help='检查点清单列表')
    report.add_argument('--teacher', dest='report_teacher', help='作为压缩基准的模型名称')
    report.add_argument('--param-counts', help='参数量覆盖，例如 teacher=18142949,student_tx=8178842')
    return parser


# --epochs 在不同子命令下对应的配置项
EPOCH_KEYS = {
    'train-teacher': 'TEACHER_EPOCHS',
    'distill': 'STUDENT_EPOCHS',
    'evaluate': 'KFOLD_EPOCHS'
}


def _overrides(args: argparse.Namespace) -> dict:
    """
    把命令行参数映射为配置项

    所有参数都进入运行配置，写出的 resolved_config.env 因此可以单独复现这次运行。
    """
    overrides = {
        'SEED': args.seed,
        'OUTPUT_DIR': args.out,
        'PRESET': args.preset,
        'PARALLEL': args.parallel,
        'LOG_LEVEL': args.log_level,
        'PANEL_SIZE': getattr(args, 'k', None),
        'KD_FORM': getattr(args, 'kd_form', None),
        'KD_TEMPERATURE': getattr(args, 'temperature', None),
        'KD_W_DISTILL': 0.0 if getattr(args, 'vanilla', False) else None,
        'INPUT_EXPRESSION': getattr(args, 'expression', None),
        'INPUT_LABELS': getattr(args, 'labels', None),
        'INPUT_GMT': getattr(args, 'gmt', None),
        'INPUT_PANEL': getattr(args, 'panel', None),
        'INPUT_TEACHER': getattr(args, 'teacher', None),
        'INPUT_CHECKPOINT': getattr(args, 'checkpoint', None),
        'TASK_CLASSES': getattr(args, 'task_classes', None),
        'STUDENT_KIND': getattr(args, 'student_kind', None),
        'KFOLD': getattr(args, 'kfold', None),
        'RUN_NAME': getattr(args, 'name', None),
        'PANEL_NAME': getattr(args, 'panel_name', None),
        'REPORT_CHECKPOINTS': getattr(args, 'checkpoints', None),
        'REPORT_TEACHER': getattr(args, 'report_teacher', None),
        'REPORT_PARAM_COUNTS': getattr(args, 'param_counts', None)
    }
    if args.command in EPOCH_KEYS:
        overrides[EPOCH_KEYS[args.command]] = getattr(args, 'epochs', None)
    return {k: v for k, v in overrides.items() if v is not None and v != []}


def main(argv: Optional[List[str]] = None) -> int:
    """
    命令行入口

    Returns:
        int: 退出码（0 成功，2 配置错误，3 数据错误，4 运行时错误）
    """
    parser = create_app()
    args = parser.parse_args(argv)
    try:
        run_config = resolve_run_config(args.config, _overrides(args))
    except TsgpsError as e:
        setup_logging()
        logger.error("配置错误: %s", e)
        print(json.dumps({'success': False, 'message': str(e), 'data': None}, ensure_ascii=False))
        return e.exit_code

    setup_logging(run_config['LOG_LEVEL'])
    logger.info("执行 %s (seed=%d, preset=%s, out=%s)", args.command, run_config.seed,
                run_config['PRESET'], run_config.output_dir)
    result, exit_code = COMMANDS[args.command](args, run_config)
    print(json.dumps(result, ensure_ascii=False, indent=2, default=str))
    return exit_code


if __name__ == '__main__':
    sys.exit(main())
