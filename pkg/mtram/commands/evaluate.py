"""eval：加载检查点，在指定划分上评估细/粗粒度任务并写出报告"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Dict, List

from ..checkpoint import load_checkpoint
from ..constants import REPORT_FILE_TEMPLATE, SPLIT_NAMES, TASK_COARSE, TASK_FINE
from ..corpus import encode_records, load_code_map
from ..schemas import MetricsReport, RunConfig
from ..train import evaluate_split
from ..utils.artifacts import artifact_dir, write_json, write_manifest
from .common import code_map_path, drop_empty, load_split_records, resolve_out, run_hash, validate_inputs

logger = logging.getLogger(__name__)

NAME = "eval"
HELP = "评估检查点"

# 训练模式下 λ 为 0 的那个头没有被训练过
_UNTRAINED = {"fine_only": TASK_COARSE, "coarse_only": TASK_FINE}


def configure(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", default=None, help="检查点路径（覆盖 paths.checkpoint）")
    parser.add_argument("--split", default="test", choices=list(SPLIT_NAMES), help="评估的划分，默认 test")
    parser.add_argument("--task", default="both", choices=[TASK_FINE, TASK_COARSE, "both"], help="评估的任务")


def format_report(task: str, report: MetricsReport) -> str:
    cells = "  ".join(f"{name}={value}" for name, value in report.as_percent().items())
    return f"[{task}] {cells}  (k={report.k}, auc_skipped={report.auc_skipped_labels})"


def run(args: argparse.Namespace, cfg: RunConfig) -> Path:
    if getattr(args, "checkpoint", None):
        cfg.paths.checkpoint = args.checkpoint
    split = getattr(args, "split", "test")
    task_arg = getattr(args, "task", "both")
    validate_inputs(cfg, splits=[split], need_checkpoint=True)

    ckpt = load_checkpoint(cfg.paths.checkpoint)
    cm_path = code_map_path(cfg)
    if cm_path is not None and cm_path.is_file():
        ckpt.check_label_space(load_code_map(cm_path))
    docs = drop_empty(
        encode_records(load_split_records(cfg, split), ckpt.vocab, ckpt.code_map, ckpt.model_config.max_len),
        split,
    )

    tasks: List[str] = [TASK_FINE, TASK_COARSE] if task_arg == "both" else [task_arg]
    warnings: List[str] = []
    untrained = _UNTRAINED.get(ckpt.train_mode)
    if untrained in tasks:
        msg = f"{untrained} 头在 {ckpt.train_mode} 模式下未经训练，其指标仅反映随机初始化"
        logger.warning(msg)
        warnings.append(msg)

    all_reports = evaluate_split(docs, ckpt.params, cfg.metrics, seed=ckpt.seed, config_hash=ckpt.config_hash)
    reports: Dict[str, MetricsReport] = {task: all_reports[task] for task in tasks}

    cfg_hash = run_hash(cfg, split=split, task=task_arg, checkpoint_config_hash=ckpt.config_hash)
    out = artifact_dir(resolve_out(args.out), NAME, cfg_hash, cfg.seed)
    report_name = REPORT_FILE_TEMPLATE.format(split=split)
    write_json(out / report_name, {task: r.model_dump(mode="json") for task, r in reports.items()})
    extra = {"split": split, "tasks": tasks, "checkpoint_config_hash": ckpt.config_hash}
    if warnings:
        extra["warnings"] = warnings
    write_manifest(out, command=NAME, cfg_hash=cfg_hash, seed=cfg.seed, files=[report_name], extra=extra)
    for task in tasks:
        print(format_report(task, reports[task]))
    return out
