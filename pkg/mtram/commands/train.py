"""train：预处理 → 词表 → 编码 → 训练，写出最佳检查点、逐 epoch 日志与验证集报告"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from ..checkpoint import Checkpoint, save_checkpoint
from ..config import settings
from ..constants import CHECKPOINT_FILE, REPORT_FILE_TEMPLATE, TRAIN_LOG_FILE
from ..schemas import RunConfig
from ..train import evaluate_split, train
from ..utils.artifacts import append_jsonl, artifact_dir, write_json, write_manifest
from .common import build_params, prepare_data, resolve_out, run_hash

logger = logging.getLogger(__name__)

NAME = "train"
HELP = "训练 MT-RAM 模型"


def configure(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--workers", type=int, default=None, help="批内按文档并行的线程数（默认取 MTRAM_WORKERS）")


def run(args: argparse.Namespace, cfg: RunConfig) -> Path:
    data = prepare_data(cfg)
    cfg_hash = run_hash(cfg)
    out = artifact_dir(resolve_out(args.out), NAME, cfg_hash, cfg.seed)
    log_path = out / TRAIN_LOG_FILE
    log_path.write_text("", encoding="utf-8")

    params = build_params(cfg, data)
    result = train(
        data.splits,
        params,
        cfg.train,
        dropout=cfg.model.dropout,
        freeze_embeddings=cfg.model.freeze_embeddings,
        metric_options=cfg.metrics,
        workers=getattr(args, "workers", None) or settings.WORKERS,
        on_epoch=lambda record: append_jsonl(log_path, record),
    )

    ckpt = Checkpoint(
        params=result.best_params,
        vocab=data.vocab,
        code_map=data.code_map,
        model_config=cfg.model,
        config_hash=cfg_hash,
        seed=cfg.seed,
        train_mode=cfg.train.mode,
        meta={"best_epoch": result.best_epoch, "selection_task": cfg.train.selection_task},
    )
    save_checkpoint(ckpt, out / CHECKPOINT_FILE)

    # epochs=0 时没有验证记录，这里对最终选中的参数重新评估一次
    reports = result.dev_reports or evaluate_split(data.splits.dev, result.best_params, cfg.metrics)
    report_name = REPORT_FILE_TEMPLATE.format(split="dev")
    write_json(out / report_name, {
        task: report.model_copy(update={"seed": cfg.seed, "config_hash": cfg_hash}).model_dump(mode="json")
        for task, report in reports.items()
    })
    write_manifest(
        out,
        command=NAME,
        cfg_hash=cfg_hash,
        seed=cfg.seed,
        files=[CHECKPOINT_FILE, TRAIN_LOG_FILE, report_name],
        extra={"best_epoch": result.best_epoch, "vocab_size": len(data.vocab)},
    )
    for task, report in reports.items():
        logger.info("dev %s：%s", task, report.as_percent())
    print(out)
    return out
