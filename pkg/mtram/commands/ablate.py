"""ablate：mode × ram × placement × seeds 消融，输出对比 CSV 与可读汇总"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Any, Dict, List

from jinja2 import Environment, FileSystemLoader

from ..constants import ABLATION_CSV, ABLATION_RUNS_CSV, ABLATION_SUMMARY, ABLATION_WINS_CSV, METRIC_NAMES
from ..schemas import RunConfig
from ..train import AblationResult, run_ablation
from ..utils.artifacts import artifact_dir, write_manifest
from .common import prepare_data, resolve_out, run_hash

logger = logging.getLogger(__name__)

NAME = "ablate"
HELP = "消融实验（±MTL / ±RAM / Add vs Mult）"

_TEMPLATES_DIR = Path(__file__).resolve().parent.parent / "templates"
_env = Environment(loader=FileSystemLoader(str(_TEMPLATES_DIR)), keep_trailing_newline=True, autoescape=False)


def configure(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--processes", type=int, default=None, help="并行训练的进程数（覆盖 ablation.processes）")


def _pm(mean: float, std: float) -> str:
    return f"{mean * 100:.1f} ± {std * 100:.1f}"


def render_summary(result: AblationResult, cfg: RunConfig, cfg_hash: str) -> str:
    rows: List[Dict[str, Any]] = []
    for rec in result.table.to_dict("records"):
        cells = {}
        for task in ("fine", "coarse"):
            for metric in METRIC_NAMES:
                key = f"{task}.{metric}"
                cells[key] = _pm(rec[f"{key}_mean"], rec[f"{key}_std"])
        rows.append({
            "config": rec["config"],
            "seed_count": int(rec["seed_count"]),
            "cells": cells,
            "loss_reduction": _pm(rec["loss_reduction_mean"], rec["loss_reduction_std"]),
        })
    wins: List[Dict[str, Any]] = []
    if not result.wins.empty:
        grouped = result.wins.groupby(["comparison", "treatment", "baseline"], sort=False)
        for (kind, treatment, baseline), frame in grouped:
            wins.append({
                "comparison": kind,
                "treatment": treatment,
                "baseline": baseline,
                "wins": int(frame["win"].sum()),
                "total": int(len(frame)),
                "per_seed": [
                    {"seed": int(r["seed"]), "win": bool(r["win"]),
                     "treatment": r["treatment_value"] * 100, "baseline": r["baseline_value"] * 100}
                    for r in frame.to_dict("records")
                ],
            })
    template = _env.get_template("ablation_summary.md.j2")
    return template.render(
        config_hash=cfg_hash,
        seed=cfg.seed,
        seeds=list(cfg.ablation.seeds),
        metrics=METRIC_NAMES,
        rows=rows,
        wins=wins,
    )


def run(args: argparse.Namespace, cfg: RunConfig) -> Path:
    data = prepare_data(cfg)
    cfg_hash = run_hash(cfg)
    out = artifact_dir(resolve_out(args.out), NAME, cfg_hash, cfg.seed)
    result = run_ablation(
        data.splits,
        cfg,
        len(data.vocab),
        data.code_map.m_d,
        data.code_map.m_s,
        embeddings=data.embeddings,
        processes=getattr(args, "processes", None),
    )
    result.table.insert(0, "config_hash", cfg_hash)
    result.runs.insert(0, "config_hash", cfg_hash)
    result.wins.insert(0, "config_hash", cfg_hash)
    result.table.to_csv(out / ABLATION_CSV, index=False)
    result.runs.to_csv(out / ABLATION_RUNS_CSV, index=False)
    result.wins.to_csv(out / ABLATION_WINS_CSV, index=False)
    (out / ABLATION_SUMMARY).write_text(render_summary(result, cfg, cfg_hash), encoding="utf-8")
    write_manifest(
        out,
        command=NAME,
        cfg_hash=cfg_hash,
        seed=cfg.seed,
        files=[ABLATION_CSV, ABLATION_RUNS_CSV, ABLATION_WINS_CSV, ABLATION_SUMMARY],
        extra={"runs": int(len(result.runs)), "cells": int(len(result.table))},
    )
    logger.info("消融完成：%d 次训练，%d 个配置", len(result.runs), len(result.table))
    print(out / ABLATION_SUMMARY)
    return out
