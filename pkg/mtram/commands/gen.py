"""gen：生成合成语料（train/dev/test JSONL）与编码映射表"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from ..constants import CODE_MAP_FILE, CORPUS_FILE_TEMPLATE
from ..corpus import gen_synthetic_corpus, save_code_map, split_by_id, write_jsonl
from ..schemas import RunConfig
from ..utils.artifacts import artifact_dir, write_manifest
from .common import resolve_out, run_hash

logger = logging.getLogger(__name__)

NAME = "gen"
HELP = "生成合成分层标签语料"


def configure(parser: argparse.ArgumentParser) -> None:
    return None


def run(args: argparse.Namespace, cfg: RunConfig) -> Path:
    cfg_hash = run_hash(cfg)
    out = artifact_dir(resolve_out(args.out), NAME, cfg_hash, cfg.seed)
    records, code_map = gen_synthetic_corpus(cfg.corpus, cfg.seed)
    parts = split_by_id(records, cfg.corpus.split_ratios, cfg.seed)
    files = []
    for split, recs in parts.items():
        name = CORPUS_FILE_TEMPLATE.format(split=split)
        write_jsonl(out / name, recs)
        files.append(name)
        logger.info("%s：%d 篇", name, len(recs))
    save_code_map(code_map, out / CODE_MAP_FILE)
    files.append(CODE_MAP_FILE)
    write_manifest(
        out,
        command=NAME,
        cfg_hash=cfg_hash,
        seed=cfg.seed,
        files=files,
        extra={"split_sizes": {split: len(recs) for split, recs in parts.items()}},
    )
    print(out)
    return out
