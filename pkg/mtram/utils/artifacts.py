"""
运行产物工具函数（统一在此落盘，便于各子命令复用）
- 配置哈希：规范 JSON（排序键、无空白）的 SHA-256，取前 12 位
- 产物目录：<out>/<command>-<hash12>-s<seed>/，不同配置不会落到同一路径
- JSON / JSONL 一律 sort_keys + ensure_ascii=False，且不写时间戳，保证逐字节可复现
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel

from ..constants import MANIFEST_FILE

logger = logging.getLogger(__name__)


def canonical_json(payload: Any) -> str:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(payload: Any, length: int = 12) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:length]


def artifact_dir(out: str | Path, command: str, cfg_hash: str, seed: int) -> Path:
    path = Path(out) / f"{command}-{cfg_hash}-s{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: str | Path, payload: Any) -> Path:
    """缩进 2、排序键、末尾换行"""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    path = Path(path)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def jsonl_line(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n"


def append_jsonl(path: str | Path, record: Dict[str, Any]) -> None:
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write(jsonl_line(record))


def write_manifest(
    directory: str | Path,
    *,
    command: str,
    cfg_hash: str,
    seed: int,
    files: List[str],
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """记录本次命令的产物清单（仅相对文件名，不含时间）"""
    directory = Path(directory)
    payload: Dict[str, Any] = {
        "command": command,
        "config_hash": cfg_hash,
        "seed": seed,
        "files": sorted(files),
    }
    if extra:
        payload.update(extra)
    path = write_json(directory / MANIFEST_FILE, payload)
    logger.info("产物清单已写入 %s（%d 个文件）", path, len(files))
    return path


__all__ = [
    "canonical_json",
    "config_hash",
    "artifact_dir",
    "write_json",
    "jsonl_line",
    "append_jsonl",
    "write_manifest",
]
