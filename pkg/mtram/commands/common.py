"""
子命令公共依赖：运行配置加载与校验、语料准备、参数构建
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from ..config import settings
from ..constants import CODE_MAP_FILE, CORPUS_FILE_TEMPLATE, SPLIT_NAMES
from ..corpus import (
    CodeMap,
    EncodedDocument,
    Vocabulary,
    build_vocab,
    encode_records,
    load_code_map,
    load_embeddings,
    load_jsonl,
    tokenize_and_clean,
)
from ..errors import ConfigError, ShapeError
from ..model import ModelParams, glorot, init_params
from ..schemas import CorpusRecord, RunConfig
from ..train import Splits
from ..utils.artifacts import config_hash

logger = logging.getLogger(__name__)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(payload: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """按 dotted.path=value 覆盖配置字段；value 能按 JSON 解析则解析，否则按字符串"""
    problems: List[str] = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"--set {item!r}：需要 key=value 形式")
            continue
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            problems.append(f"--set {item!r}：字段路径为空")
            continue
        node = payload
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                problems.append(f"--set {key}：{part} 不是对象")
                break
            node = child
        else:
            node[parts[-1]] = _parse_value(raw)
    if problems:
        raise ConfigError(problems)
    return payload


def load_run_config(
    config_path: Optional[str],
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    """JSON 文件 → --set 覆盖 → --seed → pydantic 校验；所有问题一次性列出"""
    payload: Dict[str, Any] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError([f"--config：文件不存在 {path}"])
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"--config：JSON 解析失败（第 {exc.lineno} 行）{exc.msg}"]) from exc
        if not isinstance(payload, dict):
            raise ConfigError(["--config：顶层必须是 JSON 对象"])
    apply_overrides(payload, overrides)
    if seed is not None:
        payload["seed"] = seed
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            problems.append(f"{loc}: {err['msg']}")
        raise ConfigError(problems) from exc


def run_hash(cfg: RunConfig, **invocation: Any) -> str:
    """运行哈希；invocation 记录不在配置里、但决定产物内容的命令行参数"""
    if not invocation:
        return config_hash(cfg)
    return config_hash({"config": cfg.model_dump(mode="json"), **invocation})


def resolve_out(out: Optional[str]) -> Path:
    return Path(out or settings.OUT_DIR)


def corpus_file(corpus_dir: str | Path, split: str) -> Path:
    return Path(corpus_dir) / CORPUS_FILE_TEMPLATE.format(split=split)


def code_map_path(cfg: RunConfig) -> Optional[Path]:
    if cfg.paths.code_map:
        return Path(cfg.paths.code_map)
    if cfg.paths.corpus_dir:
        return Path(cfg.paths.corpus_dir) / CODE_MAP_FILE
    return None


def validate_inputs(cfg: RunConfig, *, splits: Sequence[str] = (), need_code_map: bool = False,
                    need_checkpoint: bool = False) -> None:
    """检查引用的输入路径是否存在，缺失项以 dotted 字段名一次性报告"""
    problems: List[str] = []
    if splits:
        if not cfg.paths.corpus_dir:
            problems.append("paths.corpus_dir: 未设置")
        elif not Path(cfg.paths.corpus_dir).is_dir():
            problems.append(f"paths.corpus_dir: 目录不存在 {cfg.paths.corpus_dir}")
        else:
            for split in splits:
                f = corpus_file(cfg.paths.corpus_dir, split)
                if not f.is_file():
                    problems.append(f"paths.corpus_dir: 缺少 {f.name}")
    if need_code_map:
        cm = code_map_path(cfg)
        if cm is None:
            problems.append("paths.code_map: 未设置")
        elif not cm.is_file():
            problems.append(f"paths.code_map: 文件不存在 {cm}")
    if cfg.paths.embeddings and not Path(cfg.paths.embeddings).is_file():
        problems.append(f"paths.embeddings: 文件不存在 {cfg.paths.embeddings}")
    if need_checkpoint:
        if not cfg.paths.checkpoint:
            problems.append("paths.checkpoint: 未设置")
        elif not Path(cfg.paths.checkpoint).is_file():
            problems.append(f"paths.checkpoint: 文件不存在 {cfg.paths.checkpoint}")
    if problems:
        raise ConfigError(problems)


def load_split_records(cfg: RunConfig, split: str) -> List[CorpusRecord]:
    records = load_jsonl(corpus_file(cfg.paths.corpus_dir, split))
    logger.info("读取 %s 划分：%d 篇文档", split, len(records))
    return records


@dataclass(eq=False)
class PreparedData:
    vocab: Vocabulary
    code_map: CodeMap
    splits: Splits
    embeddings: Optional[np.ndarray] = None


def pretrained_matrix(cfg: RunConfig, vocab: Vocabulary) -> Optional[np.ndarray]:
    """读取预训练词向量并按词表对齐；词表外的词用按种子生成的均匀初始化"""
    if not cfg.paths.embeddings:
        return None
    table = load_embeddings(cfg.paths.embeddings)
    if table.dim != cfg.model.embed_dim:
        raise ShapeError(f"词向量维度 {table.dim} 与 model.embed_dim={cfg.model.embed_dim} 不一致")
    rng = np.random.default_rng([cfg.seed, 1])
    fallback = glorot(rng, (len(vocab), table.dim), len(vocab), table.dim)
    return table.align_to(vocab, fallback)


def drop_empty(docs: List[EncodedDocument], split: str) -> List[EncodedDocument]:
    kept = [d for d in docs if len(d) > 0]
    if len(kept) != len(docs):
        logger.warning("%s 划分中 %d 篇文档清洗后为空，已跳过", split, len(docs) - len(kept))
    return kept


def prepare_data(cfg: RunConfig) -> PreparedData:
    """训练前处理：读三个划分 → 用训练集建词表 → 截断编码"""
    validate_inputs(cfg, splits=SPLIT_NAMES, need_code_map=True)
    code_map = load_code_map(code_map_path(cfg))
    raw = {split: load_split_records(cfg, split) for split in SPLIT_NAMES}
    vocab = build_vocab([tokenize_and_clean(r.text) for r in raw["train"]], cfg.model.min_doc_freq)
    encoded = {split: drop_empty(encode_records(recs, vocab, code_map, cfg.model.max_len), split) for split, recs in raw.items()}
    splits = Splits(train=encoded["train"], dev=encoded["dev"], test=encoded["test"])
    return PreparedData(vocab, code_map, splits, pretrained_matrix(cfg, vocab))


def build_params(cfg: RunConfig, data: PreparedData) -> ModelParams:
    return init_params(
        cfg.model,
        cfg.train.ram,
        len(data.vocab),
        data.code_map.m_d,
        data.code_map.m_s,
        cfg.seed,
        data.embeddings,
    )


__all__ = [
    "apply_overrides",
    "load_run_config",
    "run_hash",
    "resolve_out",
    "corpus_file",
    "code_map_path",
    "validate_inputs",
    "load_split_records",
    "PreparedData",
    "pretrained_matrix",
    "drop_empty",
    "prepare_data",
    "build_params",
]
