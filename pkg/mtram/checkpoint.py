"""
检查点容器（格式详见 docs/checkpoint-format.md）
- 魔数 + 版本 + 头长度 + 排序键 JSON 头 + 连续的小端 float64 数据区
- 相同参数与元数据得到逐字节相同的文件；float64 往返无损
- 头中记录配置哈希、种子、模型维度、词表、编码映射与每个张量的名称/形状/偏移
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List

import numpy as np

from .constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .corpus import CodeMap, Vocabulary
from .errors import CheckpointError
from .model import ModelParams, init_params
from .schemas import ModelConfig

logger = logging.getLogger(__name__)

_PREFIX = struct.Struct("<8sIQ")
_DTYPE = np.dtype("<f8")


@dataclass(eq=False)
class Checkpoint:
    params: ModelParams
    vocab: Vocabulary
    code_map: CodeMap
    model_config: ModelConfig
    config_hash: str
    seed: int
    train_mode: str = "multitask"
    meta: Dict[str, Any] = field(default_factory=dict)

    def check_label_space(self, code_map: CodeMap) -> None:
        """评估数据的标签空间必须与检查点两个头的维度一致"""
        if (code_map.m_d, code_map.m_s) != (self.params.m_d, self.params.m_s):
            raise CheckpointError(
                f"标签维度不匹配：检查点头为 (m_d={self.params.m_d}, m_s={self.params.m_s})，"
                f"数据为 (m_d={code_map.m_d}, m_s={code_map.m_s})"
            )
        if code_map.fine_codes != self.code_map.fine_codes or code_map.coarse_codes != self.code_map.coarse_codes:
            raise CheckpointError("编码集合与检查点记录的映射表不一致")


def _header(ckpt: Checkpoint) -> Dict[str, Any]:
    tensors: List[Dict[str, Any]] = []
    offset = 0
    for name, t in ckpt.params.named_tensors().items():
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.values.size * _DTYPE.itemsize
    return {
        "config_hash": ckpt.config_hash,
        "seed": ckpt.seed,
        "train_mode": ckpt.train_mode,
        "model": ckpt.params.describe(),
        "model_config": ckpt.model_config.model_dump(mode="json"),
        "vocab": list(ckpt.vocab.tokens),
        "min_doc_freq": ckpt.vocab.min_doc_freq,
        "code_map": {code: ckpt.code_map.mapping[code] for code in ckpt.code_map.fine_codes},
        "tensors": tensors,
        "data_bytes": offset,
        "meta": ckpt.meta,
    }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    chunks = [_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)), header]
    for t in ckpt.params.named_tensors().values():
        chunks.append(np.ascontiguousarray(t.values, dtype=_DTYPE).tobytes(order="C"))
    return b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)
    logger.info("检查点已写入 %s（配置哈希 %s，种子 %d）", path, ckpt.config_hash, ckpt.seed)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"无法读取检查点 {path}：{exc}") from exc
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"检查点文件过短：{path}")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"不是 MT-RAM 检查点（魔数不符）：{path}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"不支持的检查点版本 {version}（当前 {CHECKPOINT_VERSION}）")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"检查点头损坏：{exc}") from exc
    data = memoryview(blob)[start + header_len:]
    if len(data) != header["data_bytes"]:
        raise CheckpointError(f"数据区长度 {len(data)} 与头记录 {header['data_bytes']} 不符")

    model = header["model"]
    model_config = ModelConfig.model_validate(header["model_config"])
    vocab = Vocabulary(header["vocab"], min_doc_freq=header.get("min_doc_freq", 1))
    code_map = CodeMap(dict(header["code_map"]))
    skeleton = init_params(
        model_config,
        model["ram"],
        model["vocab_size"],
        model["m_d"],
        model["m_s"],
        seed=0,
    )
    expected = skeleton.named_tensors()
    stored = {entry["name"]: entry for entry in header["tensors"]}
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise CheckpointError(f"张量集合不符：缺少 {missing}，多余 {extra}")

    def restore(name: str, t):
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise CheckpointError(f"张量 {name} 形状 {shape} 与模型 {t.shape} 不符")
        count = shape[0] * shape[1]
        arr = np.frombuffer(data, dtype=_DTYPE, count=count, offset=entry["offset"]).reshape(shape)
        t.values[...] = arr
        return t

    params = skeleton.map_tensors(restore)
    logger.info("检查点已加载 %s（配置哈希 %s）", path, header["config_hash"])
    return Checkpoint(
        params=params,
        vocab=vocab,
        code_map=code_map,
        model_config=model_config,
        config_hash=header["config_hash"],
        seed=int(header["seed"]),
        train_mode=header.get("train_mode", "multitask"),
        meta=header.get("meta", {}),
    )


__all__ = ["Checkpoint", "checkpoint_bytes", "save_checkpoint", "load_checkpoint"]
