"""
统一异常定义
- 所有领域异常均继承 MtramError，便于 CLI 统一映射退出码
- 数值/形状类异常同时继承 ValueError，兼容调用方的常规捕获
"""
from __future__ import annotations

from typing import Iterable, Optional


class MtramError(Exception):
    """项目异常基类"""


class ConfigError(MtramError):
    """配置校验失败（一次性列出全部问题字段）"""

    def __init__(self, problems: Iterable[str]):
        self.problems = [str(p) for p in problems]
        super().__init__("配置校验失败：\n" + "\n".join(f"  - {p}" for p in self.problems))


class ShapeError(MtramError, ValueError):
    """张量形状不匹配"""


class NonFiniteError(MtramError, ValueError):
    """出现 NaN/Inf"""


class CorpusFormatError(MtramError):
    """语料文件格式错误，line 为 1 起始的行号"""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path:
            where += f"{path}"
        if line is not None:
            where += f" 第 {line} 行"
        super().__init__(f"{where.strip()}：{message}" if where else message)


class CodeMapError(MtramError):
    """编码映射表非法（非全映射、冲突映射等）"""


class MetricError(MtramError, ValueError):
    """指标前置条件不满足"""


class TrainingError(MtramError):
    """训练过程失败（携带 epoch / batch 上下文）"""

    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None):
        self.epoch = epoch
        self.batch = batch
        ctx = []
        if epoch is not None:
            ctx.append(f"epoch={epoch}")
        if batch is not None:
            ctx.append(f"batch={batch}")
        suffix = f"（{', '.join(ctx)}）" if ctx else ""
        super().__init__(f"{message}{suffix}")


class CheckpointError(MtramError):
    """检查点读写或维度校验失败"""


__all__ = [
    "MtramError",
    "ConfigError",
    "ShapeError",
    "NonFiniteError",
    "CorpusFormatError",
    "CodeMapError",
    "MetricError",
    "TrainingError",
    "CheckpointError",
]
