"""
进程级配置加载模块
- 所有配置从 .env 与环境变量加载（UTF-8，前缀 MTRAM_）
- 通过 pydantic-settings 提供类型安全的设置对象
- 运行级（实验）配置见 schemas.RunConfig，与此处的进程设置分离
"""
from __future__ import annotations

import logging

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """全局配置（.env）"""

    LOG_DIR: str = "logs"
    LOG_LEVEL: str = "INFO"
    # 日志按天切割后保留的份数
    LOG_FILE_BACKUPS: int = 14

    # 产物根目录：每次运行在其下按 <命令>-<配置哈希>-s<种子> 建子目录
    OUT_DIR: str = "runs"

    # 单批次内按文档并行前向/反向的线程数；梯度归并顺序固定，结果与线程数无关
    WORKERS: int = 1

    # 是否显示 tqdm 进度条
    PROGRESS: bool = True

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def _normalize_log_level(cls, value) -> str:
        """支持大小写混写与 WARN 之类的别名"""
        if value in (None, ""):
            return "INFO"
        v = str(value).strip().upper()
        v = {"WARN": "WARNING", "ERR": "ERROR", "FATAL": "CRITICAL"}.get(v, v)
        if not isinstance(logging.getLevelName(v), int):
            return "INFO"
        return v

    @field_validator("WORKERS", mode="before")
    @classmethod
    def _normalize_workers(cls, value) -> int:
        if value in (None, ""):
            return 1
        try:
            return max(1, int(value))
        except (TypeError, ValueError):
            return 1

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="MTRAM_",
        extra="ignore",
    )


settings = Settings()
