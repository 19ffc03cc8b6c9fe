"""
Pydantic 模型定义（运行配置 / 语料记录 / 指标报告）
"""
from __future__ import annotations

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_DROPOUT,
    DEFAULT_EMBED_DIM,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_KERNEL_SIZE,
    DEFAULT_LAMBDA_COARSE,
    DEFAULT_LAMBDA_FINE,
    DEFAULT_LR,
    DEFAULT_MAX_LEN,
    DEFAULT_MIN_DOC_FREQ,
    DEFAULT_P_AT_K,
    DEFAULT_SPLIT_RATIOS,
    DEFAULT_THRESHOLD,
    MODE_LAMBDAS,
    SKIPGRAM_EPOCHS,
    SKIPGRAM_LR,
    SKIPGRAM_NEGATIVES,
    SKIPGRAM_WINDOW,
)

TrainMode = Literal["multitask", "fine_only", "coarse_only"]
RamMode = Literal["mult", "add", "off"]
RamPlacement = Literal["shared", "branch"]
Task = Literal["fine", "coarse", "both"]


class CorpusRecord(BaseModel):
    """语料 JSONL 的一行：ccs 缺省时由编码映射表推导"""

    model_config = ConfigDict(extra="ignore")

    id: str
    text: str
    icd: List[str]
    ccs: Optional[List[str]] = None


class CorpusSpec(BaseModel):
    """合成语料规格（替代访问受限的真实病历数据）"""

    n_docs: int = Field(default=8000, ge=1)
    vocab_size: int = Field(default=2000, ge=2)
    m_d: int = Field(default=50, ge=1)
    m_s: int = Field(default=38, ge=1)
    # 文档长度 ~ 均匀分布 [min_len, max_len]
    min_len: int = Field(default=40, ge=1)
    max_len: int = Field(default=120, ge=1)
    # 每篇文档期望的细粒度编码个数
    label_sparsity: float = Field(default=4.0, gt=0)
    # 编码先验 ∝ 1/(rank+1)^zipf_exponent，模拟“最常见的 50 个编码”
    zipf_exponent: float = Field(default=1.0, ge=0)
    signal_tokens_per_code: int = Field(default=8, ge=1)
    noise_rate: float = Field(default=0.3, ge=0, le=1)
    split_ratios: Tuple[float, float, float] = DEFAULT_SPLIT_RATIOS

    @model_validator(mode="after")
    def _check_shape(self) -> "CorpusSpec":
        if self.m_s > self.m_d:
            raise ValueError(f"m_s ({self.m_s}) 不能大于 m_d ({self.m_d})")
        if self.min_len > self.max_len:
            raise ValueError(f"min_len ({self.min_len}) 不能大于 max_len ({self.max_len})")
        if self.label_sparsity > 0.95 * self.m_d:
            raise ValueError("label_sparsity 过大：单个编码先验会超过 0.95")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ValueError("split_ratios 需为非负且和为 1")
        return self


class ModelConfig(BaseModel):
    embed_dim: int = Field(default=DEFAULT_EMBED_DIM, ge=1)
    hidden_dim: int = Field(default=DEFAULT_HIDDEN_DIM, ge=2)
    kernel_size: int = Field(default=DEFAULT_KERNEL_SIZE, ge=1)
    dropout: float = Field(default=DEFAULT_DROPOUT, ge=0, lt=1)
    ram_placement: RamPlacement = "shared"
    max_len: int = Field(default=DEFAULT_MAX_LEN, ge=1)
    min_doc_freq: int = Field(default=DEFAULT_MIN_DOC_FREQ, ge=1)
    freeze_embeddings: bool = False

    @field_validator("hidden_dim")
    @classmethod
    def _hidden_even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("hidden_dim (d_r) 必须为偶数（RAM 会将其减半）")
        return value

    @field_validator("kernel_size")
    @classmethod
    def _kernel_odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel_size 必须为奇数")
        return value


class TrainConfig(BaseModel):
    lr: float = Field(default=DEFAULT_LR, gt=0)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    epochs: int = Field(default=10, ge=0)
    lambda_fine: float = Field(default=DEFAULT_LAMBDA_FINE, ge=0)
    lambda_coarse: float = Field(default=DEFAULT_LAMBDA_COARSE, ge=0)
    seed: int = 0
    mode: TrainMode = "multitask"
    ram: RamMode = "mult"
    beta1: float = Field(default=ADAM_BETA1, ge=0, lt=1)
    beta2: float = Field(default=ADAM_BETA2, ge=0, lt=1)
    eps: float = Field(default=ADAM_EPS, gt=0)
    # 连续多少个 epoch 验证指标无提升即停止；None 表示跑满 epochs
    patience: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_lambdas(self) -> "TrainConfig":
        if self.lambda_fine == 0 and self.lambda_coarse == 0:
            raise ValueError("lambda_fine 与 lambda_coarse 不能同时为 0")
        return self

    @property
    def lambdas(self) -> Tuple[float, float]:
        """按训练模式生效的 (λ_d, λ_s)"""
        fixed = MODE_LAMBDAS[self.mode]
        if fixed is not None:
            return fixed
        return self.lambda_fine, self.lambda_coarse

    @property
    def selection_task(self) -> str:
        return "coarse" if self.mode == "coarse_only" else "fine"


class MetricOptions(BaseModel):
    threshold: float = Field(default=DEFAULT_THRESHOLD, gt=0, lt=1)
    k: int = Field(default=DEFAULT_P_AT_K, ge=1)


class SkipgramConfig(BaseModel):
    window: int = Field(default=SKIPGRAM_WINDOW, ge=1)
    negatives: int = Field(default=SKIPGRAM_NEGATIVES, ge=1)
    epochs: int = Field(default=SKIPGRAM_EPOCHS, ge=0)
    lr: float = Field(default=SKIPGRAM_LR, gt=0)


class PathsConfig(BaseModel):
    """输入路径；校验阶段检查存在性（见 commands.common.validate_inputs）"""

    corpus_dir: Optional[str] = None
    code_map: Optional[str] = None
    embeddings: Optional[str] = None
    checkpoint: Optional[str] = None


class AblationConfig(BaseModel):
    modes: List[TrainMode] = Field(default_factory=lambda: ["multitask", "fine_only"])
    rams: List[RamMode] = Field(default_factory=lambda: ["mult", "off"])
    placements: List[RamPlacement] = Field(default_factory=lambda: ["shared"])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    processes: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _non_empty(self) -> "AblationConfig":
        if not self.modes or not self.rams or not self.placements:
            raise ValueError("消融网格不能为空")
        if not self.seeds:
            raise ValueError("至少需要一个种子")
        return self


class RunConfig(BaseModel):
    """一次运行的完整配置（JSON 文件 + --set 覆盖）"""

    seed: int = 0
    corpus: CorpusSpec = Field(default_factory=CorpusSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    metrics: MetricOptions = Field(default_factory=MetricOptions)
    skipgram: SkipgramConfig = Field(default_factory=SkipgramConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def _sync_seed(self) -> "RunConfig":
        # 运行种子是唯一来源
        self.train.seed = self.seed
        return self


class MetricsReport(BaseModel):
    """多标签评估报告；所有指标取值 [0, 1]"""

    macro_auc: float = Field(ge=0, le=1)
    micro_auc: float = Field(ge=0, le=1)
    macro_f1: float = Field(ge=0, le=1)
    micro_f1: float = Field(ge=0, le=1)
    p_at_k: float = Field(ge=0, le=1)
    k: int = DEFAULT_P_AT_K
    auc_skipped_labels: int = 0
    task: Optional[str] = None
    seed: Optional[int] = None
    config_hash: Optional[str] = None

    def metric_values(self) -> Dict[str, float]:
        return {
            "macro_auc": self.macro_auc,
            "micro_auc": self.micro_auc,
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "p_at_k": self.p_at_k,
        }

    def as_percent(self) -> Dict[str, str]:
        """百分制、一位小数"""
        return {name: f"{value * 100:.1f}" for name, value in self.metric_values().items()}
