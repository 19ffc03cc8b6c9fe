"""
全局常量定义模块。
- 词表特殊符号
- 模型与训练超参默认值
- 指标与产物命名
"""
from __future__ import annotations

from typing import Dict, List, Tuple


# ---- 词表 ----
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

# ---- 预处理 ----
DEFAULT_MIN_DOC_FREQ = 3
DEFAULT_MAX_LEN = 2500

# ---- 模型超参（d_e / d_r / k / dropout） ----
DEFAULT_EMBED_DIM = 100
DEFAULT_HIDDEN_DIM = 300
DEFAULT_KERNEL_SIZE = 3
DEFAULT_DROPOUT = 0.2

# ---- 训练 ----
DEFAULT_LR = 0.008
DEFAULT_BATCH_SIZE = 16
DEFAULT_LAMBDA_FINE = 0.7
DEFAULT_LAMBDA_COARSE = 0.3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BCE_CLAMP_EPS = 1e-12

# ---- skip-gram ----
SKIPGRAM_WINDOW = 5
SKIPGRAM_NEGATIVES = 5
SKIPGRAM_EPOCHS = 5
SKIPGRAM_LR = 0.025
SKIPGRAM_MIN_LR_RATIO = 1e-4
SKIPGRAM_POWER = 0.75

# ---- 数据切分（train/dev/test） ----
DEFAULT_SPLIT_RATIOS: Tuple[float, float, float] = (0.70, 0.15, 0.15)
SPLIT_NAMES: Tuple[str, str, str] = ("train", "dev", "test")

# ---- 指标 ----
DEFAULT_THRESHOLD = 0.5
DEFAULT_P_AT_K = 5
METRIC_NAMES: List[str] = ["macro_auc", "micro_auc", "macro_f1", "micro_f1", "p_at_k"]

# ---- 任务 ----
TASK_FINE = "fine"
TASK_COARSE = "coarse"
MODE_LAMBDAS: Dict[str, Tuple[float, float] | None] = {
    "multitask": None,  # 使用配置中的 λ
    "fine_only": (1.0, 0.0),
    "coarse_only": (0.0, 1.0),
}

# ---- 产物 ----
CHECKPOINT_MAGIC = b"MTRAMCKP"
CHECKPOINT_VERSION = 1
CORPUS_FILE_TEMPLATE = "{split}.jsonl"
CODE_MAP_FILE = "code_map.json"
EMBEDDING_FILE = "embeddings.txt"
CHECKPOINT_FILE = "best.ckpt"
TRAIN_LOG_FILE = "train_log.jsonl"
REPORT_FILE_TEMPLATE = "report_{split}.json"
ABLATION_CSV = "ablation.csv"
ABLATION_RUNS_CSV = "ablation_runs.csv"
ABLATION_WINS_CSV = "ablation_wins.csv"
ABLATION_SUMMARY = "ablation_summary.md"
MANIFEST_FILE = "manifest.json"
