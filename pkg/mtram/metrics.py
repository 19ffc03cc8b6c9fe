"""
多标签评估指标
- micro/macro F1（固定阈值二值化，0/0 记为 0）
- micro/macro AUC（秩和公式，平均秩处理并列；退化标签跳过并计数）
- P@k（稳定排序，得分并列时取较小的标签下标）
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.stats import rankdata

from .constants import DEFAULT_P_AT_K, DEFAULT_THRESHOLD
from .errors import MetricError, ShapeError
from .schemas import MetricsReport

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class PredictionSet:
    """一个任务上的评估输入：得分 n×m（概率），标签 n×m（0/1），F1 二值化阈值"""

    scores: np.ndarray
    labels: np.ndarray
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape != self.labels.shape:
            raise ShapeError(f"scores {self.scores.shape} 与 labels {self.labels.shape} 形状需一致且为二维")
        if not np.isin(self.labels, (0.0, 1.0)).all():
            raise ValueError("labels 只能取 0/1")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores 含 NaN/Inf")

    @property
    def n_docs(self) -> int:
        return self.scores.shape[0]

    @property
    def n_labels(self) -> int:
        return self.scores.shape[1]


def _safe_div(num: float, den: float) -> float:
    return float(num) / float(den) if den > 0 else 0.0


def _f1(tp: float, fp: float, fn: float) -> float:
    return _safe_div(2.0 * tp, 2.0 * tp + fp + fn)


def confusion_counts(pred: PredictionSet, threshold: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """逐标签的 (TP, FP, FN)；得分 ≥ threshold 判为正"""
    threshold = pred.threshold if threshold is None else threshold
    y_hat = (pred.scores >= threshold).astype(np.float64)
    y = pred.labels
    tp = (y_hat * y).sum(axis=0)
    fp = (y_hat * (1.0 - y)).sum(axis=0)
    fn = ((1.0 - y_hat) * y).sum(axis=0)
    return tp, fp, fn


def per_label_f1(pred: PredictionSet, threshold: Optional[float] = None) -> np.ndarray:
    tp, fp, fn = confusion_counts(pred, threshold)
    return np.array([_f1(a, b, c) for a, b, c in zip(tp, fp, fn)])


def micro_macro_f1(pred: PredictionSet, threshold: Optional[float] = None) -> Tuple[float, float]:
    """返回 (micro_f1, macro_f1)；无正例也无预测正例的标签 F1 记 0 并计入宏平均"""
    threshold = pred.threshold if threshold is None else threshold
    if pred.n_docs == 0:
        raise MetricError("没有文档，无法计算 F1")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold 需在 (0, 1)，收到 {threshold}")
    tp, fp, fn = confusion_counts(pred, threshold)
    micro = _f1(tp.sum(), fp.sum(), fn.sum())
    macro = float(np.mean([_f1(a, b, c) for a, b, c in zip(tp, fp, fn)]))
    return micro, macro


def binary_auc(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Mann-Whitney 秩和形式的 ROC AUC；正例或负例为空时返回 None"""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[labels == 1.0].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def micro_macro_auc(pred: PredictionSet) -> Tuple[float, float, int]:
    """返回 (micro_auc, macro_auc, 跳过的退化标签数)"""
    per_label = []
    skipped = 0
    for j in range(pred.n_labels):
        auc = binary_auc(pred.scores[:, j], pred.labels[:, j])
        if auc is None:
            skipped += 1
            continue
        per_label.append(auc)
    if not per_label:
        raise MetricError("所有标签都是退化标签（全正或全负），无法计算 macro AUC")
    if skipped:
        logger.warning("macro AUC 跳过了 %d 个退化标签（共 %d 个）", skipped, pred.n_labels)
    micro = binary_auc(pred.scores.reshape(-1), pred.labels.reshape(-1))
    if micro is None:
        raise MetricError("展平后没有正例或没有负例，无法计算 micro AUC")
    return micro, float(np.mean(per_label)), skipped


def precision_at_k(pred: PredictionSet, k: int = DEFAULT_P_AT_K) -> float:
    """每篇文档取得分最高的 k 个标签，命中数 / k，再对文档求平均"""
    if k < 1:
        raise ValueError(f"k 必须 ≥ 1，收到 {k}")
    if k > pred.n_labels:
        raise MetricError(f"k={k} 大于标签数 {pred.n_labels}")
    if pred.n_docs == 0:
        raise MetricError("没有文档，无法计算 P@k")
    # 对负得分做稳定排序：并列时保留原下标顺序，即较小下标优先
    top = np.argsort(-pred.scores, axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(pred.labels, top, axis=1).sum(axis=1)
    return float(np.mean(hits / k))


def evaluate(
    pred: PredictionSet,
    threshold: Optional[float] = None,
    k: int = DEFAULT_P_AT_K,
    **meta,
) -> MetricsReport:
    micro_auc, macro_auc, skipped = micro_macro_auc(pred)
    micro_f1, macro_f1 = micro_macro_f1(pred, threshold)
    return MetricsReport(
        macro_auc=macro_auc,
        micro_auc=micro_auc,
        macro_f1=macro_f1,
        micro_f1=micro_f1,
        p_at_k=precision_at_k(pred, k),
        k=k,
        auc_skipped_labels=skipped,
        **meta,
    )


def prefixed(report: MetricsReport, task: str) -> Dict[str, float]:
    """训练日志中的扁平键：fine.micro_f1 等"""
    return {f"{task}.{name}": value for name, value in report.metric_values().items()}


__all__ = [
    "PredictionSet",
    "confusion_counts",
    "per_label_f1",
    "micro_macro_f1",
    "binary_auc",
    "micro_macro_auc",
    "precision_at_k",
    "evaluate",
    "prefixed",
]
