"""
多任务训练：
- 每篇文档：前向两个头 → 各自 BCE（对标签求和）→ λ_d·L_d + λ_s·L_s → 反向
- 批内按文档顺序累加梯度后取均值，再做一次 Adam 更新（单写者）
- 每个 epoch 在验证集上评估两个任务，按选择任务的 micro-F1 保留最佳参数
- 消融：mode × ram × placement × seeds 网格，汇总均值 ± 标准差与逐种子胜负
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import settings
from .constants import BCE_CLAMP_EPS, METRIC_NAMES, PAD_ID, TASK_COARSE, TASK_FINE
from .corpus import EncodedDocument
from .errors import NonFiniteError, ShapeError, TrainingError
from .metrics import PredictionSet, evaluate, prefixed
from .model import ModelParams, init_params, model_forward, predict
from .numcore import DiffTensor, Tape
from .schemas import MetricOptions, MetricsReport, RunConfig, TrainConfig

logger = logging.getLogger(__name__)


# ---------- 损失 ----------


def bce_loss(tape: Tape, probs: DiffTensor, targets: np.ndarray) -> DiffTensor:
    """Σ_i [-y_i log p_i - (1-y_i) log(1-p_i)]，p 截断到 [ε, 1-ε]"""
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if y.size != probs.values.size:
        raise ShapeError(f"BCE 长度不匹配：probs {probs.values.size}，targets {y.size}")
    return tape.bce_from_probs(probs, y, BCE_CLAMP_EPS)


def joint_loss(
    tape: Tape,
    loss_fine: DiffTensor,
    loss_coarse: DiffTensor,
    cfg: Union[TrainConfig, Tuple[float, float]],
) -> DiffTensor:
    lambda_fine, lambda_coarse = cfg.lambdas if isinstance(cfg, TrainConfig) else cfg
    return tape.add(tape.scale(loss_fine, lambda_fine), tape.scale(loss_coarse, lambda_coarse))


# ---------- Adam ----------


@dataclass(eq=False)
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, DiffTensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.values) for name, p in params.items()},
            v={name: np.zeros_like(p.values) for name, p in params.items()},
        )


def adam_step(
    params: Mapping[str, DiffTensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """带偏差修正的 Adam，就地更新参数；任一梯度非有限则整步放弃"""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"未知参数 {name}")
        if g.shape != params[name].shape or state.m[name].shape != g.shape:
            raise ShapeError(f"参数 {name} 形状 {params[name].shape} 与梯度 {g.shape} 不一致")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"参数 {name} 的梯度含 NaN/Inf，已放弃本次更新")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].values -= cfg.lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.eps)


# ---------- 训练循环 ----------


@dataclass(eq=False)
class Splits:
    train: List[EncodedDocument]
    dev: List[EncodedDocument]
    test: List[EncodedDocument] = field(default_factory=list)

    def check(self) -> None:
        if not self.train:
            raise TrainingError("训练集为空")
        if not self.dev:
            raise TrainingError("验证集为空")
        seen: Dict[str, str] = {}
        for name, docs in (("train", self.train), ("dev", self.dev), ("test", self.test)):
            for doc in docs:
                other = seen.setdefault(doc.id, name)
                if other != name:
                    raise TrainingError(f"文档 {doc.id!r} 同时出现在 {other} 与 {name}")


@dataclass(eq=False)
class TrainResult:
    best_params: ModelParams
    best_epoch: int
    best_score: Optional[float]
    log: List[Dict[str, Any]]
    # 每个 batch 的损失（loss_fine / loss_coarse / loss_joint）
    steps: List[Dict[str, float]]
    dev_reports: Dict[str, MetricsReport]


@dataclass(eq=False)
class _DocOutcome:
    loss_fine: float
    loss_coarse: float
    loss_joint: float
    grads: Dict[str, np.ndarray]


def _doc_step(
    doc: EncodedDocument,
    params: ModelParams,
    cfg: TrainConfig,
    dropout: float,
    rng: np.random.Generator,
    trainable: Sequence[str],
) -> _DocOutcome:
    result = model_forward(doc, params, training=True, rng=rng, dropout=dropout)
    tape = result.tape
    lf = bce_loss(tape, result.fine.probs, doc.fine_labels)
    ls = bce_loss(tape, result.coarse.probs, doc.coarse_labels)
    joint = joint_loss(tape, lf, ls, cfg)
    if not np.isfinite(joint.item()):
        raise NonFiniteError(f"文档 {doc.id!r} 的 loss 非有限")
    tape.backward(joint)
    views = result.views.named_tensors()
    return _DocOutcome(lf.item(), ls.item(), joint.item(), {name: views[name].grad for name in trainable})


def evaluate_split(
    docs: Sequence[EncodedDocument],
    params: ModelParams,
    options: MetricOptions,
    **meta,
) -> Dict[str, MetricsReport]:
    """对两个任务分别评估，返回 {"fine": ..., "coarse": ...}"""
    fine_scores, coarse_scores = predict(docs, params)
    fine = PredictionSet(fine_scores, np.stack([d.fine_labels for d in docs]), options.threshold)
    coarse = PredictionSet(coarse_scores, np.stack([d.coarse_labels for d in docs]), options.threshold)
    return {
        TASK_FINE: evaluate(fine, k=min(options.k, params.m_d), task=TASK_FINE, **meta),
        TASK_COARSE: evaluate(coarse, k=min(options.k, params.m_s), task=TASK_COARSE, **meta),
    }


def _trainable_names(params: ModelParams, freeze_embeddings: bool) -> List[str]:
    names = list(params.named_tensors())
    if freeze_embeddings:
        names.remove("embeddings")
    return names


def train(
    splits: Splits,
    params: ModelParams,
    cfg: TrainConfig,
    *,
    dropout: float = 0.0,
    freeze_embeddings: bool = False,
    metric_options: Optional[MetricOptions] = None,
    workers: Optional[int] = None,
    progress: Optional[bool] = None,
    on_epoch: Optional[Callable[[Dict[str, Any]], None]] = None,
) -> TrainResult:
    """训练并返回最佳参数与逐 epoch 日志。

    params 会被就地更新；返回的 best_params 是独立拷贝。
    同一种子下结果与 workers 无关：每篇文档的 dropout 随机源由 (seed, epoch, 位置) 决定，
    梯度按文档顺序累加。
    """
    splits.check()
    options = metric_options or MetricOptions()
    workers = workers or settings.WORKERS
    progress = settings.PROGRESS if progress is None else progress
    lambda_fine, lambda_coarse = cfg.lambdas
    trainable = _trainable_names(params, freeze_embeddings)
    named = params.named_tensors()
    state = AdamState.for_params({name: named[name] for name in trainable})

    best_params = params.copy()
    best_epoch = 0
    best_score: Optional[float] = None
    best_reports: Dict[str, MetricsReport] = {}
    log: List[Dict[str, Any]] = []
    steps: List[Dict[str, float]] = []
    if cfg.epochs == 0:
        logger.info("epochs=0，直接返回初始参数")
        return TrainResult(best_params, best_epoch, best_score, log, steps, best_reports)

    logger.info(
        "开始训练：mode=%s ram=%s λ=(%.3g, %.3g) lr=%g batch=%d epochs=%d train=%d dev=%d workers=%d",
        cfg.mode, params.ram_mode, lambda_fine, lambda_coarse, cfg.lr, cfg.batch_size, cfg.epochs,
        len(splits.train), len(splits.dev), workers,
    )
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    stale = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(splits.train))
            n_batches = (len(order) + cfg.batch_size - 1) // cfg.batch_size
            totals = np.zeros(3)
            bar = tqdm(range(n_batches), desc=f"epoch {epoch}/{cfg.epochs}", disable=not progress, leave=False)
            for b in bar:
                positions = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = [splits.train[i] for i in positions]
                rngs = [np.random.default_rng([cfg.seed, epoch, int(b * cfg.batch_size + j)]) for j in range(len(batch))]
                acc = {name: np.zeros_like(named[name].values) for name in trainable}
                batch_losses = np.zeros(3)
                try:
                    chunk = max(1, workers)
                    for start in range(0, len(batch), chunk):
                        docs = batch[start:start + chunk]
                        doc_rngs = rngs[start:start + chunk]
                        if pool is not None:
                            outcomes = list(pool.map(
                                lambda pair: _doc_step(pair[0], params, cfg, dropout, pair[1], trainable),
                                zip(docs, doc_rngs),
                            ))
                        else:
                            outcomes = [_doc_step(d, params, cfg, dropout, r, trainable) for d, r in zip(docs, doc_rngs)]
                        for out in outcomes:
                            for name in trainable:
                                acc[name] += out.grads[name]
                            batch_losses += (out.loss_fine, out.loss_coarse, out.loss_joint)
                    n = float(len(batch))
                    grads = {name: g / n for name, g in acc.items()}
                    adam_step(named, grads, state, cfg)
                except NonFiniteError as exc:
                    raise TrainingError(f"出现非有限值：{exc}", epoch=epoch, batch=b + 1) from exc
                # PAD 行不参与任何查找，保持为零
                named["embeddings"].values[PAD_ID] = 0.0
                batch_mean = batch_losses / len(batch)
                steps.append({"epoch": epoch, "batch": b + 1, "loss_fine": float(batch_mean[0]),
                              "loss_coarse": float(batch_mean[1]), "loss_joint": float(batch_mean[2])})
                totals += batch_losses
                bar.set_postfix(loss=f"{batch_mean[2]:.4f}")
            bar.close()

            means = totals / len(splits.train)
            reports = evaluate_split(splits.dev, params, options)
            record: Dict[str, Any] = {
                "epoch": epoch,
                "loss_fine": float(means[0]),
                "loss_coarse": float(means[1]),
                "loss_joint": float(means[2]),
            }
            for task in (TASK_FINE, TASK_COARSE):
                record.update(prefixed(reports[task], task))
            log.append(record)
            if on_epoch is not None:
                on_epoch(record)

            score = reports[cfg.selection_task].micro_f1
            improved = best_score is None or score > best_score
            logger.info(
                "epoch %d：loss=%.4f（fine %.4f / coarse %.4f），dev %s micro-F1=%.4f%s",
                epoch, means[2], means[0], means[1], cfg.selection_task, score, "（最佳）" if improved else "",
            )
            if improved:
                best_score, best_epoch, best_reports = score, epoch, reports
                best_params = params.copy()
                stale = 0
            else:
                stale += 1
                if cfg.patience is not None and stale >= cfg.patience:
                    logger.info("验证指标连续 %d 个 epoch 无提升，提前停止", stale)
                    break
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    logger.info("训练结束：最佳 epoch=%d，dev %s micro-F1=%.4f", best_epoch, cfg.selection_task, best_score)
    return TrainResult(best_params, best_epoch, best_score, log, steps, best_reports)


# ---------- 消融 ----------


@dataclass(frozen=True)
class AblationCell:
    mode: str
    ram: str
    placement: str = "shared"

    @property
    def label(self) -> str:
        if self.ram == "off":
            return f"{self.mode}/ram=off"
        return f"{self.mode}/ram={self.ram}/{self.placement}"


def ablation_grid(run_cfg: RunConfig) -> List[AblationCell]:
    """网格按配置顺序展开；ram=off 时 placement 无意义，只保留一格"""
    cells: List[AblationCell] = []
    for mode in run_cfg.ablation.modes:
        for ram in run_cfg.ablation.rams:
            placements = ["shared"] if ram == "off" else run_cfg.ablation.placements
            for placement in placements:
                cell = AblationCell(mode, ram, placement)
                if cell not in cells:
                    cells.append(cell)
    return cells


@dataclass(eq=False)
class AblationJob:
    cell: AblationCell
    seed: int
    run_cfg: RunConfig
    splits: Splits
    vocab_size: int
    m_d: int
    m_s: int
    embeddings: Optional[np.ndarray] = None
    progress: bool = False


def run_cell(job: AblationJob) -> Dict[str, Any]:
    """训练一个网格单元的一个种子，并在测试集（缺省用验证集）上评估"""
    cfg = job.run_cfg.model_copy(deep=True)
    cfg.seed = job.seed
    cfg.train = cfg.train.model_copy(update={"seed": job.seed, "mode": job.cell.mode, "ram": job.cell.ram})
    cfg.model = cfg.model.model_copy(update={"ram_placement": job.cell.placement})
    params = init_params(cfg.model, job.cell.ram, job.vocab_size, job.m_d, job.m_s, job.seed, job.embeddings)
    result = train(
        job.splits,
        params,
        cfg.train,
        dropout=cfg.model.dropout,
        freeze_embeddings=cfg.model.freeze_embeddings,
        metric_options=cfg.metrics,
        workers=1,
        progress=job.progress,
    )
    eval_docs = job.splits.test or job.splits.dev
    reports = evaluate_split(eval_docs, result.best_params, cfg.metrics)
    first = result.log[0]["loss_joint"] if result.log else float("nan")
    last = result.log[-1]["loss_joint"] if result.log else float("nan")
    row: Dict[str, Any] = {
        "config": job.cell.label,
        "mode": job.cell.mode,
        "ram": job.cell.ram,
        "placement": job.cell.placement,
        "seed": job.seed,
        "best_epoch": result.best_epoch,
        "loss_first": first,
        "loss_last": last,
        "loss_reduction": 1.0 - last / first if result.log and first > 0 else float("nan"),
    }
    for task in (TASK_FINE, TASK_COARSE):
        row.update(prefixed(reports[task], task))
    logger.info("消融单元 %s seed=%d 完成：fine macro-F1=%.4f", job.cell.label, job.seed, row["fine.macro_f1"])
    return row


@dataclass(eq=False)
class AblationResult:
    runs: pd.DataFrame
    table: pd.DataFrame
    wins: pd.DataFrame

    @property
    def metric_columns(self) -> List[str]:
        return [c for c in self.runs.columns if c.startswith(f"{TASK_FINE}.") or c.startswith(f"{TASK_COARSE}.")]


def summarize_runs(runs: pd.DataFrame, order: Sequence[str]) -> pd.DataFrame:
    """按配置聚合：seed_count 与每个指标的 mean / std（总体标准差，单种子时为 0）"""
    metric_cols = [c for c in runs.columns if c.split(".", 1)[-1] in METRIC_NAMES and "." in c]
    metric_cols.append("loss_reduction")
    grouped = runs.groupby("config", sort=False)
    table = pd.DataFrame({"config": list(order)}).set_index("config")
    table["seed_count"] = grouped["seed"].count()
    for col in metric_cols:
        table[f"{col}_mean"] = grouped[col].mean()
        table[f"{col}_std"] = grouped[col].std(ddof=0)
    return table.reset_index()


def directional_wins(runs: pd.DataFrame, metric: str = "fine.macro_f1") -> pd.DataFrame:
    """逐种子比较：多任务 vs 单任务（同 ram/placement），有 RAM vs 无 RAM（同 mode）"""
    rows: List[Dict[str, Any]] = []
    records = runs.to_dict("records")
    index = {(r["mode"], r["ram"], r["placement"], r["seed"]): r for r in records}
    seeds = sorted({int(r["seed"]) for r in records})

    def compare(kind: str, a: Tuple[str, str, str], b: Tuple[str, str, str]) -> None:
        for seed in seeds:
            ra, rb = index.get((*a, seed)), index.get((*b, seed))
            if ra is None or rb is None:
                continue
            rows.append({
                "comparison": kind,
                "treatment": ra["config"],
                "baseline": rb["config"],
                "seed": seed,
                "metric": metric,
                "treatment_value": float(ra[metric]),
                "baseline_value": float(rb[metric]),
                "win": bool(ra[metric] > rb[metric]),
            })

    cells = list(dict.fromkeys((r["mode"], r["ram"], r["placement"]) for r in records))
    for mode, ram, placement in cells:
        if mode == "multitask":
            compare("mtl_vs_single", (mode, ram, placement), ("fine_only", ram, placement))
        if ram != "off":
            compare("ram_vs_none", (mode, ram, placement), (mode, "off", "shared"))
    return pd.DataFrame(rows, columns=[
        "comparison", "treatment", "baseline", "seed", "metric", "treatment_value", "baseline_value", "win",
    ])

def direction_verdict(
    wins: pd.DataFrame,
    comparison: str,
    treatment: str,
    *,
    margin: float = 0.01,
    min_wins: int = 3,
) -> Dict[str, Any]:
    """汇总一组方向性比较：处理组均值不低于基线均值 - margin，且严格胜出的种子数 ≥ min_wins"""
    rows = wins[(wins["comparison"] == comparison) & (wins["treatment"] == treatment)]
    if rows.empty:
        raise ValueError(f"消融结果中没有 {comparison} / {treatment} 的比较")
    treatment_mean = float(rows["treatment_value"].mean())
    baseline_mean = float(rows["baseline_value"].mean())
    n_wins = int(rows["win"].sum())
    return {
        "comparison": comparison,
        "treatment": treatment,
        "baseline": str(rows["baseline"].iloc[0]),
        "treatment_mean": treatment_mean,
        "baseline_mean": baseline_mean,
        "wins": n_wins,
        "seeds": int(len(rows)),
        "passed": treatment_mean >= baseline_mean - margin and n_wins >= min_wins,
    }



def run_ablation(
    splits: Splits,
    run_cfg: RunConfig,
    vocab_size: int,
    m_d: int,
    m_s: int,
    embeddings: Optional[np.ndarray] = None,
    processes: Optional[int] = None,
    progress: Optional[bool] = None,
) -> AblationResult:
    """训练全部 (网格单元 × 种子)，结果按网格顺序汇总"""
    splits.check()
    cells = ablation_grid(run_cfg)
    seeds = list(run_cfg.ablation.seeds)
    processes = processes or run_cfg.ablation.processes
    show = settings.PROGRESS if progress is None else progress
    jobs = [
        AblationJob(cell, seed, run_cfg, splits, vocab_size, m_d, m_s, embeddings, progress=show and processes == 1)
        for cell in cells
        for seed in seeds
    ]
    logger.info("消融网格：%d 个单元 × %d 个种子 = %d 次训练（进程数 %d）", len(cells), len(seeds), len(jobs), processes)
    if processes > 1:
        with ProcessPoolExecutor(max_workers=processes) as pool:
            rows = list(tqdm(pool.map(run_cell, jobs), total=len(jobs), desc="ablation", disable=not show))
    else:
        rows = [run_cell(job) for job in tqdm(jobs, desc="ablation", disable=not show)]
    runs = pd.DataFrame(rows)
    table = summarize_runs(runs, [c.label for c in cells])
    wins = directional_wins(runs)
    return AblationResult(runs=runs, table=table, wins=wins)


__all__ = [
    "bce_loss",
    "joint_loss",
    "AdamState",
    "adam_step",
    "Splits",
    "TrainResult",
    "evaluate_split",
    "train",
    "AblationCell",
    "ablation_grid",
    "run_cell",
    "AblationResult",
    "summarize_runs",
    "directional_wins",
    "direction_verdict",
    "run_ablation",
]
