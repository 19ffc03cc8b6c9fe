"""
MT-RAM 模型：
- 词嵌入查找 → dropout → 双向 GRU → RAM（可关闭）→ 细/粗两个标签注意力分类头
- 参数用嵌套 dataclass 组织，统一通过 named_tensors() 以点分名称暴露给优化器与检查点
- 每次前向在独立 Tape 上为参数建立只读视图，文档间可并发
"""
from __future__ import annotations

import dataclasses
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constants import PAD_ID
from .corpus import EncodedDocument
from .errors import ShapeError
from .numcore import DiffTensor, KernelGroup, Tape
from .schemas import ModelConfig

logger = logging.getLogger(__name__)


# ---------- 参数结构 ----------


@dataclass(eq=False)
class GruDirection:
    """单方向 GRU：输入矩阵 d_e×d_r，隐状态矩阵 d_r×d_r，偏置 1×d_r"""

    w_z: DiffTensor
    w_r: DiffTensor
    w_h: DiffTensor
    u_z: DiffTensor
    u_r: DiffTensor
    u_h: DiffTensor
    b_z: DiffTensor
    b_r: DiffTensor
    b_h: DiffTensor

    def ordered(self) -> Tuple[DiffTensor, ...]:
        return (self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h)

    @property
    def hidden_dim(self) -> int:
        return self.u_z.rows


@dataclass(eq=False)
class GruWeights:
    forward: GruDirection
    backward: GruDirection


@dataclass(eq=False)
class RamNode:
    """down / lateral / up 节点：两组卷积核，中间夹 tanh"""

    k1: KernelGroup
    k2: KernelGroup


@dataclass(eq=False)
class RamWeights:
    """通道链 2d_r → d_r → d_r/2 → d_r/2 → d_r → 2d_r"""

    down1: RamNode
    down2: RamNode
    lateral: RamNode
    up1: RamNode
    up2: RamNode
    mode: str = "mult"

    def __post_init__(self) -> None:
        if self.mode not in ("mult", "add"):
            raise ValueError(f"RAM 模式只能是 mult / add，收到 {self.mode!r}")
        chain = [self.down1, self.down2, self.lateral, self.up1]
        for a, b in zip(chain, chain[1:]):
            if a.k2.out_channels != b.k1.in_channels:
                raise ShapeError(f"RAM 通道链断裂：{a.k2.out_channels} → {b.k1.in_channels}")
        for node in (*chain, self.up2):
            if node.k1.out_channels != node.k2.in_channels:
                raise ShapeError("RAM 节点内部两组卷积核通道不匹配")
        if self.up1.k2.out_channels != self.down1.k2.out_channels:
            raise ShapeError("up1 输出宽度需与 down1 一致（B = A + up1(L)）")
        if self.up2.k1.in_channels != self.down1.k2.out_channels or self.up2.k2.out_channels != self.down1.k1.in_channels:
            raise ShapeError("up2 需把 d_r 恢复到 2d_r")


@dataclass(eq=False)
class AttentionHead:
    """标签注意力头：查询 U (2d_r×m)，分类权重 W (m×2d_r)，偏置 b (m×1)"""

    u: DiffTensor
    w: DiffTensor
    b: DiffTensor

    @property
    def labels(self) -> int:
        return self.u.cols


@dataclass(eq=False)
class ModelParams:
    embeddings: DiffTensor
    gru: GruWeights
    head_fine: AttentionHead
    head_coarse: AttentionHead
    # 关闭 RAM 时为 None，检查点中不留任何 RAM 参数
    ram: Optional[RamWeights] = None
    # placement=branch 时粗粒度分支独占的一套 RAM
    ram_coarse: Optional[RamWeights] = None
    placement: str = "shared"

    @property
    def vocab_size(self) -> int:
        return self.embeddings.rows

    @property
    def embed_dim(self) -> int:
        return self.embeddings.cols

    @property
    def hidden_dim(self) -> int:
        return self.gru.forward.hidden_dim

    @property
    def m_d(self) -> int:
        return self.head_fine.labels

    @property
    def m_s(self) -> int:
        return self.head_coarse.labels

    @property
    def ram_mode(self) -> str:
        return self.ram.mode if self.ram is not None else "off"

    @property
    def kernel_size(self) -> Optional[int]:
        return self.ram.down1.k1.taps if self.ram is not None else None

    def named_tensors(self) -> "OrderedDict[str, DiffTensor]":
        out: "OrderedDict[str, DiffTensor]" = OrderedDict()

        def collect(name: str, t: DiffTensor) -> DiffTensor:
            out[name] = t
            return t

        _walk(self, "", collect)
        return out

    def map_tensors(self, fn: Callable[[str, DiffTensor], DiffTensor]) -> "ModelParams":
        return _walk(self, "", fn)

    def watch(self, tape: Tape) -> "ModelParams":
        """在 tape 上为每个参数建立视图，返回同结构的参数对象"""
        return self.map_tensors(lambda _name, t: tape.watch(t))

    def copy(self) -> "ModelParams":
        return self.map_tensors(lambda name, t: DiffTensor(t.values, name=name))

    def describe(self) -> Dict[str, Any]:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "kernel_size": self.kernel_size,
            "m_d": self.m_d,
            "m_s": self.m_s,
            "ram": self.ram_mode,
            "placement": self.placement,
        }


def _walk(obj: Any, prefix: str, fn: Callable[[str, DiffTensor], DiffTensor]) -> Any:
    """按字段声明顺序遍历参数树，对每个张量调用 fn，并按原结构重建"""
    if isinstance(obj, DiffTensor):
        return fn(prefix, obj)
    if isinstance(obj, KernelGroup):
        return KernelGroup(obj.in_channels, obj.taps, obj.out_channels, fn(prefix, obj.weights))
    if dataclasses.is_dataclass(obj):
        changes = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, (DiffTensor, KernelGroup)) or dataclasses.is_dataclass(value):
                name = f"{prefix}.{f.name}" if prefix else f.name
                changes[f.name] = _walk(value, name, fn)
        return dataclasses.replace(obj, **changes)
    return obj


# ---------- 初始化 ----------


def glorot(rng: np.random.Generator, shape: Tuple[int, int], fan_in: int, fan_out: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, size=shape)


def _matrix(rng: np.random.Generator, rows: int, cols: int, name: str) -> DiffTensor:
    return DiffTensor(glorot(rng, (rows, cols), rows, cols), name=name)


def _kernel(rng: np.random.Generator, c_in: int, k: int, c_out: int, name: str) -> KernelGroup:
    weights = glorot(rng, (c_in, k * c_out), c_in * k, c_out * k)
    return KernelGroup(c_in, k, c_out, DiffTensor(weights, name=name))


def _gru_direction(rng: np.random.Generator, d_e: int, d_r: int, prefix: str) -> GruDirection:
    return GruDirection(
        w_z=_matrix(rng, d_e, d_r, f"{prefix}.w_z"),
        w_r=_matrix(rng, d_e, d_r, f"{prefix}.w_r"),
        w_h=_matrix(rng, d_e, d_r, f"{prefix}.w_h"),
        u_z=_matrix(rng, d_r, d_r, f"{prefix}.u_z"),
        u_r=_matrix(rng, d_r, d_r, f"{prefix}.u_r"),
        u_h=_matrix(rng, d_r, d_r, f"{prefix}.u_h"),
        b_z=DiffTensor.zeros(1, d_r, name=f"{prefix}.b_z"),
        b_r=DiffTensor.zeros(1, d_r, name=f"{prefix}.b_r"),
        b_h=DiffTensor.zeros(1, d_r, name=f"{prefix}.b_h"),
    )


def init_ram(rng: np.random.Generator, d_r: int, k: int, mode: str, prefix: str = "ram") -> RamWeights:
    half = d_r // 2

    def node(name: str, c_in: int, c_mid: int, c_out: int) -> RamNode:
        return RamNode(
            k1=_kernel(rng, c_in, k, c_mid, f"{prefix}.{name}.k1"),
            k2=_kernel(rng, c_mid, k, c_out, f"{prefix}.{name}.k2"),
        )

    return RamWeights(
        down1=node("down1", 2 * d_r, d_r, d_r),
        down2=node("down2", d_r, half, half),
        lateral=node("lateral", half, half, half),
        up1=node("up1", half, d_r, d_r),
        up2=node("up2", d_r, 2 * d_r, 2 * d_r),
        mode=mode,
    )


def _head(rng: np.random.Generator, width: int, m: int, prefix: str) -> AttentionHead:
    return AttentionHead(
        u=_matrix(rng, width, m, f"{prefix}.u"),
        w=_matrix(rng, m, width, f"{prefix}.w"),
        b=DiffTensor.zeros(m, 1, name=f"{prefix}.b"),
    )


def init_params(
    cfg: ModelConfig,
    ram_mode: str,
    vocab_size: int,
    m_d: int,
    m_s: int,
    seed: int,
    embeddings: Optional[np.ndarray] = None,
) -> ModelParams:
    """Glorot 均匀初始化矩阵与卷积核，偏置为零；PAD 行恒为零。

    embeddings 给定时（已按词表对齐）直接作为嵌入表。
    """
    if m_d < 1 or m_s < 1:
        raise ValueError("标签数 m 必须 ≥ 1")
    rng = np.random.default_rng(seed)
    d_e, d_r, k = cfg.embed_dim, cfg.hidden_dim, cfg.kernel_size
    table = glorot(rng, (vocab_size, d_e), vocab_size, d_e)
    if embeddings is not None:
        if embeddings.shape != (vocab_size, d_e):
            raise ShapeError(f"预训练词向量形状应为 {(vocab_size, d_e)}，收到 {embeddings.shape}")
        table = np.array(embeddings, dtype=np.float64, copy=True)
    table[PAD_ID] = 0.0
    gru = GruWeights(
        forward=_gru_direction(rng, d_e, d_r, "gru.forward"),
        backward=_gru_direction(rng, d_e, d_r, "gru.backward"),
    )
    ram = ram_coarse = None
    if ram_mode != "off":
        ram = init_ram(rng, d_r, k, ram_mode, "ram")
        if cfg.ram_placement == "branch":
            ram_coarse = init_ram(rng, d_r, k, ram_mode, "ram_coarse")
    params = ModelParams(
        embeddings=DiffTensor(table, name="embeddings"),
        gru=gru,
        head_fine=_head(rng, 2 * d_r, m_d, "head_fine"),
        head_coarse=_head(rng, 2 * d_r, m_s, "head_coarse"),
        ram=ram,
        ram_coarse=ram_coarse,
        placement=cfg.ram_placement if ram is not None else "shared",
    )
    logger.info(
        "模型初始化：|V|=%d d_e=%d d_r=%d RAM=%s(%s) m_d=%d m_s=%d，参数量 %d",
        vocab_size, d_e, d_r, ram_mode, params.placement, m_d, m_s,
        sum(t.values.size for t in params.named_tensors().values()),
    )
    return params


# ---------- 前向 ----------


def gru_cell(tape: Tape, x_t: DiffTensor, h_prev: DiffTensor, w: GruDirection) -> DiffTensor:
    """单步 GRU（行向量形式）：

    z = σ(x W_z + h U_z + b_z)，r = σ(x W_r + h U_r + b_r)，
    h̃ = tanh(x W_h + (r⊙h) U_h + b_h)，h_t = (1-z)⊙h + z⊙h̃
    """
    if x_t.shape != (1, w.w_z.rows) or h_prev.shape != (1, w.hidden_dim):
        raise ShapeError(f"gru_cell 输入形状不匹配：x {x_t.shape}，h {h_prev.shape}")

    def gate(wx: DiffTensor, uh: DiffTensor, h: DiffTensor, b: DiffTensor) -> DiffTensor:
        return tape.add(tape.add(tape.matmul(x_t, wx), tape.matmul(h, uh)), b)

    z = tape.sigmoid(gate(w.w_z, w.u_z, h_prev, w.b_z))
    r = tape.sigmoid(gate(w.w_r, w.u_r, h_prev, w.b_r))
    cand = tape.tanh(gate(w.w_h, w.u_h, tape.mul(r, h_prev), w.b_h))
    return tape.add(tape.mul(tape.one_minus(z), h_prev), tape.mul(z, cand))


def _gru_steps(tape: Tape, x: DiffTensor, w: GruDirection, reverse: bool) -> DiffTensor:
    h = tape.constant(np.zeros((1, w.hidden_dim)))
    order = range(x.rows - 1, -1, -1) if reverse else range(x.rows)
    outputs: Dict[int, DiffTensor] = {}
    for t in order:
        h = gru_cell(tape, tape.row(x, t), h, w)
        outputs[t] = h
    return tape.stack_rows([outputs[t] for t in range(x.rows)])


def bigru_forward(tape: Tape, x: DiffTensor, w: GruWeights, fused: bool = True) -> DiffTensor:
    """双向 GRU，第 i 行为 [→h_i, ←h_i]；两个方向都从零状态出发。

    fused=False 时逐步调用 gru_cell（参考实现，用于校验融合算子）。
    """
    if x.rows < 1:
        raise ShapeError("bigru_forward 需要至少一个时间步")
    if fused:
        fwd = tape.gru_scan(x, w.forward.ordered(), reverse=False)
        bwd = tape.gru_scan(x, w.backward.ordered(), reverse=True)
    else:
        fwd = _gru_steps(tape, x, w.forward, reverse=False)
        bwd = _gru_steps(tape, x, w.backward, reverse=True)
    return tape.concat_cols(fwd, bwd)


def _ram_node(tape: Tape, x: DiffTensor, node: RamNode) -> DiffTensor:
    return tape.overlap_add_conv(tape.tanh(tape.overlap_add_conv(x, node.k1)), node.k2)


@dataclass(eq=False)
class RamTrace:
    """RAM 中间结果，便于测试与可视化"""

    a: DiffTensor
    a_prime: DiffTensor
    lateral: DiffTensor
    b: DiffTensor
    t: DiffTensor
    o: DiffTensor
    output: DiffTensor


def ram_trace(tape: Tape, h: DiffTensor, w: RamWeights) -> RamTrace:
    if h.cols != w.down1.k1.in_channels:
        raise ShapeError(f"RAM 输入宽度 {h.cols} 与 down1 通道 {w.down1.k1.in_channels} 不匹配")
    a = _ram_node(tape, h, w.down1)
    a_prime = _ram_node(tape, a, w.down2)
    lat = _ram_node(tape, a_prime, w.lateral)
    b = tape.add(a, _ram_node(tape, lat, w.up1))
    t = tape.overlap_add_conv(b, w.up2.k1)
    o = tape.overlap_add_conv(tape.tanh(t), w.up2.k2)
    mixed = tape.mul(o, h) if w.mode == "mult" else tape.add(o, h)
    return RamTrace(a, a_prime, lat, b, t, o, tape.tanh(mixed))


def ram_forward(tape: Tape, h: DiffTensor, w: RamWeights) -> DiffTensor:
    """重校准聚合：mult 模式 H' = tanh(O⊙H)，add 模式 H' = tanh(O+H)"""
    return ram_trace(tape, h, w).output


@dataclass(eq=False)
class AttentionOutput:
    scores: DiffTensor
    probs: DiffTensor
    attn: DiffTensor


def attention_classify(tape: Tape, h: DiffTensor, head: AttentionHead) -> AttentionOutput:
    """标签注意力：attn = softmax_位置(H'U)，V = attnᵀH'，score_j = <V_j, W_j> + b_j"""
    if h.cols != head.u.rows:
        raise ShapeError(f"注意力头输入宽度 {head.u.rows}，收到 {h.cols}")
    attn = tape.softmax_over_rows(tape.matmul(h, head.u))
    v = tape.matmul(tape.transpose(attn), h)
    scores = tape.add(tape.row_dot(v, head.w), head.b)
    return AttentionOutput(scores=scores, probs=tape.sigmoid(scores), attn=attn)


@dataclass(eq=False)
class ForwardResult:
    fine: AttentionOutput
    coarse: AttentionOutput
    tape: Tape
    views: ModelParams

    @property
    def probs_fine(self) -> np.ndarray:
        return self.fine.probs.values.reshape(-1).copy()

    @property
    def probs_coarse(self) -> np.ndarray:
        return self.coarse.probs.values.reshape(-1).copy()


def model_forward(
    doc: EncodedDocument,
    params: ModelParams,
    training: bool,
    rng: Optional[np.random.Generator],
    dropout: float = 0.0,
    tape: Optional[Tape] = None,
    watched: bool = False,
) -> ForwardResult:
    """嵌入 → dropout → BiGRU → RAM（关闭时直通）→ 共享 H' 的两个注意力头

    watched=True 表示 params 已经是 tape 上的视图（梯度检查时使用）。
    """
    ids = np.asarray(doc.token_ids, dtype=np.int64)
    if ids.size == 0 or np.all(ids == PAD_ID):
        raise ValueError(f"文档 {doc.id!r} 为空（或全为 PAD），无法前向")
    if watched and tape is None:
        raise ValueError("watched=True 时必须传入对应的 tape")
    tape = tape if tape is not None else Tape()
    w = params if watched else params.watch(tape)
    x = tape.dropout(tape.gather_rows(w.embeddings, ids), dropout, rng, training)
    h = bigru_forward(tape, x, w.gru)
    if w.ram is None:
        h_fine = h_coarse = h
    else:
        h_fine = ram_forward(tape, h, w.ram)
        h_coarse = ram_forward(tape, h, w.ram_coarse) if w.ram_coarse is not None else h_fine
    return ForwardResult(
        fine=attention_classify(tape, h_fine, w.head_fine),
        coarse=attention_classify(tape, h_coarse, w.head_coarse),
        tape=tape,
        views=w,
    )


def predict(docs: Sequence[EncodedDocument], params: ModelParams) -> Tuple[np.ndarray, np.ndarray]:
    """评估模式批量推断，返回 (细粒度概率 n×m_d, 粗粒度概率 n×m_s)"""
    fine = np.zeros((len(docs), params.m_d))
    coarse = np.zeros((len(docs), params.m_s))
    for i, doc in enumerate(docs):
        result = model_forward(doc, params, training=False, rng=None)
        fine[i] = result.probs_fine
        coarse[i] = result.probs_coarse
    return fine, coarse


__all__: List[str] = [
    "GruDirection",
    "GruWeights",
    "RamNode",
    "RamWeights",
    "AttentionHead",
    "ModelParams",
    "init_params",
    "init_ram",
    "gru_cell",
    "bigru_forward",
    "ram_forward",
    "ram_trace",
    "attention_classify",
    "model_forward",
    "predict",
    "ForwardResult",
]
