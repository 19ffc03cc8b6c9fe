"""
二维张量运算与反向模式自动微分
- DiffTensor：float64 值缓冲 + 梯度缓冲，是计算图中的一个节点
- Tape：按拓扑顺序记录算子及其局部梯度闭包；每次前向重新构图
- 所有算子在出口处检查有限性（NaN/Inf 直接报错）
- overlap_add_conv 是 RAM 各节点（down/lateral/up）共用的卷积算子
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_node_ids = itertools.count(1)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class DiffTensor:
    """二维稠密张量（行优先，float64），携带累积梯度。

    values 与 grad 形状一致；graph_id 为全局唯一的节点编号。
    """

    __slots__ = ("values", "grad", "graph_id", "name")

    def __init__(self, values, *, name: Optional[str] = None):
        arr = np.array(values, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"DiffTensor 仅支持二维，收到 ndim={arr.ndim}")
        _check_finite(arr, name or "DiffTensor")
        self.values: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray = np.zeros_like(self.values)
        self.graph_id: int = next(_node_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, name: Optional[str] = None) -> "DiffTensor":
        """不拷贝地包装已有数组（内部使用，调用方保证 float64 二维）"""
        obj = cls.__new__(cls)
        obj.values = arr
        obj.grad = np.zeros_like(arr)
        obj.graph_id = next(_node_ids)
        obj.name = name
        return obj

    @classmethod
    def zeros(cls, rows: int, cols: int, *, name: Optional[str] = None) -> "DiffTensor":
        return cls._wrap(np.zeros((rows, cols), dtype=np.float64), name)

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows, self.cols

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() 需要 1×1 张量，当前 {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor({self.rows}x{self.cols}{label} id={self.graph_id})"


@dataclass
class KernelGroup:
    """卷积核组 C_in × k × C_out，展平存储为 C_in × (k·C_out) 的 DiffTensor。

    第 s 个 tap 的 C_in × C_out 切片为 weights.values[:, s*C_out:(s+1)*C_out]。
    """

    in_channels: int
    taps: int
    out_channels: int
    weights: DiffTensor

    def __post_init__(self) -> None:
        if self.taps < 1 or self.taps % 2 == 0:
            raise ShapeError(f"卷积核 taps 必须为正奇数，收到 {self.taps}")
        expected = (self.in_channels, self.taps * self.out_channels)
        if self.weights.shape != expected:
            raise ShapeError(f"卷积核形状应为 {expected}，收到 {self.weights.shape}")

    @classmethod
    def from_array(cls, kernel: np.ndarray, *, name: Optional[str] = None) -> "KernelGroup":
        """由 C_in × k × C_out 的三维数组构造"""
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 3:
            raise ShapeError(f"卷积核数组需为三维，收到 ndim={kernel.ndim}")
        c_in, k, c_out = kernel.shape
        return cls(c_in, k, c_out, DiffTensor(kernel.reshape(c_in, k * c_out), name=name))

    def tap(self, s: int) -> np.ndarray:
        return self.weights.values[:, s * self.out_channels:(s + 1) * self.out_channels]

    def as_array(self) -> np.ndarray:
        return self.weights.values.reshape(self.in_channels, self.taps, self.out_channels)


@dataclass
class _Record:
    op: str
    output: DiffTensor
    inputs: Tuple[DiffTensor, ...]
    backward: BackwardFn


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where}: 出现 NaN/Inf")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 分段计算，避免 exp 溢出
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(eq=False)
class Tape:
    """算子记录带。所有算子都是 Tape 的方法，输出节点按创建顺序追加，天然拓扑有序。

    一条 Tape 只允许单个线程写入；不同文档各自持有独立的 Tape。
    """

    records: List[_Record] = field(default_factory=list)
    nodes: Dict[int, DiffTensor] = field(default_factory=dict)

    # ---------- 叶子节点 ----------
    def _register(self, t: DiffTensor) -> DiffTensor:
        self.nodes[t.graph_id] = t
        return t

    def leaf(self, values, *, name: Optional[str] = None) -> DiffTensor:
        """在本带上登记一个新的叶子张量（拷贝数据）"""
        if isinstance(values, DiffTensor):
            values = values.values
        return self._register(DiffTensor(values, name=name))

    def watch(self, param: DiffTensor) -> DiffTensor:
        """为共享参数建立只读视图：值缓冲共享，梯度缓冲独立"""
        view = param.values.view()
        view.flags.writeable = False
        return self._register(DiffTensor._wrap(view, param.name))

    def constant(self, values, *, name: Optional[str] = None) -> DiffTensor:
        return self.leaf(values, name=name)

    def _emit(self, op: str, out: np.ndarray, inputs: Tuple[DiffTensor, ...], backward: BackwardFn) -> DiffTensor:
        _check_finite(out, op)
        node = DiffTensor._wrap(np.ascontiguousarray(out, dtype=np.float64), None)
        self._register(node)
        self.records.append(_Record(op, node, inputs, backward))
        return node

    # ---------- 基础算子 ----------
    def matmul(self, a: DiffTensor, b: DiffTensor) -> DiffTensor:
        if a.cols != b.rows:
            raise ShapeError(f"matmul 内维不匹配：{a.shape} × {b.shape}")
        av, bv = a.values, b.values

        def backward(g: np.ndarray):
            return g @ bv.T, av.T @ g

        return self._emit("matmul", av @ bv, (a, b), backward)

    def add(self, a: DiffTensor, b: DiffTensor) -> DiffTensor:
        if a.shape != b.shape:
            raise ShapeError(f"add 形状不一致：{a.shape} vs {b.shape}")
        return self._emit("add", a.values + b.values, (a, b), lambda g: (g, g))

    def mul(self, a: DiffTensor, b: DiffTensor) -> DiffTensor:
        if a.shape != b.shape:
            raise ShapeError(f"mul 形状不一致：{a.shape} vs {b.shape}")
        av, bv = a.values, b.values
        return self._emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))

    def tanh(self, x: DiffTensor) -> DiffTensor:
        y = np.tanh(x.values)
        return self._emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self, x: DiffTensor) -> DiffTensor:
        s = _sigmoid(x.values)
        return self._emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))

    def elementwise(self, op: str, *operands: DiffTensor) -> DiffTensor:
        """按名称分派逐元素算子：add / mul（二元），tanh / sigmoid（一元）"""
        binary = {"add": self.add, "mul": self.mul}
        unary = {"tanh": self.tanh, "sigmoid": self.sigmoid}
        if op in binary:
            if len(operands) != 2:
                raise ShapeError(f"{op} 需要 2 个操作数，收到 {len(operands)}")
            return binary[op](*operands)
        if op in unary:
            if len(operands) != 1:
                raise ShapeError(f"{op} 需要 1 个操作数，收到 {len(operands)}")
            return unary[op](operands[0])
        raise ValueError(f"未知逐元素算子：{op}")

    def one_minus(self, x: DiffTensor) -> DiffTensor:
        return self._emit("one_minus", 1.0 - x.values, (x,), lambda g: (-g,))

    def scale(self, x: DiffTensor, factor: float) -> DiffTensor:
        c = float(factor)
        return self._emit("scale", x.values * c, (x,), lambda g: (g * c,))

    def transpose(self, x: DiffTensor) -> DiffTensor:
        return self._emit("transpose", x.values.T, (x,), lambda g: (g.T,))

    def sum_all(self, x: DiffTensor) -> DiffTensor:
        shape = x.shape
        return self._emit("sum", np.array([[x.values.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))

    def add_row(self, x: DiffTensor, row: DiffTensor) -> DiffTensor:
        """n×q 加上广播的 1×q 行向量"""
        if row.rows != 1 or row.cols != x.cols:
            raise ShapeError(f"add_row 需要 1×{x.cols} 行向量，收到 {row.shape}")
        return self._emit("add_row", x.values + row.values, (x, row), lambda g: (g, g.sum(axis=0, keepdims=True)))

    def row_dot(self, a: DiffTensor, b: DiffTensor) -> DiffTensor:
        """逐行内积：out[j] = <a[j], b[j]>，输出 n×1"""
        if a.shape != b.shape:
            raise ShapeError(f"row_dot 形状不一致：{a.shape} vs {b.shape}")
        av, bv = a.values, b.values
        out = np.einsum("ij,ij->i", av, bv).reshape(-1, 1)
        return self._emit("row_dot", out, (a, b), lambda g: (g * bv, g * av))

    def concat_cols(self, a: DiffTensor, b: DiffTensor) -> DiffTensor:
        if a.rows != b.rows:
            raise ShapeError(f"concat_cols 行数不一致：{a.rows} vs {b.rows}")
        p = a.cols

        def backward(g: np.ndarray):
            return g[:, :p], g[:, p:]

        return self._emit("concat_cols", np.concatenate([a.values, b.values], axis=1), (a, b), backward)

    def row(self, x: DiffTensor, i: int) -> DiffTensor:
        """取第 i 行（1×q）"""
        if not 0 <= i < x.rows:
            raise ShapeError(f"行下标越界：{i} / {x.rows}")
        shape = x.shape

        def backward(g: np.ndarray):
            full = np.zeros(shape)
            full[i] = g[0]
            return (full,)

        return self._emit("row", x.values[i:i + 1].copy(), (x,), backward)

    def stack_rows(self, rows: Sequence[DiffTensor]) -> DiffTensor:
        """把若干 1×q 行向量按顺序堆叠成 n×q"""
        if not rows:
            raise ShapeError("stack_rows 至少需要一行")
        q = rows[0].cols
        for r in rows:
            if r.shape != (1, q):
                raise ShapeError(f"stack_rows 需要 1×{q} 行向量，收到 {r.shape}")

        def backward(g: np.ndarray):
            return tuple(g[i:i + 1] for i in range(len(rows)))

        return self._emit("stack_rows", np.concatenate([r.values for r in rows], axis=0), tuple(rows), backward)

    def gather_rows(self, table: DiffTensor, ids: Sequence[int]) -> DiffTensor:
        """按 id 取表中各行（词嵌入查找）；梯度按 id 散射累加"""
        idx = np.asarray(ids, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ShapeError("gather_rows 需要非空一维 id 序列")
        if idx.min() < 0 or idx.max() >= table.rows:
            raise ShapeError(f"gather_rows id 越界：表有 {table.rows} 行")
        shape = table.shape

        def backward(g: np.ndarray):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return self._emit("gather_rows", table.values[idx], (table,), backward)

    def softmax_over_rows(self, x: DiffTensor) -> DiffTensor:
        """逐列 softmax：每列在 n 个行位置上归一化（按列减最大值稳定化）"""
        if x.rows < 1:
            raise ShapeError("softmax_over_rows 需要至少一行")
        shifted = x.values - x.values.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=0, keepdims=True)

        def backward(g: np.ndarray):
            return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

        return self._emit("softmax_over_rows", s, (x,), backward)

    def overlap_add_conv(self, h: DiffTensor, kg: KernelGroup) -> DiffTensor:
        """错位相加卷积（步长 1、等长输出）。

        先算 k 个乘积 P_s = h · K[:, s, :]，第 s 片放在行偏移 s 处叠加得到 n+k-1 行，
        再从两端各裁去 (k-1)/2 行。等价于 out[i] = Σ_s h[i + (k-1)/2 - s] · K[:, s, :]，
        序列外按零处理。
        """
        if kg.taps % 2 == 0:
            raise ShapeError(f"overlap_add_conv 要求奇数 taps，收到 {kg.taps}")
        if h.cols != kg.in_channels:
            raise ShapeError(f"overlap_add_conv 通道不匹配：输入 {h.cols}，卷积核 {kg.in_channels}")
        n, k, c_out = h.rows, kg.taps, kg.out_channels
        if n < 1:
            raise ShapeError("overlap_add_conv 需要至少一行输入")
        pad = (k - 1) // 2
        hv = h.values
        wv = kg.weights.values
        products = (hv @ wv).reshape(n, k, c_out)
        full = np.zeros((n + k - 1, c_out))
        for s in range(k):
            full[s:s + n] += products[:, s, :]
        out = full[pad:pad + n]

        def backward(g: np.ndarray):
            g_full = np.zeros((n + k - 1, c_out))
            g_full[pad:pad + n] = g
            # 第 s 片的上游梯度就是 g_full 在偏移 s 处的窗口
            g_products = np.stack([g_full[s:s + n] for s in range(k)], axis=1).reshape(n, k * c_out)
            return g_products @ wv.T, hv.T @ g_products

        return self._emit("overlap_add_conv", out, (h, kg.weights), backward)

    def dropout(self, x: DiffTensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> DiffTensor:
        """反向 dropout：训练时以 rate 概率置零，幸存元素放大 1/(1-rate)；评估模式为恒等"""
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate 需在 [0, 1)，收到 {rate}")
        if not training or rate == 0.0:
            return self._emit("identity", x.values.copy(), (x,), lambda g: (g,))
        if rng is None:
            raise ValueError("训练模式 dropout 需要随机数生成器")
        mask = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
        return self._emit("dropout", x.values * mask, (x,), lambda g: (g * mask,))

    def bce_from_probs(self, probs: DiffTensor, targets: np.ndarray, eps: float) -> DiffTensor:
        """二元交叉熵（对标签求和），概率先截断到 [eps, 1-eps]；截断区梯度为 0"""
        y = np.asarray(targets, dtype=np.float64).reshape(probs.shape)
        raw = probs.values
        p = np.clip(raw, eps, 1.0 - eps)
        loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum()
        inside = (raw > eps) & (raw < 1.0 - eps)

        def backward(g: np.ndarray):
            local = (-y / p + (1.0 - y) / (1.0 - p)) * inside
            return (g[0, 0] * local,)

        return self._emit("bce", np.array([[loss]]), (probs,), backward)

    # ---------- 融合 GRU ----------
    def gru_scan(self, x: DiffTensor, params: Sequence[DiffTensor], reverse: bool = False) -> DiffTensor:
        """整段序列的 GRU（零初始状态），带解析的时间反向传播。

        params 顺序：w_z, w_r, w_h (d_e×d_r), u_z, u_r, u_h (d_r×d_r), b_z, b_r, b_h (1×d_r)。
        reverse=True 时从右向左扫描，但输出行仍按原位置对齐。
        """
        w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h = (p.values for p in params)
        n, d_r = x.rows, u_z.shape[0]
        if x.cols != w_z.shape[0]:
            raise ShapeError(f"gru_scan 输入宽度 {x.cols} 与权重 {w_z.shape} 不匹配")
        xv = x.values[::-1] if reverse else x.values
        # 输入投影一次算完
        ax_z = xv @ w_z + b_z
        ax_r = xv @ w_r + b_r
        ax_h = xv @ w_h + b_h
        hs = np.zeros((n + 1, d_r))
        zs = np.empty((n, d_r))
        rs = np.empty((n, d_r))
        cands = np.empty((n, d_r))
        for t in range(n):
            h_prev = hs[t]
            z = _sigmoid(ax_z[t] + h_prev @ u_z)
            r = _sigmoid(ax_r[t] + h_prev @ u_r)
            c = np.tanh(ax_h[t] + (r * h_prev) @ u_h)
            hs[t + 1] = (1.0 - z) * h_prev + z * c
            zs[t], rs[t], cands[t] = z, r, c
        out = hs[1:]
        if reverse:
            out = out[::-1]

        def backward(g: np.ndarray):
            g_seq = g[::-1] if reverse else g
            da_z = np.empty((n, d_r))
            da_r = np.empty((n, d_r))
            da_h = np.empty((n, d_r))
            dh_next = np.zeros(d_r)
            for t in range(n - 1, -1, -1):
                h_prev = hs[t]
                z, r, c = zs[t], rs[t], cands[t]
                dh = g_seq[t] + dh_next
                dz = dh * (c - h_prev)
                dc = dh * z
                dh_prev = dh * (1.0 - z)
                dah = dc * (1.0 - c * c)
                drh = dah @ u_h.T
                dr = drh * h_prev
                dh_prev = dh_prev + drh * r
                daz = dz * z * (1.0 - z)
                dar = dr * r * (1.0 - r)
                dh_prev = dh_prev + daz @ u_z.T + dar @ u_r.T
                da_z[t], da_r[t], da_h[t] = daz, dar, dah
                dh_next = dh_prev
            h_prevs = hs[:-1]
            dx = da_z @ w_z.T + da_r @ w_r.T + da_h @ w_h.T
            if reverse:
                dx = dx[::-1]
            return (
                dx,
                xv.T @ da_z,
                xv.T @ da_r,
                xv.T @ da_h,
                h_prevs.T @ da_z,
                h_prevs.T @ da_r,
                (rs * h_prevs).T @ da_h,
                da_z.sum(axis=0, keepdims=True),
                da_r.sum(axis=0, keepdims=True),
                da_h.sum(axis=0, keepdims=True),
            )

        return self._emit("gru_scan", out.copy(), (x, *params), backward)

    # ---------- 反向传播 ----------
    def backward(self, loss: DiffTensor) -> None:
        backward(loss, self)


def backward(loss: DiffTensor, tape: Tape) -> None:
    """从标量 loss 反向传播；带上所有节点的梯度先清零，不可达节点保持为零"""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward 需要标量 loss（1×1），收到 {loss.shape}")
    if loss.graph_id not in tape.nodes:
        raise ValueError("loss 不在给定的 Tape 上")
    for node in tape.nodes.values():
        node.grad = np.zeros_like(node.values)
    loss.grad[0, 0] = 1.0
    for rec in reversed(tape.records):
        g = rec.output.grad
        if not g.any():
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None:
                continue
            inp.grad += gi


# ---------- 数值梯度检查 ----------


@dataclass
class GradCheckReport:
    """每个参数的最大相对误差：|a-n| / max(1e-8, |a|+|n|)"""

    errors: Dict[str, float]
    tol: float
    checked_entries: Dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> Tuple[str, float]:
        if not self.errors:
            return "", 0.0
        name = max(self.errors, key=lambda k: self.errors[k])
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.errors.values())

    def failures(self) -> Dict[str, float]:
        return {k: v for k, v in self.errors.items() if v > self.tol}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 0.0) -> np.ndarray:
    diff = np.abs(analytic - numeric)
    rel = diff / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    if atol > 0:
        rel = np.where(diff <= atol, 0.0, rel)
    return rel


LossFn = Callable[[Tape, Mapping[str, DiffTensor]], DiffTensor]


def grad_check(
    f: LossFn,
    params: Mapping[str, DiffTensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    *,
    atol: float = 0.0,
    max_entries: Optional[int] = None,
    seed: int = 0,
    grad_override: Optional[Mapping[str, np.ndarray]] = None,
) -> GradCheckReport:
    """比较解析梯度与中心差分梯度。

    f(tape, views) 在给定 Tape 上用参数视图构建标量 loss；中心差分直接扰动参数值缓冲。
    max_entries 限制每个参数抽查的元素数（按 seed 抽样）；grad_override 用于注入错误梯度做反例。
    """
    if h <= 0:
        raise ValueError(f"差分步长 h 必须为正，收到 {h}")

    def evaluate() -> Tuple[float, Tape, Dict[str, DiffTensor]]:
        tape = Tape()
        views = {name: tape.watch(p) for name, p in params.items()}
        loss = f(tape, views)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError("grad_check: loss 非有限")
        return value, tape, {"__loss__": loss, **views}

    _, tape, nodes = evaluate()
    backward(nodes["__loss__"], tape)
    analytic = {name: nodes[name].grad.copy() for name in params}
    if grad_override:
        for name, g in grad_override.items():
            analytic[name] = np.asarray(g, dtype=np.float64).reshape(analytic[name].shape)

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for name, p in params.items():
        flat = p.values.reshape(-1)
        size = flat.size
        if max_entries is not None and size > max_entries:
            picks = np.sort(rng.choice(size, size=max_entries, replace=False))
        else:
            picks = np.arange(size)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            f_plus = evaluate()[0]
            flat[j] = orig - h
            f_minus = evaluate()[0]
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = float(relative_error(np.array(a_flat[j]), np.array(numeric), atol))
            worst = max(worst, err)
        errors[name] = worst
        counts[name] = int(len(picks))
    report = GradCheckReport(errors=errors, tol=tol, checked_entries=counts)
    name, err = report.worst
    logger.debug("grad_check 完成：最差参数 %s 相对误差 %.3e", name, err)
    return report


__all__ = [
    "DiffTensor",
    "KernelGroup",
    "Tape",
    "backward",
    "grad_check",
    "GradCheckReport",
    "relative_error",
]
