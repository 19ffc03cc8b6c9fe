"""
语料处理模块：
- 清洗分词、按文档频次建词表（低频词归入 UNK）、截断编码
- 细粒度→粗粒度编码映射（ICD→CCS 的同构物）
- skip-gram 负采样词向量预训练
- 合成分层标签语料（替代访问受限的真实病历数据）与 JSONL 读写
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from .constants import (
    PAD_ID,
    PAD_TOKEN,
    SKIPGRAM_EPOCHS,
    SKIPGRAM_LR,
    SKIPGRAM_MIN_LR_RATIO,
    SKIPGRAM_NEGATIVES,
    SKIPGRAM_POWER,
    SKIPGRAM_WINDOW,
    SPLIT_NAMES,
    UNK_ID,
    UNK_TOKEN,
)
from .errors import CodeMapError, CorpusFormatError, ShapeError
from .schemas import CorpusRecord, CorpusSpec

logger = logging.getLogger(__name__)

_WORD_RE = re.compile(r"\w+")


# ---------- 清洗与词表 ----------


def tokenize_and_clean(text: str) -> List[str]:
    """小写化后按 \\w+ 切分，丢弃含非字母字符的词（数字、下划线等）；连字符、撇号处会被切开"""
    return [tok for tok in _WORD_RE.findall(text.lower()) if tok.isalpha()]


@dataclass
class Vocabulary:
    """词表：id 从 0 连续编号，PAD=0、UNK=1 恒存在"""

    tokens: List[str]
    min_doc_freq: int = 1
    index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.tokens) < 2 or self.tokens[PAD_ID] != PAD_TOKEN or self.tokens[UNK_ID] != UNK_TOKEN:
            raise ValueError("词表前两项必须为 PAD 与 UNK")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("词表存在重复词")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.index.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids if i != PAD_ID]


def build_vocab(docs: Sequence[Sequence[str]], min_doc_freq: int = 3) -> Vocabulary:
    """按文档频次阈值建词表；id 顺序：总词频降序，再按字典序（与文档顺序无关）"""
    if min_doc_freq < 1:
        raise ValueError(f"min_doc_freq 必须 ≥ 1，收到 {min_doc_freq}")
    if not docs:
        raise ValueError("语料为空，无法构建词表")
    doc_freq: Counter[str] = Counter()
    term_freq: Counter[str] = Counter()
    for doc in docs:
        term_freq.update(doc)
        doc_freq.update(set(doc))
    kept = [tok for tok, df in doc_freq.items() if df >= min_doc_freq and tok not in (PAD_TOKEN, UNK_TOKEN)]
    kept.sort(key=lambda tok: (-term_freq[tok], tok))
    vocab = Vocabulary([PAD_TOKEN, UNK_TOKEN, *kept], min_doc_freq=min_doc_freq)
    logger.info("词表构建完成：%d 个词（阈值 %d，剔除 %d 个低频词）", len(vocab), min_doc_freq, len(doc_freq) - len(kept))
    return vocab


# ---------- 编码映射 ----------


@dataclass(eq=False)
class CodeMap:
    """细粒度编码 → 粗粒度编码的全映射（多对一）；标签顺序为编码字符串字典序"""

    mapping: Dict[str, str]
    fine_codes: List[str] = field(init=False)
    coarse_codes: List[str] = field(init=False)
    _fine_index: Dict[str, int] = field(init=False, repr=False)
    _coarse_index: Dict[str, int] = field(init=False, repr=False)
    _fine_to_coarse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.mapping:
            raise CodeMapError("编码映射表为空")
        for fine, coarse in self.mapping.items():
            if not isinstance(fine, str) or not isinstance(coarse, str):
                # 一个细粒度编码对应多个粗粒度编码属于冲突项，需人工消解为一对一
                raise CodeMapError(f"编码 {fine!r} 的映射必须是单个字符串，收到 {coarse!r}")
        self.fine_codes = sorted(self.mapping)
        self.coarse_codes = sorted(set(self.mapping.values()))
        self._fine_index = {c: i for i, c in enumerate(self.fine_codes)}
        self._coarse_index = {c: i for i, c in enumerate(self.coarse_codes)}
        self._fine_to_coarse = np.array([self._coarse_index[self.mapping[c]] for c in self.fine_codes], dtype=np.int64)
        if self.m_s == self.m_d:
            logger.warning("编码映射为一对一（m_s == m_d），粗粒度任务不提供额外层级信息")

    @property
    def m_d(self) -> int:
        return len(self.fine_codes)

    @property
    def m_s(self) -> int:
        return len(self.coarse_codes)

    def fine_index(self, code: str) -> int:
        return self._fine_index[code]

    def coarse_of(self, fine_code: str) -> str:
        return self.mapping[fine_code]

    def group_sizes(self) -> Dict[str, int]:
        return dict(Counter(self.mapping.values()))

    def fine_vector(self, codes: Iterable[str]) -> Tuple[np.ndarray, List[str]]:
        """编码列表 → 二值向量；返回 (向量, 不在映射表中的编码)"""
        vec = np.zeros(self.m_d, dtype=np.int8)
        unknown: List[str] = []
        for code in codes:
            idx = self._fine_index.get(code)
            if idx is None:
                unknown.append(code)
            else:
                vec[idx] = 1
        return vec, unknown

    def coarse_vector(self, codes: Iterable[str]) -> np.ndarray:
        vec = np.zeros(self.m_s, dtype=np.int8)
        for code in codes:
            idx = self._coarse_index.get(code)
            if idx is not None:
                vec[idx] = 1
        return vec

    def map_fine_to_coarse(self, fine_labels: np.ndarray) -> np.ndarray:
        """粗粒度标签 = 细粒度标签在映射下的逻辑或"""
        fine = np.asarray(fine_labels)
        if fine.shape != (self.m_d,):
            raise ShapeError(f"细粒度标签长度应为 {self.m_d}，收到 {fine.shape}")
        coarse = np.zeros(self.m_s, dtype=np.int8)
        active = np.flatnonzero(fine)
        coarse[self._fine_to_coarse[active]] = 1
        return coarse


def load_code_map(path: str | Path) -> CodeMap:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CodeMapError(f"编码映射文件不是合法 JSON：{path}（{exc}）") from exc
    if not isinstance(payload, dict):
        raise CodeMapError(f"编码映射文件需为 JSON 对象：{path}")
    return CodeMap(payload)


def save_code_map(code_map: CodeMap, path: str | Path) -> None:
    ordered = {code: code_map.mapping[code] for code in code_map.fine_codes}
    Path(path).write_text(json.dumps(ordered, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


# ---------- 文档编码 ----------


@dataclass(eq=False)
class EncodedDocument:
    id: str
    token_ids: np.ndarray
    fine_labels: np.ndarray
    coarse_labels: np.ndarray

    def __len__(self) -> int:
        return int(self.token_ids.size)


def encode_document(
    tokens: Sequence[str],
    vocab: Vocabulary,
    max_len: int,
    fine_labels: Sequence[int] | np.ndarray,
    code_map: CodeMap,
    doc_id: str = "",
) -> EncodedDocument:
    """查表（未登录词→UNK）、保留前 max_len 个词，粗粒度标签由映射推导"""
    fine = np.asarray(fine_labels, dtype=np.int8).reshape(-1)
    if fine.size != code_map.m_d:
        raise ShapeError(f"细粒度标签长度应为 {code_map.m_d}，收到 {fine.size}")
    ids = np.asarray(vocab.encode(tokens[:max_len]), dtype=np.int64)
    return EncodedDocument(
        id=doc_id,
        token_ids=ids,
        fine_labels=fine,
        coarse_labels=code_map.map_fine_to_coarse(fine),
    )


def decode_document(doc: EncodedDocument, vocab: Vocabulary) -> List[str]:
    return vocab.decode(doc.token_ids.tolist())


def encode_records(
    records: Sequence[CorpusRecord],
    vocab: Vocabulary,
    code_map: CodeMap,
    max_len: int,
) -> List[EncodedDocument]:
    """批量编码语料记录；映射表外的编码被忽略，与给定 ccs 不一致时告警"""
    docs: List[EncodedDocument] = []
    unknown_codes: Counter[str] = Counter()
    ccs_mismatch = 0
    for rec in records:
        fine, unknown = code_map.fine_vector(rec.icd)
        unknown_codes.update(unknown)
        doc = encode_document(tokenize_and_clean(rec.text), vocab, max_len, fine, code_map, doc_id=rec.id)
        if rec.ccs is not None and not np.array_equal(code_map.coarse_vector(rec.ccs), doc.coarse_labels):
            ccs_mismatch += 1
        docs.append(doc)
    if unknown_codes:
        logger.info("忽略 %d 个不在映射表中的编码（共 %d 次）", len(unknown_codes), sum(unknown_codes.values()))
    if ccs_mismatch:
        logger.warning("%d 篇文档给定的 ccs 与映射推导结果不一致，已以映射结果为准", ccs_mismatch)
    return docs


# ---------- 词向量 ----------


@dataclass(eq=False)
class EmbeddingTable:
    """|V| × d_e 词向量矩阵，PAD 行恒为零"""

    tokens: List[str]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.tokens):
            raise ShapeError(f"词向量矩阵形状 {self.matrix.shape} 与词数 {len(self.tokens)} 不符")

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def align_to(self, vocab: Vocabulary, fallback: np.ndarray) -> np.ndarray:
        """按词表顺序重排；缺失词取 fallback 对应行，PAD 行置零"""
        if fallback.shape != (len(vocab), self.dim):
            raise ShapeError(f"fallback 形状应为 {(len(vocab), self.dim)}，收到 {fallback.shape}")
        out = np.array(fallback, dtype=np.float64, copy=True)
        own = {tok: i for i, tok in enumerate(self.tokens)}
        hits = 0
        for i, tok in enumerate(vocab.tokens):
            j = own.get(tok)
            if j is not None:
                out[i] = self.matrix[j]
                hits += 1
        out[PAD_ID] = 0.0
        logger.info("预训练词向量覆盖 %d/%d 个词", hits, len(vocab))
        return out


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """首行 "<|V|> <d_e>"，之后每行：词 + d_e 个实数（最短可逆十进制表示）"""
    lines = [f"{len(table.tokens)} {table.dim}"]
    for tok, row in zip(table.tokens, table.matrix):
        lines.append(tok + " " + " ".join(repr(x) for x in row.tolist()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path: str | Path) -> EmbeddingTable:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise CorpusFormatError("词向量文件首行应为 '<|V|> <d_e>'", line=1, path=str(path))
        n, d = int(header[0]), int(header[1])
        tokens: List[str] = []
        matrix = np.zeros((n, d))
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if not line.strip():
                continue
            if len(parts) != d + 1:
                raise CorpusFormatError(f"应有 {d + 1} 列，实际 {len(parts)} 列", line=lineno, path=str(path))
            if len(tokens) >= n:
                raise CorpusFormatError(f"行数超过首行声明的 {n}", line=lineno, path=str(path))
            try:
                matrix[len(tokens)] = [float(x) for x in parts[1:]]
            except ValueError as exc:
                raise CorpusFormatError(f"数值解析失败：{exc}", line=lineno, path=str(path)) from exc
            tokens.append(parts[0])
    if len(tokens) != n:
        raise CorpusFormatError(f"首行声明 {n} 个词，实际读到 {len(tokens)} 个", path=str(path))
    return EmbeddingTable(tokens, matrix)


def pretrain_skipgram(
    docs: Sequence[Sequence[int]],
    vocab: Vocabulary,
    d_e: int = 100,
    window: int = SKIPGRAM_WINDOW,
    negatives: int = SKIPGRAM_NEGATIVES,
    epochs: int = SKIPGRAM_EPOCHS,
    seed: int = 0,
    lr: float = SKIPGRAM_LR,
) -> EmbeddingTable:
    """skip-gram + 负采样。

    输入向量初始化为 U(-0.5/d_e, 0.5/d_e)，输出向量初始化为零；负样本按 词频^0.75 抽取；
    每篇文档内的样本对一次性计算梯度后累加更新，学习率随进度线性衰减。结果只由 seed 决定。
    """
    if d_e <= 0:
        raise ValueError(f"d_e 必须为正，收到 {d_e}")
    size = len(vocab)
    rng = np.random.default_rng(seed)
    w_in = rng.uniform(-0.5 / d_e, 0.5 / d_e, size=(size, d_e))
    w_in[PAD_ID] = 0.0
    w_out = np.zeros((size, d_e))

    arrays = [np.asarray(doc, dtype=np.int64) for doc in docs]
    counts = np.bincount(np.concatenate(arrays), minlength=size).astype(np.float64) if arrays else np.zeros(size)
    counts[PAD_ID] = 0.0
    if epochs == 0 or counts.sum() == 0:
        return EmbeddingTable(list(vocab.tokens), w_in)

    noise = counts ** SKIPGRAM_POWER
    cdf = np.cumsum(noise / noise.sum())
    total_steps = epochs * len(arrays)
    step = 0
    for epoch in range(epochs):
        epoch_loss = 0.0
        for ids in arrays:
            alpha = lr * max(SKIPGRAM_MIN_LR_RATIO, 1.0 - step / total_steps)
            step += 1
            n = ids.size
            if n < 2:
                continue
            # 每个中心词随机缩小窗口（word2vec 的做法）
            reach = rng.integers(1, window + 1, size=n)
            centers: List[np.ndarray] = []
            contexts: List[np.ndarray] = []
            for off in range(1, window + 1):
                if off >= n:
                    break
                pos = np.arange(n - off)
                right = pos[reach[pos] >= off]
                centers.append(ids[right])
                contexts.append(ids[right + off])
                left = pos + off
                left = left[reach[left] >= off]
                centers.append(ids[left])
                contexts.append(ids[left - off])
            c = np.concatenate(centers)
            o = np.concatenate(contexts)
            if c.size == 0:
                continue
            neg = np.minimum(np.searchsorted(cdf, rng.random((c.size, negatives))), size - 1)
            v = w_in[c]
            u_pos = w_out[o]
            u_neg = w_out[neg]
            s_pos = 1.0 / (1.0 + np.exp(-np.einsum("pd,pd->p", v, u_pos)))
            s_neg = 1.0 / (1.0 + np.exp(-np.einsum("pd,pkd->pk", v, u_neg)))
            epoch_loss -= float(np.log(np.maximum(s_pos, 1e-12)).sum() + np.log(np.maximum(1.0 - s_neg, 1e-12)).sum())
            g_pos = s_pos - 1.0
            grad_v = g_pos[:, None] * u_pos + np.einsum("pk,pkd->pd", s_neg, u_neg)
            np.add.at(w_out, o, -alpha * g_pos[:, None] * v)
            np.add.at(w_out, neg.reshape(-1), -alpha * (s_neg[:, :, None] * v[:, None, :]).reshape(-1, d_e))
            np.add.at(w_in, c, -alpha * grad_v)
        logger.info("skip-gram epoch %d/%d：负采样损失 %.4f", epoch + 1, epochs, epoch_loss)
    w_in[PAD_ID] = 0.0
    return EmbeddingTable(list(vocab.tokens), w_in)


# ---------- 合成语料 ----------

_ONSETS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_SYLLABLES = [c + v for c in _ONSETS for v in _VOWELS]


def synthetic_word(i: int) -> str:
    """第 i 个合成词：至少两个音节的纯字母串，保证通过清洗规则且互不相同"""
    base = len(_SYLLABLES)
    parts = [_SYLLABLES[i % base]]
    i //= base
    parts.append(_SYLLABLES[i % base])
    i //= base
    while i:
        parts.append(_SYLLABLES[i % base])
        i //= base
    return "".join(reversed(parts))


def fine_code_name(j: int) -> str:
    return f"ICD{j:03d}"


def coarse_code_name(g: int) -> str:
    return f"CCS{g:03d}"


def label_priors(spec: CorpusSpec, cap: float = 0.95) -> np.ndarray:
    """Zipf 形状的编码先验，截断于 cap 并缩放使总和等于 label_sparsity"""
    weights = 1.0 / np.arange(1, spec.m_d + 1, dtype=np.float64) ** spec.zipf_exponent
    lo, hi = 0.0, spec.label_sparsity / weights.min()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.minimum(cap, mid * weights).sum() < spec.label_sparsity:
            lo = mid
        else:
            hi = mid
    return np.minimum(cap, hi * weights)


def block_code_map(m_d: int, m_s: int) -> CodeMap:
    """按连续分块把 m_d 个细粒度编码分配给 m_s 个粗粒度编码"""
    if m_s > m_d:
        raise CodeMapError(f"m_s ({m_s}) 不能大于 m_d ({m_d})")
    return CodeMap({fine_code_name(j): coarse_code_name(j * m_s // m_d) for j in range(m_d)})


def gen_synthetic_corpus(spec: CorpusSpec, seed: int) -> Tuple[List[CorpusRecord], CodeMap]:
    """生成合成语料。

    每个细粒度编码独占一组互不相交的信号词；文档的每个激活编码至少贡献一个信号词，
    其余位置以 noise_rate 概率取背景词，否则从激活编码的信号词中抽取。
    """
    signal_total = spec.m_d * spec.signal_tokens_per_code
    if spec.vocab_size < signal_total + 1:
        raise ValueError(
            f"vocab_size={spec.vocab_size} 过小：{spec.m_d} 个编码 × {spec.signal_tokens_per_code} 个信号词"
            f" 还需至少 1 个背景词"
        )
    code_map = block_code_map(spec.m_d, spec.m_s)
    words = [synthetic_word(i) for i in range(spec.vocab_size)]
    per_code = spec.signal_tokens_per_code
    background = np.arange(signal_total, spec.vocab_size)
    priors = label_priors(spec)
    rng = np.random.default_rng(seed)

    records: List[CorpusRecord] = []
    for i in range(spec.n_docs):
        codes = np.flatnonzero(rng.random(spec.m_d) < priors)
        length = max(int(rng.integers(spec.min_len, spec.max_len + 1)), codes.size)
        picks = np.empty(length, dtype=np.int64)
        for slot, j in enumerate(codes):
            picks[slot] = j * per_code + rng.integers(per_code)
        for slot in range(codes.size, length):
            if codes.size == 0 or rng.random() < spec.noise_rate:
                picks[slot] = background[rng.integers(background.size)]
            else:
                j = codes[rng.integers(codes.size)]
                picks[slot] = j * per_code + rng.integers(per_code)
        picks = picks[rng.permutation(length)]
        icd = [fine_code_name(int(j)) for j in codes]
        ccs = sorted({code_map.coarse_of(c) for c in icd})
        records.append(CorpusRecord(id=f"syn-{i:06d}", text=" ".join(words[k] for k in picks), icd=icd, ccs=ccs))
    logger.info("合成语料生成完成：%d 篇文档，m_d=%d，m_s=%d", len(records), code_map.m_d, code_map.m_s)
    return records, code_map


def split_by_id(
    records: Sequence[CorpusRecord],
    ratios: Sequence[float],
    seed: int,
    names: Sequence[str] = SPLIT_NAMES,
) -> Dict[str, List[CorpusRecord]]:
    """按 (seed, id) 的哈希确定切分；新增文档不会改变既有文档的归属"""
    bounds = np.cumsum(ratios)
    out: Dict[str, List[CorpusRecord]] = {name: [] for name in names}
    for rec in records:
        digest = hashlib.sha256(f"{seed}:{rec.id}".encode("utf-8")).digest()
        u = int.from_bytes(digest[:8], "big") / 2.0**64
        idx = min(int(np.searchsorted(bounds, u, side="right")), len(names) - 1)
        out[names[idx]].append(rec)
    return out


# ---------- JSONL ----------


def load_jsonl(path: str | Path) -> List[CorpusRecord]:
    """读取语料 JSONL；格式错误时报告 1 起始的行号"""
    path = Path(path)
    records: List[CorpusRecord] = []
    with path.open("rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorpusFormatError(
                    f"不是合法的 UTF-8：{exc.reason}（字节偏移 {exc.start}）", line=lineno, path=str(path)
                ) from exc
            if not line.strip():
                continue
            try:
                records.append(CorpusRecord.model_validate(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"JSON 解析失败：{exc.msg}", line=lineno, path=str(path)) from exc
            except ValidationError as exc:
                fields = ", ".join(".".join(str(p) for p in err["loc"]) for err in exc.errors())
                raise CorpusFormatError(f"字段缺失或类型错误：{fields}", line=lineno, path=str(path)) from exc
    return records


def write_jsonl(path: str | Path, records: Iterable[CorpusRecord]) -> int:
    count = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.model_dump(exclude_none=True), ensure_ascii=False) + "\n")
            count += 1
    return count


__all__ = [
    "tokenize_and_clean",
    "Vocabulary",
    "build_vocab",
    "CodeMap",
    "load_code_map",
    "save_code_map",
    "EncodedDocument",
    "encode_document",
    "decode_document",
    "encode_records",
    "EmbeddingTable",
    "save_embeddings",
    "load_embeddings",
    "pretrain_skipgram",
    "synthetic_word",
    "label_priors",
    "block_code_map",
    "gen_synthetic_corpus",
    "split_by_id",
    "load_jsonl",
    "write_jsonl",
]
