"""
梯度自检脚本：在小模型上用中心差分逐参数核对解析梯度。

使用方式（在项目根目录执行）：
  uv run scripts/check_gradients.py
  uv run scripts/check_gradients.py --max-entries 25 --atol 1e-8  # 每个参数抽查 25 个元素，更快

说明：
- 覆盖 RAM 的 mult / add / off 三种模式，以及粗粒度分支独立 RAM 的放置方式；
- 任一参数的最大相对误差超过 --tol 时以退出码 1 结束。
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Tuple

import numpy as np

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from mtram.corpus import EncodedDocument  # noqa: E402
from mtram.model import init_params, model_forward  # noqa: E402
from mtram.numcore import grad_check  # noqa: E402
from mtram.schemas import ModelConfig  # noqa: E402
from mtram.train import bce_loss, joint_loss  # noqa: E402

VARIANTS: List[Tuple[str, str]] = [("mult", "shared"), ("add", "shared"), ("mult", "branch"), ("off", "shared")]


def toy_document(rng: np.random.Generator, n: int, vocab: int, m_d: int, m_s: int) -> EncodedDocument:
    return EncodedDocument(
        id="grad-check",
        token_ids=rng.integers(2, vocab, size=n),
        fine_labels=(rng.random(m_d) < 0.4).astype(np.int8),
        coarse_labels=(rng.random(m_s) < 0.5).astype(np.int8),
    )


def main() -> int:
    parser = argparse.ArgumentParser(description="MT-RAM 端到端梯度检查")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--length", type=int, default=12, help="文档长度 n")
    parser.add_argument("--h", type=float, default=1e-5, help="中心差分步长")
    parser.add_argument("--tol", type=float, default=1e-4, help="允许的最大相对误差")
    parser.add_argument("--atol", type=float, default=0.0, help="绝对误差低于此值视为一致，默认 0（纯相对误差）")
    parser.add_argument("--max-entries", type=int, default=0, help="每个参数抽查的元素数，默认 0 表示全部")
    args = parser.parse_args()

    vocab, m_d, m_s = 20, 5, 3
    rng = np.random.default_rng(args.seed)
    doc = toy_document(rng, args.length, vocab, m_d, m_s)
    failed = False
    for ram, placement in VARIANTS:
        cfg = ModelConfig(embed_dim=6, hidden_dim=4, kernel_size=3, dropout=0.0, ram_placement=placement)
        params = init_params(cfg, ram, vocab, m_d, m_s, seed=args.seed)

        def loss_fn(tape, views, params=params):
            watched = params.map_tensors(lambda name, _t: views[name])
            result = model_forward(doc, watched, training=False, rng=None, tape=tape, watched=True)
            lf = bce_loss(tape, result.fine.probs, doc.fine_labels)
            ls = bce_loss(tape, result.coarse.probs, doc.coarse_labels)
            return joint_loss(tape, lf, ls, (0.7, 0.3))

        report = grad_check(
            loss_fn,
            params.named_tensors(),
            h=args.h,
            tol=args.tol,
            atol=args.atol,
            max_entries=args.max_entries or None,
            seed=args.seed,
        )
        name, err = report.worst
        status = "通过" if report.passed else "失败"
        print(f"[{status}] ram={ram} placement={placement}：最差参数 {name}，相对误差 {err:.3e}")
        for bad, value in report.failures().items():
            print(f"    - {bad}: {value:.3e}")
        failed = failed or not report.passed

    if failed:
        return 1
    print("全部梯度检查通过。")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
