"""
验收脚本：串起 gen → train → eval（可选 ablate），核对关键指标。

使用方式（在项目根目录执行）：
  uv run scripts/run_acceptance.py                      # overfit 夹具：训练集 fine micro-F1 ≥ 0.95
  uv run scripts/run_acceptance.py --ablation           # 另跑默认配置的消融：多任务 / RAM 方向与 add、mult 损失下降（耗时较长）
  uv run scripts/run_acceptance.py --out runs/accept --processes 4

说明：
- 每一步都通过 mtram 的命令行入口执行，产物按 <命令>-<配置哈希>-s<种子> 落在 --out 下；
- 任一检查不满足时以退出码 1 结束。
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List

import pandas as pd

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from mtram.main import EXIT_OK, main as mtram_main  # noqa: E402
from mtram.train import direction_verdict  # noqa: E402

CONFIGS = ROOT_DIR / "configs"


def run(argv: List[str]) -> None:
    print("$ mtram " + " ".join(argv))
    code = mtram_main(argv)
    if code != EXIT_OK:
        print(f"命令失败（退出码 {code}）")
        sys.exit(1)


def latest(root: Path, command: str) -> Path:
    dirs = sorted(root.glob(f"{command}-*"), key=lambda p: p.stat().st_mtime)
    if not dirs:
        print(f"{root} 下没有 {command} 产物")
        sys.exit(1)
    return dirs[-1]


def overfit_check(out: Path, seed: int, target: float) -> bool:
    config = str(CONFIGS / "overfit.json")
    common = ["--config", config, "--seed", str(seed)]
    run(["gen", *common, "--out", str(out / "data")])
    corpus = latest(out / "data", "gen")
    common += ["--set", f"paths.corpus_dir={corpus}"]
    run(["train", *common, "--out", str(out / "train")])
    ckpt = latest(out / "train", "train") / "best.ckpt"
    run(["eval", *common, "--out", str(out / "eval"), "--checkpoint", str(ckpt), "--split", "train", "--task", "fine"])
    report = json.loads((latest(out / "eval", "eval") / "report_train.json").read_text(encoding="utf-8"))
    score = report["fine"]["micro_f1"]
    ok = score >= target
    print(f"[{'通过' if ok else '失败'}] overfit 夹具训练集 fine micro-F1 = {score:.4f}（目标 ≥ {target}）")
    return ok


def ablation_check(out: Path, processes: int, min_wins: int, margin: float) -> bool:
    config = str(CONFIGS / "default.json")
    run(["gen", "--config", config, "--out", str(out / "data-default")])
    corpus = latest(out / "data-default", "gen")
    run([
        "ablate", "--config", config, "--out", str(out / "ablate"),
        "--set", f"paths.corpus_dir={corpus}", "--processes", str(processes),
        "--set", 'ablation.rams=["mult", "add", "off"]',
    ])
    result_dir = latest(out / "ablate", "ablate")
    wins = pd.read_csv(result_dir / "ablation_wins.csv")
    ok = True
    for title, comparison, treatment in (
        ("多任务方向", "mtl_vs_single", "multitask/ram=mult/shared"),
        ("RAM 方向", "ram_vs_none", "fine_only/ram=mult/shared"),
    ):
        verdict = direction_verdict(wins, comparison, treatment, margin=margin, min_wins=min_wins)
        ok &= verdict["passed"]
        print(
            f"[{'通过' if verdict['passed'] else '失败'}] {title}：{verdict['treatment']} 对 {verdict['baseline']}，"
            f"均值 {verdict['treatment_mean']:.4f} vs {verdict['baseline_mean']:.4f}（容差 {margin}），"
            f"严格胜出 {verdict['wins']}/{verdict['seeds']}（目标 ≥ {min_wins}）"
        )

    runs = pd.read_csv(result_dir / "ablation_runs.csv")
    for ram in ("mult", "add"):
        reduction = runs[runs["ram"] == ram]["loss_reduction"]
        passed = bool(len(reduction)) and bool((reduction >= 0.5).all())
        ok &= passed
        low = float(reduction.min()) if len(reduction) else float("nan")
        print(f"[{'通过' if passed else '失败'}] ram={ram} 训练损失下降：最小 {low:.1%}（目标 ≥ 50%）")
    return ok


def main() -> int:
    parser = argparse.ArgumentParser(description="MT-RAM 验收检查")
    parser.add_argument("--out", default="runs/acceptance", help="产物目录")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--target", type=float, default=0.95, help="overfit 夹具的 micro-F1 目标")
    parser.add_argument("--ablation", action="store_true", help="同时运行默认配置的消融检查")
    parser.add_argument("--processes", type=int, default=1, help="消融并行进程数")
    parser.add_argument("--min-wins", type=int, default=3, help="方向性检查要求的最少严格胜出种子数")
    parser.add_argument("--margin", type=float, default=0.01, help="处理组均值允许低于基线均值的幅度")
    args = parser.parse_args()

    out = Path(args.out)
    results = [overfit_check(out, args.seed, args.target)]
    if args.ablation:
        results.append(ablation_check(out, args.processes, args.min_wins, args.margin))
    if not all(results):
        return 1
    print("验收检查全部通过。")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
