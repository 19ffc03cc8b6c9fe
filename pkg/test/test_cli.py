import json
import sys
from pathlib import Path

import pandas as pd
import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from mtram.commands.common import apply_overrides, load_run_config
from mtram.config import settings
from mtram.errors import ConfigError
from mtram.main import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from mtram.utils.artifacts import config_hash

OVERFIT = str(ROOT_DIR / "configs" / "overfit.json")
FAST = ["--set", "train.epochs=2", "--set", "skipgram.epochs=1"]


@pytest.fixture(autouse=True)
def quiet_settings(tmp_path, monkeypatch):
    """日志写到临时目录，关闭进度条"""
    monkeypatch.setattr(settings, "LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setattr(settings, "OUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setattr(settings, "PROGRESS", False)
    monkeypatch.setattr(settings, "WORKERS", 1)


@pytest.fixture()
def corpus_dir(tmp_path) -> Path:
    """用 overfit 配置生成一份语料"""
    assert main(["gen", "--config", OVERFIT, "--out", str(tmp_path / "data")]) == EXIT_OK
    return _only(tmp_path / "data", "gen")


def _only(root: Path, command: str) -> Path:
    dirs = sorted(root.glob(f"{command}-*"))
    assert len(dirs) == 1, dirs
    return dirs[0]


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


# ---------- 配置 ----------


def test_overrides_parse_json_values():
    payload = apply_overrides({"train": {"epochs": 5}}, ["train.epochs=2", "ablation.seeds=[0, 1]", "paths.corpus_dir=/tmp/x"])
    assert payload["train"]["epochs"] == 2
    assert payload["ablation"]["seeds"] == [0, 1]
    assert payload["paths"]["corpus_dir"] == "/tmp/x"
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])


def test_load_run_config_lists_every_problem():
    with pytest.raises(ConfigError) as exc_info:
        load_run_config(None, ["train.lr=0", "model.hidden_dim=5", "model.kernel_size=2"])
    fields = " ".join(exc_info.value.problems)
    assert "train.lr" in fields
    assert "model.hidden_dim" in fields
    assert "model.kernel_size" in fields


def test_seed_flag_overrides_config_and_changes_hash():
    a = load_run_config(OVERFIT)
    b = load_run_config(OVERFIT, seed=7)
    assert b.seed == 7 and b.train.seed == 7
    assert len(config_hash(a)) == 12
    assert config_hash(a) != config_hash(b)
    assert config_hash(a) == config_hash(load_run_config(OVERFIT))


def test_bad_arguments_exit_with_config_error(capsys):
    assert main(["nosuch"]) == EXIT_CONFIG
    assert main(["train", "--set", "train.lr=-1"]) == EXIT_CONFIG
    assert "train.lr" in capsys.readouterr().err
    assert main(["gen", "--config", "/nonexistent/config.json"]) == EXIT_CONFIG


# ---------- gen ----------


def test_gen_is_deterministic(tmp_path, corpus_dir):
    assert main(["gen", "--config", OVERFIT, "--out", str(tmp_path / "again")]) == EXIT_OK
    other = _only(tmp_path / "again", "gen")
    assert other.name == corpus_dir.name
    for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "code_map.json", "manifest.json"):
        assert (corpus_dir / name).read_bytes() == (other / name).read_bytes(), name


def test_gen_manifest_and_split_sizes(corpus_dir):
    manifest = _read_json(corpus_dir / "manifest.json")
    cfg = load_run_config(OVERFIT)
    assert manifest["command"] == "gen"
    assert manifest["seed"] == 0
    assert manifest["config_hash"] == config_hash(cfg)
    assert corpus_dir.name == f"gen-{config_hash(cfg)}-s0"
    assert sum(manifest["split_sizes"].values()) == cfg.corpus.n_docs
    code_map = _read_json(corpus_dir / "code_map.json")
    assert len(code_map) == 8 and len(set(code_map.values())) == 4


def test_seed_changes_artifact_directory(tmp_path):
    out = tmp_path / "seeds"
    assert main(["gen", "--config", OVERFIT, "--out", str(out), "--seed", "1"]) == EXIT_OK
    assert main(["gen", "--config", OVERFIT, "--out", str(out), "--seed", "2"]) == EXIT_OK
    names = sorted(p.name for p in out.glob("gen-*"))
    assert len(names) == 2
    assert names[0].endswith("-s1") and names[1].endswith("-s2")


# ---------- train / eval ----------


def test_train_missing_corpus_names_field(tmp_path, capsys):
    code = main(["train", "--config", OVERFIT, "--out", str(tmp_path / "runs"),
                 "--set", f"paths.corpus_dir={tmp_path / 'nowhere'}"])
    assert code == EXIT_CONFIG
    assert "paths.corpus_dir" in capsys.readouterr().err
    assert main(["train", "--config", OVERFIT, "--out", str(tmp_path / "runs")]) == EXIT_CONFIG


def test_train_then_eval_round_trip(tmp_path, corpus_dir):
    runs = tmp_path / "runs"
    common = ["--config", OVERFIT, "--out", str(runs), "--set", f"paths.corpus_dir={corpus_dir}", *FAST]
    assert main(["train", *common]) == EXIT_OK
    train_dir = _only(runs, "train")
    for name in ("best.ckpt", "train_log.jsonl", "report_dev.json", "manifest.json"):
        assert (train_dir / name).is_file(), name

    log = [json.loads(line) for line in (train_dir / "train_log.jsonl").read_text(encoding="utf-8").splitlines()]
    assert [r["epoch"] for r in log] == [1, 2]
    assert "fine.micro_f1" in log[0] and "coarse.macro_auc" in log[0]
    manifest = _read_json(train_dir / "manifest.json")
    train_report = _read_json(train_dir / "report_dev.json")
    assert train_report["fine"]["config_hash"] == manifest["config_hash"]
    assert train_report["fine"]["seed"] == 0

    ckpt = train_dir / "best.ckpt"
    assert main(["eval", *common, "--checkpoint", str(ckpt), "--split", "dev"]) == EXIT_OK
    eval_dir = _only(runs, "eval")
    eval_report = _read_json(eval_dir / "report_dev.json")
    assert eval_report == train_report

    first = (eval_dir / "report_dev.json").read_bytes()
    assert main(["eval", *common, "--checkpoint", str(ckpt), "--split", "dev"]) == EXIT_OK
    assert (eval_dir / "report_dev.json").read_bytes() == first
    eval_manifest = _read_json(eval_dir / "manifest.json")
    assert eval_manifest["checkpoint_config_hash"] == manifest["config_hash"]
    assert "warnings" not in eval_manifest


@pytest.mark.parametrize("workers", [1, 3])
def test_train_twice_is_bit_identical(tmp_path, corpus_dir, workers):
    common = ["--config", OVERFIT, "--set", f"paths.corpus_dir={corpus_dir}", *FAST, "--workers", str(workers)]
    assert main(["train", *common, "--out", str(tmp_path / "first")]) == EXIT_OK
    assert main(["train", *common, "--out", str(tmp_path / "second")]) == EXIT_OK
    first, second = _only(tmp_path / "first", "train"), _only(tmp_path / "second", "train")
    for name in ("best.ckpt", "train_log.jsonl", "report_dev.json", "manifest.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_eval_invocations_do_not_share_directories(tmp_path, corpus_dir):
    runs = tmp_path / "runs"
    common = ["--config", OVERFIT, "--out", str(runs), "--set", f"paths.corpus_dir={corpus_dir}", *FAST]
    assert main(["train", *common]) == EXIT_OK
    ckpt = str(_only(runs, "train") / "best.ckpt")
    assert main(["eval", *common, "--checkpoint", ckpt, "--split", "dev"]) == EXIT_OK
    assert main(["eval", *common, "--checkpoint", ckpt, "--split", "test"]) == EXIT_OK
    assert main(["eval", *common, "--checkpoint", ckpt, "--split", "test", "--task", "fine"]) == EXIT_OK

    eval_dirs = sorted(runs.glob("eval-*"))
    assert len(eval_dirs) == 3
    listed = []
    for directory in eval_dirs:
        manifest = _read_json(directory / "manifest.json")
        assert manifest["files"] == [f"report_{manifest['split']}.json"]
        assert (directory / manifest["files"][0]).is_file()
        listed.append((manifest["split"], tuple(manifest["tasks"])))
    assert sorted(listed) == [("dev", ("fine", "coarse")), ("test", ("fine",)), ("test", ("fine", "coarse"))]


def test_eval_untrained_head_warns(tmp_path, corpus_dir, capsys):
    runs = tmp_path / "runs"
    common = ["--config", OVERFIT, "--out", str(runs), "--set", f"paths.corpus_dir={corpus_dir}", *FAST]
    assert main(["train", *common, "--set", "train.mode=fine_only"]) == EXIT_OK
    ckpt = _only(runs, "train") / "best.ckpt"
    assert main(["eval", *common, "--checkpoint", str(ckpt), "--task", "coarse"]) == EXIT_OK
    eval_dir = _only(runs, "eval")
    report = _read_json(eval_dir / "report_test.json")
    assert set(report) == {"coarse"}
    warnings = _read_json(eval_dir / "manifest.json")["warnings"]
    assert warnings and "coarse" in warnings[0]
    assert "[coarse]" in capsys.readouterr().out


def test_eval_rejects_mismatched_label_space(tmp_path, corpus_dir):
    runs = tmp_path / "runs"
    common = ["--config", OVERFIT, "--out", str(runs), *FAST]
    assert main(["train", *common, "--set", f"paths.corpus_dir={corpus_dir}"]) == EXIT_OK
    ckpt = _only(runs, "train") / "best.ckpt"

    assert main(["gen", "--config", OVERFIT, "--out", str(tmp_path / "wide"),
                 "--set", "corpus.m_d=6", "--set", "corpus.m_s=3"]) == EXIT_OK
    wide = _only(tmp_path / "wide", "gen")
    assert main(["eval", *common, "--set", f"paths.corpus_dir={wide}", "--checkpoint", str(ckpt)]) == EXIT_RUNTIME


def test_pretrained_embeddings_feed_training(tmp_path, corpus_dir):
    runs = tmp_path / "runs"
    common = ["--config", OVERFIT, "--out", str(runs), "--set", f"paths.corpus_dir={corpus_dir}", *FAST]
    assert main(["pretrain", *common]) == EXIT_OK
    emb = _only(runs, "pretrain") / "embeddings.txt"
    header = emb.read_text(encoding="utf-8").splitlines()[0].split()
    assert int(header[1]) == 16
    assert main(["train", *common, "--set", f"paths.embeddings={emb}", "--set", "train.epochs=1"]) == EXIT_OK

    assert main(["train", *common, "--set", f"paths.embeddings={emb}", "--set", "model.embed_dim=8"]) == EXIT_RUNTIME


# ---------- ablate ----------


def test_ablate_writes_tables_and_summary(tmp_path, corpus_dir):
    runs = tmp_path / "runs"
    assert main([
        "ablate", "--config", OVERFIT, "--out", str(runs),
        "--set", f"paths.corpus_dir={corpus_dir}",
        "--set", "train.epochs=1",
        "--set", 'ablation.modes=["multitask", "fine_only"]',
        "--set", 'ablation.rams=["mult", "off"]',
        "--set", "ablation.seeds=[0]",
    ]) == EXIT_OK
    out = _only(runs, "ablate")
    table = pd.read_csv(out / "ablation.csv")
    assert list(table["config"]) == [
        "multitask/ram=mult/shared", "multitask/ram=off", "fine_only/ram=mult/shared", "fine_only/ram=off",
    ]
    assert (table["seed_count"] == 1).all()
    assert (table["fine.macro_f1_std"] == 0.0).all()
    manifest = _read_json(out / "manifest.json")
    assert set(table["config_hash"]) == {manifest["config_hash"]}
    runs_table = pd.read_csv(out / "ablation_runs.csv")
    assert len(runs_table) == 4
    wins = pd.read_csv(out / "ablation_wins.csv")
    assert set(wins["comparison"]) == {"mtl_vs_single", "ram_vs_none"}
    summary = (out / "ablation_summary.md").read_text(encoding="utf-8")
    assert "±" in summary
    assert manifest["config_hash"] in summary
