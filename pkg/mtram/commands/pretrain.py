"""pretrain：在训练划分上预训练 skip-gram 词向量"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from ..constants import EMBEDDING_FILE
from ..corpus import build_vocab, pretrain_skipgram, save_embeddings, tokenize_and_clean
from ..schemas import RunConfig
from ..utils.artifacts import artifact_dir, write_manifest
from .common import load_split_records, resolve_out, run_hash, validate_inputs

logger = logging.getLogger(__name__)

NAME = "pretrain"
HELP = "skip-gram 负采样预训练词向量"


def configure(parser: argparse.ArgumentParser) -> None:
    return None


def run(args: argparse.Namespace, cfg: RunConfig) -> Path:
    validate_inputs(cfg, splits=["train"])
    cfg_hash = run_hash(cfg)
    out = artifact_dir(resolve_out(args.out), NAME, cfg_hash, cfg.seed)
    tokens = [tokenize_and_clean(r.text) for r in load_split_records(cfg, "train")]
    vocab = build_vocab(tokens, cfg.model.min_doc_freq)
    ids = [vocab.encode(doc[:cfg.model.max_len]) for doc in tokens]
    sg = cfg.skipgram
    table = pretrain_skipgram(
        ids,
        vocab,
        d_e=cfg.model.embed_dim,
        window=sg.window,
        negatives=sg.negatives,
        epochs=sg.epochs,
        seed=cfg.seed,
        lr=sg.lr,
    )
    save_embeddings(table, out / EMBEDDING_FILE)
    write_manifest(
        out,
        command=NAME,
        cfg_hash=cfg_hash,
        seed=cfg.seed,
        files=[EMBEDDING_FILE],
        extra={"vocab_size": len(vocab), "embed_dim": table.dim},
    )
    print(out / EMBEDDING_FILE)
    return out
