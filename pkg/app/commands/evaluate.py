"""
Eval Command

Loads a checkpoint, evaluates the bound on a packed split and prints the
report as one JSON record (also written to --out when given).
"""
import json
from pathlib import Path

import torch

from app.checkpoint import load_checkpoint
from app.config import RunConfig
from logging_service import get_logger
from plaid.errors import InputError
from plaid.objective import eval_nll

from .tokenize import load_split, load_vocab
from .train import checkpoint_path

logger = get_logger('plaid.cmd.eval')


def run_eval(args, cfg: RunConfig) -> int:
    loaded = load_checkpoint(checkpoint_path(cfg))
    state = loaded.state
    data_dir = Path(cfg.data.dir)
    vocab = loaded.vocab or load_vocab(data_dir)
    split = cfg.eval.split
    dataset = load_split(data_dir, split, vocab)
    if dataset is None or len(dataset) == 0:
        raise InputError(f"no {split} split in {data_dir}")

    report = eval_nll(state.model, state.schedule, state.table, dataset.sequences,
                      cfg.eval.mc_draws, torch.Generator().manual_seed(cfg.eval.seed),
                      anneal_step=state.anneal_step, batch_size=cfg.eval.batch_size,
                      token_chars=vocab.token_chars(), dataset_name=split, seed=cfg.eval.seed)
    record = report.to_record()
    text = json.dumps(record, sort_keys=True)
    print(text)
    if cfg.paths.out:
        out = Path(cfg.paths.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + '\n', encoding='utf-8')
    return 0
