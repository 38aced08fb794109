"""
Train Command

Trains from the packed data directory, appending one metrics record per step
to <run_dir>/metrics.jsonl and writing checkpoints on the configured cadence.
With --resume an existing checkpoint is continued on the same trajectory.
"""
from pathlib import Path

import torch

from app.checkpoint import load_checkpoint, save_checkpoint
from app.config import RunConfig
from logging_service import get_logger
from plaid.corpus import BatchLoader
from plaid.errors import ConfigError
from plaid.objective import eval_nll
from plaid.trainer import build_train_state, fit
from run_log import RunLog

from .tokenize import load_data

logger = get_logger('plaid.cmd.train')

METRICS_FILE = 'metrics.jsonl'
CHECKPOINT_FILE = 'checkpoint.pldk'
EVAL_SEQUENCES = 64


def checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.paths.checkpoint or Path(cfg.paths.run_dir) / CHECKPOINT_FILE)


def run_train(args, cfg: RunConfig) -> int:
    data_dir = Path(cfg.data.dir)
    vocab, train_ds, val_ds = load_data(data_dir)
    run_dir = Path(cfg.paths.run_dir)
    ckpt = checkpoint_path(cfg)

    resumed = bool(getattr(args, 'resume', False)) and ckpt.is_file()
    if resumed:
        state = load_checkpoint(ckpt).state
        if getattr(args, 'steps', None) is not None:
            state.config.total_steps = args.steps
            state.config.validate()
        logger.info(f"resuming from {ckpt} at step {state.step}")
    else:
        state = build_train_state(cfg.denoiser_config(vocab.size), cfg.train_config())
    if train_ds.seq_len > state.model.config.max_len:
        raise ConfigError(f"data.seq_len {train_ds.seq_len} exceeds model.max_len "
                          f"{state.model.config.max_len}",
                          ["data.seq_len must be <= model.max_len"])

    run_log = RunLog(run_dir / METRICS_FILE, append=resumed)
    run_log.write_header(cfg.flat(), resumed_at=state.step if resumed else None)

    def on_eval(st):
        if val_ds is None:
            return
        report = eval_nll(st.model, st.schedule, st.table, val_ds.sequences[:EVAL_SEQUENCES],
                          cfg.eval.mc_draws, torch.Generator().manual_seed(cfg.eval.seed),
                          anneal_step=st.anneal_step, batch_size=cfg.eval.batch_size,
                          token_chars=vocab.token_chars(), dataset_name='validation',
                          seed=cfg.eval.seed)
        run_log.append({'step': st.step, **report.to_record()}, kind='eval')

    def on_checkpoint(st):
        save_checkpoint(ckpt, st, vocab)

    loader = BatchLoader(train_ds, state.config.batch_size, seed=state.config.seed,
                         start=state.step, prefetch=cfg.data.prefetch)
    with loader:
        state = fit(state, loader, on_metrics=run_log.append,
                    on_eval=on_eval, on_checkpoint=on_checkpoint)

    print(f"trained to step {state.step}; checkpoint {ckpt}; metrics {run_log.path}")
    return 0
