"""Shared fixtures: tiny float64 models that run in milliseconds on CPU."""

import os
import sys
import tempfile
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

# keep test runs out of ~/plaid_logs
os.environ.setdefault('PLAID_LOG_DIR', tempfile.mkdtemp(prefix='plaid-test-logs-'))

import torch  # noqa: E402

from plaid.denoiser import DenoiserConfig  # noqa: E402
from plaid.trainer import TrainConfig, build_train_state  # noqa: E402

TINY_VOCAB = 7
TINY_LEN = 6


def tiny_model_config(**kw) -> DenoiserConfig:
    base = dict(vocab_size=TINY_VOCAB, depth=1, width=8, heads=2, embed_dim=4, max_len=8,
                time_dim=4, mlp_ratio=2, anneal_steps=10)
    base.update(kw)
    return DenoiserConfig(**base)


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(base_lr=1e-2, warmup_steps=0, total_steps=4, batch_size=4, seq_len=TINY_LEN,
                truncate_frac=0.0, seed=0, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


def tiny_batch(seed: int = 0, batch: int = 4, length: int = TINY_LEN) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, TINY_VOCAB, (batch, length), generator=g)


@pytest.fixture
def model_config():
    return tiny_model_config()


@pytest.fixture
def state():
    return build_train_state(tiny_model_config(), tiny_train_config())
