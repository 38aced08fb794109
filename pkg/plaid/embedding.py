"""Learned token embedding W_Embed and its nearest-row decode."""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import Tensor, nn

from .errors import CheckpointError, TokenIndexError

DEFAULT_EMBED_DIM = 16


class EmbeddingTable(nn.Module):
    """(V, d) matrix of token embeddings; rows start i.i.d. N(0, 1/d)."""

    def __init__(self, vocab_size: int, embed_dim: int = DEFAULT_EMBED_DIM, *,
                 generator: Optional[torch.Generator] = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.weight = nn.Parameter(
            torch.randn(vocab_size, embed_dim, generator=generator, dtype=dtype) / math.sqrt(embed_dim))

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[1]


def check_tokens(tokens: Tensor, vocab_size: int) -> None:
    if tokens.numel() == 0:
        return
    lo, hi = int(tokens.min()), int(tokens.max())
    if lo < 0 or hi >= vocab_size:
        raise TokenIndexError(f"token id out of range [0, {vocab_size}): min={lo} max={hi}")


def embed(tokens: Tensor, table: EmbeddingTable) -> Tensor:
    """Row lookup: (..., L) token ids -> (..., L, d)."""
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    check_tokens(tokens, table.vocab_size)
    return table.weight[tokens]


def nearest_token(vector: Tensor, table: EmbeddingTable) -> Tensor:
    """Index of the closest row in squared Euclidean distance; ties go to the lowest id.

    Accepts a single d-vector or any (..., d) batch.
    """
    w = table.weight.detach()
    v = vector.detach().to(w.dtype)
    dist = (v.unsqueeze(-2) - w).pow(2).sum(-1)
    # torch.argmin returns the first minimal index
    return torch.argmin(dist, dim=-1)


def assert_distinct_rows(table: EmbeddingTable) -> None:
    """Raise CheckpointError if two rows coincide (Embed would not be invertible)."""
    w = table.weight.detach()
    unique = torch.unique(w, dim=0)
    if unique.shape[0] != w.shape[0]:
        raise CheckpointError(
            f"embedding table has duplicate rows ({w.shape[0] - unique.shape[0]} collisions)")
