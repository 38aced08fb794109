"""Neural denoiser: a bidirectional Transformer producing per-position token logits.

x_hat is never predicted directly. The network emits logits f(z_t), a closed-form
Gaussian output prior is added to them, and x_hat is the softmax-weighted average
of embedding rows. Self-conditioning feeds the previous estimate back in as a
second input.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .diffusion_core import Latent, NoiseSchedule, broadcast_to_data, sigma2
from .embedding import DEFAULT_EMBED_DIM, EmbeddingTable
from .errors import ArgumentError, ConfigError, ShapeError

TWO_PASS_PROB = 0.25
DEFAULT_ANNEAL_STEPS = 5000
MODES = ("train", "eval", "sample")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class DenoiserConfig:
    vocab_size: int
    depth: int = 16
    width: int = 384
    heads: int = 6
    embed_dim: int = DEFAULT_EMBED_DIM
    max_len: int = 256
    time_dim: int = 64
    mlp_ratio: int = 4
    dtype: str = "float64"
    anneal_steps: int = DEFAULT_ANNEAL_STEPS

    # ablation switches
    self_cond: bool = True
    output_prior: bool = True
    learned_likelihood: bool = True
    learn_embeddings: bool = True
    learn_schedule: bool = True

    # noise schedule
    gamma_0: float = -3.0
    gamma_1: float = 6.0
    interior_width: int = 16

    def validate(self) -> "DenoiserConfig":
        problems = []
        if self.vocab_size < 1:
            problems.append(f"vocab_size must be >= 1 (got {self.vocab_size})")
        if self.depth < 1:
            problems.append(f"depth must be >= 1 (got {self.depth})")
        if self.heads < 1 or self.width % self.heads != 0:
            problems.append(f"width {self.width} not divisible by heads {self.heads}")
        if self.embed_dim < 1:
            problems.append(f"embed_dim must be >= 1 (got {self.embed_dim})")
        if self.time_dim < 2 or self.time_dim % 2 != 0:
            problems.append(f"time_dim must be a positive even number (got {self.time_dim})")
        if self.max_len < 1:
            problems.append(f"max_len must be >= 1 (got {self.max_len})")
        if self.dtype not in _DTYPES:
            problems.append(f"dtype must be one of {sorted(_DTYPES)} (got {self.dtype!r})")
        if self.anneal_steps < 0:
            problems.append(f"anneal_steps must be >= 0 (got {self.anneal_steps})")
        if problems:
            raise ConfigError("invalid denoiser config: " + "; ".join(problems), problems)
        return self

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DenoiserConfig":
        return cls(**data).validate()


@dataclass
class DenoiserOutput:
    logits: Tensor   # (..., L, V)
    x_hat: Tensor    # (..., L, d)


# ============================================================================
# Network
# ============================================================================
def sinusoidal_time_encoding(t: Tensor, dim: int) -> Tensor:
    """(B,) times in [0, 1] -> (B, dim) sin/cos features over geometric frequencies."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    angles = 1000.0 * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class SelfAttention(nn.Module):
    """Multi-head attention without a causal mask; padded keys can be masked out."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width, bias=False)
        self.proj = nn.Linear(width, width, bias=False)

    def forward(self, x: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        B, L, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=-1)
        q = q.view(B, L, self.heads, C // self.heads).transpose(1, 2)
        k = k.view(B, L, self.heads, C // self.heads).transpose(1, 2)
        v = v.view(B, L, self.heads, C // self.heads).transpose(1, 2)
        attn_mask = None if key_mask is None else key_mask[:, None, None, :]
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask, is_causal=False)
        return self.proj(y.transpose(1, 2).reshape(B, L, C))


class MLP(nn.Module):
    def __init__(self, width: int, ratio: int):
        super().__init__()
        self.fc = nn.Linear(width, ratio * width, bias=False)
        self.proj = nn.Linear(ratio * width, width, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(F.gelu(self.fc(x)))


class Block(nn.Module):
    """Pre-activation Transformer block with RMSNorm."""

    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.RMSNorm(width, eps=1e-6)
        self.attn = SelfAttention(width, heads)
        self.norm2 = nn.RMSNorm(width, eps=1e-6)
        self.mlp = MLP(width, mlp_ratio)

    def forward(self, x: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.mlp(self.norm2(x))


class Denoiser(nn.Module):
    """f_theta: (scaled z_t, t, self-conditioning input) -> raw logits (no output prior)."""

    # modules that count as embedding / output projections (excluded from FLOP accounting)
    EMBEDDING_MODULES = ("input_proj", "pos_embedding", "output_proj")

    def __init__(self, config: DenoiserConfig, *, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config.validate()
        w, d = config.width, config.embed_dim
        in_features = 2 * d if config.self_cond else d
        self.input_proj = nn.Linear(in_features, w)
        self.pos_embedding = nn.Parameter(torch.zeros(config.max_len, w))
        self.time_proj = nn.Linear(config.time_dim, w)
        self.blocks = nn.ModuleList(
            Block(w, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm_f = nn.RMSNorm(w, eps=1e-6)
        self.output_proj = nn.Linear(w, config.vocab_size)
        self.to(config.torch_dtype)
        self._init_weights(generator)

    @torch.no_grad()
    def _init_weights(self, generator: Optional[torch.Generator]) -> None:
        for name, p in self.named_parameters():
            if "norm" in name:
                p.fill_(1.0)
            elif p.dim() >= 2:
                p.normal_(0.0, 0.02, generator=generator)
            else:
                p.zero_()

    def non_embedding_parameters(self) -> int:
        return sum(p.numel() for name, p in self.named_parameters()
                   if not name.startswith(self.EMBEDDING_MODULES))

    def forward(self, z: Tensor, t: Tensor, y: Optional[Tensor] = None, *,
                positions: Optional[Tensor] = None,
                key_mask: Optional[Tensor] = None) -> Tensor:
        unbatched = z.dim() == 2
        if unbatched:
            z = z.unsqueeze(0)
            y = None if y is None else y.unsqueeze(0)
            key_mask = None if key_mask is None else key_mask.unsqueeze(0)
        B, L, _ = z.shape
        if L > self.config.max_len:
            raise ShapeError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        dtype = self.config.torch_dtype
        out_dtype = z.dtype

        h = z.to(dtype)
        if self.config.self_cond:
            y = torch.zeros_like(h) if y is None else y.to(dtype)
            h = torch.cat([h, y], dim=-1)
        h = self.input_proj(h)

        if positions is None:
            positions = torch.arange(L, device=z.device)
        h = h + self.pos_embedding[positions]

        tt = torch.as_tensor(t, dtype=dtype, device=z.device).reshape(-1).expand(B)
        h = h + self.time_proj(sinusoidal_time_encoding(tt, self.config.time_dim))[:, None, :]

        for block in self.blocks:
            h = block(h, key_mask)
        logits = self.output_proj(self.norm_f(h)).to(out_dtype)
        return logits.squeeze(0) if unbatched else logits


# ============================================================================
# Operations
# ============================================================================
def output_prior_coefficient(anneal_step: int, anneal_steps: int = DEFAULT_ANNEAL_STEPS) -> float:
    """Linear anneal a(s) = min(1, s / anneal_steps)."""
    if anneal_step < 0:
        raise ArgumentError(f"anneal_step must be >= 0, got {anneal_step}")
    if anneal_steps == 0:
        return 1.0
    return min(1.0, anneal_step / anneal_steps)


def gaussian_prior_logits(z: Tensor, table: EmbeddingTable, s2: Tensor) -> Tensor:
    """log N(z_i; e_v, s2 I) over v, dropping the per-row constant: (2 z.e_v - ||e_v||^2) / (2 s2)."""
    w = table.weight
    cross = z @ w.transpose(0, 1)
    norms = w.pow(2).sum(-1)
    return (2.0 * cross - norms) / (2.0 * broadcast_to_data(s2, cross))


def denoise_logits(model: Denoiser, z: Latent, self_cond: Optional[Tensor],
                   schedule: NoiseSchedule, table: EmbeddingTable, anneal_step: int, *,
                   positions: Optional[Tensor] = None,
                   key_mask: Optional[Tensor] = None) -> Tensor:
    """Network logits on z / sqrt(1 + sigma^2(t)) plus the annealed Gaussian output prior."""
    if z.z.shape[-1] != table.embed_dim:
        raise ShapeError(
            f"latent dim {z.z.shape[-1]} does not match embedding dim {table.embed_dim}")
    s2 = sigma2(schedule, z.t)
    scaled = z.z / torch.sqrt(1.0 + broadcast_to_data(s2, z.z))
    logits = model(scaled, z.t, self_cond, positions=positions, key_mask=key_mask)
    coef = output_prior_coefficient(anneal_step, model.config.anneal_steps) \
        if model.config.output_prior else 0.0
    if coef > 0.0:
        logits = logits + coef * gaussian_prior_logits(z.z, table, s2)
    return logits


def logits_to_xhat(logits: Tensor, table: EmbeddingTable) -> Tensor:
    """x_hat_i = sum_v softmax(logits_i)_v * table_v."""
    return torch.softmax(logits, dim=-1) @ table.weight


def self_cond_forward(model: Denoiser, z: Latent, mode: str, prev: Optional[Tensor] = None,
                      generator: Optional[torch.Generator] = None, *,
                      schedule: NoiseSchedule, table: EmbeddingTable, anneal_step: int,
                      positions: Optional[Tensor] = None,
                      key_mask: Optional[Tensor] = None) -> DenoiserOutput:
    """Run the self-conditioning recurrence y_{i+1} = x_hat'(z_t, y_i) as the mode requires.

    train: one pass with probability 0.75, otherwise two with the inner pass
           run without gradients; eval: always two passes; sample: one pass on prev.
    """
    if mode not in MODES:
        raise ArgumentError(f"unknown mode {mode!r}; expected one of {MODES}")

    def one_pass(y: Optional[Tensor]) -> DenoiserOutput:
        logits = denoise_logits(model, z, y, schedule, table, anneal_step,
                                positions=positions, key_mask=key_mask)
        return DenoiserOutput(logits=logits, x_hat=logits_to_xhat(logits, table))

    zeros = torch.zeros_like(z.z)
    if mode == "sample":
        if prev is None:
            raise ArgumentError("sample mode needs the previous estimate (zeros on the first step)")
        return one_pass(prev.detach() if model.config.self_cond else zeros)
    if not model.config.self_cond:
        return one_pass(zeros)

    if mode == "eval":
        unroll = True
    else:
        unroll = bool(torch.rand((), generator=generator) < TWO_PASS_PROB)
    if not unroll:
        return one_pass(zeros)
    with torch.no_grad():
        inner = one_pass(zeros)
    return one_pass(inner.x_hat.detach())
