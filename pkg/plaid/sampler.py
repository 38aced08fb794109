"""Ancestral sampling with score temperature and token guidance.

Sampling starts from z_1 ~ N(0, sigma^2(1) I) and takes T reverse steps
z_s ~ q(z_s | z_t, x = x_hat), s = t - 1/T. The denoiser is conditioned on the
previous step's estimate. Tokens come from the argmax of one final call at
the t = 0 level.

Token guidance uses the denoiser's own token posteriors as the classifier:
span terms score the joint probability of fixed tokens, lexical terms the
unigram probability of a token anywhere, and negated terms the complement.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import torch
from torch import Tensor
from tqdm import tqdm

from logging_service import get_logger

from .denoiser import Denoiser, self_cond_forward
from .diffusion_core import Latent, NoiseSchedule, broadcast_to_data, posterior_params, sigma2
from .embedding import EmbeddingTable
from .errors import ConfigError, DomainError, GuidanceError, SpecError

logger = get_logger('plaid.sampler')

GUIDANCE_EPS = 1e-12
TERM_KINDS = ("span", "lexical")


@dataclass
class SamplerConfig:
    T: int = 4096
    tau: float = 0.9
    seq_len: int = 256
    seed: int = 0
    guidance_weight: float = 0.0
    num_samples: int = 1

    def validate(self) -> "SamplerConfig":
        problems = []
        if self.T < 1:
            problems.append(f"T must be >= 1 (got {self.T})")
        if not 0.0 < self.tau <= 1.0:
            problems.append(f"tau must lie in (0, 1] (got {self.tau})")
        if self.seq_len < 1:
            problems.append(f"seq_len must be >= 1 (got {self.seq_len})")
        if not math.isfinite(self.guidance_weight) or self.guidance_weight < 0:
            problems.append(f"guidance_weight must be finite and >= 0 (got {self.guidance_weight})")
        if self.num_samples < 1:
            problems.append(f"num_samples must be >= 1 (got {self.num_samples})")
        if problems:
            raise ConfigError("invalid sampler config: " + "; ".join(problems), problems)
        return self


@dataclass
class GuidanceTerm:
    """span: tokens pinned at [start, end); lexical: tokens[0] somewhere in the sequence."""

    kind: str
    tokens: Tuple[int, ...]
    start: int = 0
    end: Optional[int] = None
    weight: float = 1.0
    negated: bool = False

    @classmethod
    def span(cls, start: int, tokens: Sequence[int], weight: float = 1.0,
             negated: bool = False) -> "GuidanceTerm":
        tokens = tuple(int(v) for v in tokens)
        return cls("span", tokens, start, start + len(tokens), weight, negated)

    @classmethod
    def lexical(cls, token: int, weight: float = 1.0, negated: bool = False) -> "GuidanceTerm":
        return cls("lexical", (int(token),), 0, None, weight, negated)


@dataclass
class GuidanceSpec:
    terms: List[GuidanceTerm] = field(default_factory=list)

    def validate(self, seq_len: int, vocab_size: int) -> "GuidanceSpec":
        covered = set()
        for term in self.terms:
            if term.kind not in TERM_KINDS:
                raise SpecError(f"unknown guidance term kind {term.kind!r}")
            if not math.isfinite(term.weight):
                raise SpecError(f"guidance weight must be finite, got {term.weight}")
            if not term.tokens:
                raise SpecError(f"{term.kind} term has no tokens")
            if any(v < 0 or v >= vocab_size for v in term.tokens):
                raise SpecError(f"{term.kind} term token outside [0, {vocab_size}): {list(term.tokens)}")
            if term.kind == "lexical":
                if len(term.tokens) != 1:
                    raise SpecError(f"lexical term takes exactly one token, got {len(term.tokens)}")
                continue
            end = term.start + len(term.tokens) if term.end is None else term.end
            if not 0 <= term.start < end <= seq_len:
                raise SpecError(f"span [{term.start}, {end}) outside [0, {seq_len})")
            if end - term.start != len(term.tokens):
                raise SpecError(f"span [{term.start}, {end}) does not match {len(term.tokens)} tokens")
            positions = set(range(term.start, end))
            if covered & positions:
                raise SpecError(f"span [{term.start}, {end}) overlaps another span")
            covered |= positions
        return self

    @property
    def empty(self) -> bool:
        return not self.terms

    def to_dict(self) -> Dict[str, Any]:
        return {"terms": [dict(asdict(t), tokens=list(t.tokens)) for t in self.terms]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GuidanceSpec":
        terms = []
        for raw in data.get("terms", []):
            raw = dict(raw)
            raw["tokens"] = tuple(int(v) for v in raw.get("tokens", ()))
            try:
                terms.append(GuidanceTerm(**raw))
            except TypeError as exc:
                raise SpecError(f"malformed guidance term {raw}: {exc}") from exc
        return cls(terms)


# ============================================================================
# Temperature and guidance
# ============================================================================
def apply_score_temperature(x_hat: Tensor, z: Tensor, tau: float) -> Tensor:
    """x_hat + ((1 - tau) / tau) * (x_hat - z)."""
    if not tau > 0.0:
        raise DomainError(f"score temperature must be > 0, got {tau}")
    if tau == 1.0:
        return x_hat
    return x_hat + ((1.0 - tau) / tau) * (x_hat - z)


def _clamp(p: Tensor) -> Tensor:
    return p.clamp(GUIDANCE_EPS, 1.0 - GUIDANCE_EPS)


def guidance_logprob(spec: Optional[GuidanceSpec], logits: Tensor) -> Tensor:
    """Weighted sum of term log-probabilities under softmax(logits); one value per example."""
    batch_shape = logits.shape[:-2]
    total = torch.zeros(batch_shape, dtype=logits.dtype, device=logits.device)
    if spec is None or spec.empty:
        return total
    L, V = logits.shape[-2:]
    spec.validate(L, V)
    probs = torch.softmax(logits, dim=-1)
    for term in spec.terms:
        if term.kind == "span":
            end = term.start + len(term.tokens)
            ids = torch.tensor(term.tokens, dtype=torch.long, device=logits.device)
            window = probs[..., term.start:end, :]
            p_i = window.gather(-1, ids.expand(window.shape[:-1]).unsqueeze(-1)).squeeze(-1)
            log_p = torch.log(_clamp(p_i)).sum(-1)
            if term.negated:
                log_p = torch.log1p(-_clamp(torch.exp(log_p)))
        else:
            p = _clamp(probs[..., term.tokens[0]].mean(-1))
            log_p = torch.log1p(-p) if term.negated else torch.log(p)
        total = total + term.weight * log_p
    return total


def guided_xhat(x_hat: Tensor, z: Latent, logits: Tensor, schedule: NoiseSchedule,
                spec: Optional[GuidanceSpec], weight: float) -> Tensor:
    """x_hat + weight * sigma^2(t) * grad_z guidance_logprob(spec, logits(z)).

    `logits` must have been computed from `z.z` with gradients enabled.
    """
    if weight < 0:
        raise DomainError(f"guidance weight must be >= 0, got {weight}")
    if weight == 0.0 or spec is None or spec.empty:
        return x_hat
    with torch.enable_grad():
        objective = guidance_logprob(spec, logits).sum()
        (grad,) = torch.autograd.grad(objective, z.z)
    if not torch.isfinite(grad).all():
        raise GuidanceError("guidance gradient is not finite")
    s2 = broadcast_to_data(sigma2(schedule, z.t).detach(), grad)
    return x_hat + weight * s2 * grad


# ============================================================================
# Sampling
# ============================================================================
@torch.no_grad()
def sample(model: Denoiser, schedule: NoiseSchedule, table: EmbeddingTable,
           config: SamplerConfig, spec: Optional[GuidanceSpec] = None, *,
           generator: Optional[torch.Generator] = None,
           anneal_step: int = 0,
           progress: bool = False) -> Tensor:
    """Draw config.num_samples token sequences of config.seq_len; (B, L) long tensor."""
    config.validate()
    guiding = spec is not None and not spec.empty and config.guidance_weight > 0.0
    if spec is not None:
        spec.validate(config.seq_len, table.vocab_size)
    if generator is None:
        generator = torch.Generator().manual_seed(config.seed)
    model.eval()

    B, L, d = config.num_samples, config.seq_len, table.embed_dim
    dtype = table.weight.dtype
    positions = torch.arange(L)
    ctx = dict(schedule=schedule, table=table, anneal_step=anneal_step, positions=positions)

    z = torch.sqrt(sigma2(schedule, 1.0)).to(dtype) * torch.randn(B, L, d, generator=generator, dtype=dtype)
    prev = torch.zeros_like(z)
    T = config.T
    for i in tqdm(range(T, 0, -1), total=T, desc="sampling", disable=not progress, leave=False):
        t = torch.full((B,), i / T, dtype=torch.float64)
        s = torch.full((B,), (i - 1) / T, dtype=torch.float64)
        if guiding:
            with torch.enable_grad():
                latent = Latent(z.detach().requires_grad_(True), t)
                out = self_cond_forward(model, latent, "sample", prev, **ctx)
                x_hat = apply_score_temperature(out.x_hat.detach(), z, config.tau)
                x_hat = guided_xhat(x_hat, latent, out.logits, schedule, spec, config.guidance_weight)
        else:
            out = self_cond_forward(model, Latent(z, t), "sample", prev, **ctx)
            x_hat = apply_score_temperature(out.x_hat, z, config.tau)
        prev = out.x_hat.detach()
        mean, var = posterior_params(z, x_hat.detach(), s, t, schedule)
        noise = torch.randn(z.shape, generator=generator, dtype=dtype)
        z = mean + torch.sqrt(broadcast_to_data(var, z)) * noise

    final = self_cond_forward(model, Latent(z, torch.zeros(B, dtype=torch.float64)), "sample",
                              prev, **ctx)
    return final.logits.argmax(-1)


def write_samples(path: Path, samples: Iterable[Dict[str, Any]], meta: Dict[str, Any]) -> Path:
    """One JSON document per line plus a `<name>.meta.json` sidecar; returns the sidecar path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in samples:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"wrote samples to {path} (meta {sidecar.name})")
    return sidecar


