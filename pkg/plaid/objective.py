"""Continuous-time likelihood bound, its minibatch estimator and held-out evaluation.

-log p(x) <= KL(q(z_1|x) || p(z_1)) + E[-log p(x|z_0)] + L_inf, with
L_inf = -1/2 E_t[SNR'(t) ||x_emb - x_hat(z_t)||^2]. Every term is reported in
nats per sequence.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor

from logging_service import get_logger

from .denoiser import Denoiser, gaussian_prior_logits, self_cond_forward
from .diffusion_core import (
    NoiseSchedule,
    posterior_params,
    prior_kl,
    sample_latent,
    sigma2,
    snr_prime,
)
from .embedding import EmbeddingTable, check_tokens, embed
from .errors import InputError, SizeError

logger = get_logger('plaid.objective')

TERMS = ("diffusion", "recon")


@dataclass
class VlbEstimate:
    """One Monte-Carlo estimate of -VLB, per sequence, in nats."""

    prior_kl: float
    recon: float
    diffusion: float
    total: float
    n_diff: int
    n_recon: int
    loss: Tensor = field(repr=False)                # differentiable total
    diffusion_samples: Tensor = field(repr=False)   # per-example diffusion losses (differentiable)

    def terms(self) -> Dict[str, float]:
        return {
            'total': self.total,
            'prior_kl': self.prior_kl,
            'diffusion': self.diffusion,
            'recon': self.recon,
            'n_diff': self.n_diff,
            'n_recon': self.n_recon,
        }


@dataclass
class MomentTracker:
    """Exponential moving first/second moments of the per-example diffusion and recon terms."""

    decay: float = 0.99
    warmup_steps: int = 100
    m1: Dict[str, float] = field(default_factory=lambda: {name: 0.0 for name in TERMS})
    m2: Dict[str, float] = field(default_factory=lambda: {name: 0.0 for name in TERMS})
    counts: Dict[str, int] = field(default_factory=lambda: {name: 0 for name in TERMS})
    steps: int = 0

    def update(self, diffusion: Tensor, recon: Tensor) -> None:
        for name, values in (("diffusion", diffusion), ("recon", recon)):
            if values.numel() == 0:
                continue
            v = values.detach().to(torch.float64)
            x1, x2 = float(v.mean()), float(v.pow(2).mean())
            if self.counts[name] == 0:
                self.m1[name], self.m2[name] = x1, x2
            else:
                self.m1[name] = self.decay * self.m1[name] + (1.0 - self.decay) * x1
                self.m2[name] = self.decay * self.m2[name] + (1.0 - self.decay) * x2
            self.counts[name] += 1
        self.steps += 1

    def variance(self, name: str) -> float:
        return max(self.m2[name] - self.m1[name] ** 2, 0.0)

    def split(self, batch: int) -> Tuple[int, int]:
        if self.steps < self.warmup_steps:
            return allocate_split(1.0, 1.0, batch)
        return allocate_split(self.variance("diffusion"), self.variance("recon"), batch)

    def state_dict(self) -> Dict:
        return asdict(self)

    def load_state_dict(self, state: Dict) -> None:
        self.decay = float(state["decay"])
        self.warmup_steps = int(state["warmup_steps"])
        self.m1 = {k: float(v) for k, v in state["m1"].items()}
        self.m2 = {k: float(v) for k, v in state["m2"].items()}
        self.counts = {k: int(v) for k, v in state["counts"].items()}
        self.steps = int(state["steps"])


@dataclass
class EvalReport:
    dataset: str
    sequences: int
    tokens: int
    nats_per_token: float
    bpc: float
    ppl: float
    mc_draws: int
    seed: Optional[int]
    prior_kl: float = 0.0     # per token
    recon: float = 0.0        # per token
    diffusion: float = 0.0    # per token

    def to_record(self) -> Dict:
        record = asdict(self)
        record["BPC"] = record.pop("bpc")
        record["PPL"] = record.pop("ppl")
        return record


# ============================================================================
# Term-level operations
# ============================================================================
def length_mask(lengths: Optional[Tensor], seq_len: int) -> Optional[Tensor]:
    """(B,) lengths -> (B, L) bool mask of valid positions (None means all valid)."""
    if lengths is None:
        return None
    positions = torch.arange(seq_len, device=lengths.device)
    return positions[None, :] < lengths[:, None]


def diffusion_loss(x_embed: Tensor, x_hat: Tensor, t, schedule: NoiseSchedule,
                   mask: Optional[Tensor] = None) -> Tensor:
    """-1/2 SNR'(t) ||x_embed - x_hat||^2, summed over (L, d); one value per example."""
    sq = (x_embed - x_hat).pow(2).sum(-1)
    if mask is not None:
        sq = sq * mask.to(sq.dtype)
    return -0.5 * snr_prime(schedule, t) * sq.sum(-1)


def reconstruction_loss(logits_at_z0: Tensor, tokens: Tensor,
                        mask: Optional[Tensor] = None) -> Tensor:
    """sum_i -log softmax(logits_i)[x_i]; one value per example."""
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    check_tokens(tokens, logits_at_z0.shape[-1])
    logp = F.log_softmax(logits_at_z0, dim=-1)
    nll = -logp.gather(-1, tokens.unsqueeze(-1)).squeeze(-1)
    if mask is not None:
        nll = nll * mask.to(nll.dtype)
    return nll.sum(-1)


def allocate_split(var_diff: float, var_recon: float, batch: int) -> Tuple[int, int]:
    """Split a batch between the two terms in the ratio sqrt(var_diff) : sqrt(var_recon).

    The rounded ratio is kept unless its other integer neighbour gives a strictly
    smaller estimator variance var_diff / n_diff + var_recon / n_recon.
    """
    if batch < 2:
        raise SizeError(f"cannot split a batch of {batch} between two terms")
    vd, vr = max(var_diff, 0.0), max(var_recon, 0.0)
    sd, sr = math.sqrt(vd), math.sqrt(vr)
    frac = 0.5 if sd + sr == 0.0 else sd / (sd + sr)
    n_diff = int(math.floor(batch * frac + 0.5))
    n_diff = min(max(n_diff, 1), batch - 1)

    def cost(n: int) -> float:
        return vd / n + vr / (batch - n)

    for other in (n_diff - 1, n_diff + 1):
        if 1 <= other <= batch - 1 and cost(other) < cost(n_diff):
            n_diff = other
            break
    return n_diff, batch - n_diff


def schedule_interior_loss(diffusion_samples: Union[Tensor, Sequence[float]]) -> Tensor:
    """Mean of squared per-example diffusion losses.

    E[L] does not depend on the interior of the schedule, so descending on
    E[L^2] w.r.t. the interior parameters descends on Var[L].
    """
    samples = torch.as_tensor(diffusion_samples) if not isinstance(diffusion_samples, Tensor) \
        else diffusion_samples
    if samples.numel() < 2:
        raise SizeError(f"need at least 2 diffusion samples, got {samples.numel()}")
    return samples.pow(2).mean()


def _diffusion_term(x: Tensor, t: Tensor, model: Denoiser, schedule: NoiseSchedule,
                    table: EmbeddingTable, mode: str, generator, anneal_step: int,
                    mask: Optional[Tensor]) -> Tensor:
    z_t = sample_latent(x, t, schedule, generator=generator)
    out = self_cond_forward(model, z_t, mode, None, generator, schedule=schedule, table=table,
                            anneal_step=anneal_step, key_mask=mask)
    return diffusion_loss(x, out.x_hat, z_t.t, schedule, mask)


def _recon_term(x: Tensor, tokens: Tensor, model: Denoiser, schedule: NoiseSchedule,
                table: EmbeddingTable, mode: str, generator, anneal_step: int,
                mask: Optional[Tensor]) -> Tensor:
    t0 = torch.zeros(x.shape[0], dtype=schedule.dtype)
    z_0 = sample_latent(x, t0, schedule, generator=generator)
    if model.config.learned_likelihood:
        logits = self_cond_forward(model, z_0, mode, None, generator, schedule=schedule,
                                   table=table, anneal_step=anneal_step, key_mask=mask).logits
    else:
        logits = gaussian_prior_logits(z_0.z, table, sigma2(schedule, t0))
    return reconstruction_loss(logits, tokens, mask)


def _as_batch(tokens) -> Tensor:
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    if tokens.numel() == 0:
        raise InputError("empty batch")
    return tokens


# ============================================================================
# Estimators
# ============================================================================
def vlb_estimate(tokens, model: Denoiser, schedule: NoiseSchedule, table: EmbeddingTable,
                 tracker: Optional[MomentTracker] = None,
                 generator: Optional[torch.Generator] = None,
                 anneal_step: int = 0, *,
                 lengths: Optional[Tensor] = None,
                 mode: str = "train") -> VlbEstimate:
    """Minibatch estimate of -VLB.

    The prior KL is exact over the whole batch. With the learned conditional
    likelihood the batch is split: the first n_diff examples estimate the
    diffusion term (one t ~ U[0,1] each), the rest the reconstruction term.
    A batch of one example feeds both terms.
    """
    tokens = _as_batch(tokens)
    B, L = tokens.shape
    mask = length_mask(lengths, L)
    x = embed(tokens, table)
    kl = prior_kl(x, schedule, mask)

    if model.config.learned_likelihood and B >= 2:
        n_diff, n_recon = tracker.split(B) if tracker is not None else allocate_split(1.0, 1.0, B)
        diff_rows, recon_rows = slice(0, n_diff), slice(n_diff, B)
    else:
        n_diff = n_recon = B
        diff_rows = recon_rows = slice(0, B)

    def rows(m: Optional[Tensor], sl: slice) -> Optional[Tensor]:
        return None if m is None else m[sl]

    t = torch.rand(n_diff, generator=generator, dtype=schedule.dtype)
    diff = _diffusion_term(x[diff_rows], t, model, schedule, table, mode, generator,
                           anneal_step, rows(mask, diff_rows))
    recon = _recon_term(x[recon_rows], tokens[recon_rows], model, schedule, table, mode,
                        generator, anneal_step, rows(mask, recon_rows))

    if tracker is not None and mode == "train":
        tracker.update(diff.detach(), recon.detach())

    kl_m, recon_m, diff_m = kl.mean(), recon.mean(), diff.mean()
    loss = kl_m + recon_m + diff_m
    kl_v, recon_v, diff_v = (v.detach().item() for v in (kl_m, recon_m, diff_m))
    return VlbEstimate(
        prior_kl=kl_v, recon=recon_v, diffusion=diff_v,
        total=kl_v + recon_v + diff_v,
        n_diff=n_diff, n_recon=n_recon, loss=loss, diffusion_samples=diff,
    )


def stratified_times(n: int, generator: Optional[torch.Generator] = None,
                     dtype: torch.dtype = torch.float64) -> Tensor:
    """One jittered time per stratum: t_k = (k + u_k) / n."""
    u = torch.rand(n, generator=generator, dtype=dtype)
    return (torch.arange(n, dtype=dtype) + u) / n


@torch.no_grad()
def vlb_samples(sequence, model: Denoiser, schedule: NoiseSchedule, table: EmbeddingTable,
                draws: int, generator: Optional[torch.Generator] = None, *,
                anneal_step: int = 0, mode: str = "eval",
                chunk: int = 4096) -> Tensor:
    """Per-draw continuous-time estimates of -VLB for one sequence (stratified t)."""
    tokens = _as_batch(sequence)[0]
    t_all = stratified_times(draws, generator, schedule.dtype)
    out = []
    for start in range(0, draws, chunk):
        t = t_all[start:start + chunk]
        batch = tokens.unsqueeze(0).expand(t.shape[0], -1)
        x = embed(batch, table)
        kl = prior_kl(x, schedule)
        diff = _diffusion_term(x, t, model, schedule, table, mode, generator, anneal_step, None)
        recon = _recon_term(x, batch, model, schedule, table, mode, generator, anneal_step, None)
        out.append(kl + recon + diff)
    return torch.cat(out)


@torch.no_grad()
def discrete_vlb_samples(sequence, model: Denoiser, schedule: NoiseSchedule,
                         table: EmbeddingTable, T: int, draws: int,
                         generator: Optional[torch.Generator] = None, *,
                         anneal_step: int = 0, mode: str = "eval",
                         chunk: int = 4096) -> Tensor:
    """Per-draw estimates of the bound with a finite-T diffusion term L_T.

    L_T = sum_i E[KL(q(z_s|z_t,x) || q(z_s|z_t,x_hat))], s=(i-1)/T, t=i/T,
    estimated as T times the KL at a stratified step index per draw.
    """
    if T < 1:
        raise SizeError(f"T must be >= 1, got {T}")
    tokens = _as_batch(sequence)[0]
    u = stratified_times(draws, generator, schedule.dtype)
    steps = torch.clamp(torch.floor(u * T), max=T - 1) + 1
    out = []
    for start in range(0, draws, chunk):
        i = steps[start:start + chunk]
        t, s = i / T, (i - 1) / T
        batch = tokens.unsqueeze(0).expand(i.shape[0], -1)
        x = embed(batch, table)
        kl = prior_kl(x, schedule)
        z_t = sample_latent(x, t, schedule, generator=generator)
        x_hat = self_cond_forward(model, z_t, mode, None, generator, schedule=schedule,
                                  table=table, anneal_step=anneal_step).x_hat
        mean_q, var = posterior_params(z_t, x, s, t, schedule)
        mean_p, _ = posterior_params(z_t, x_hat, s, t, schedule)
        step_kl = (mean_q - mean_p).pow(2).sum((-1, -2)) / (2.0 * var)
        recon = _recon_term(x, batch, model, schedule, table, mode, generator, anneal_step, None)
        out.append(kl + recon + T * step_kl)
    return torch.cat(out)


def discrete_vlb(sequence, model: Denoiser, schedule: NoiseSchedule, table: EmbeddingTable,
                 T: int, draws: int = 1024, generator: Optional[torch.Generator] = None, *,
                 anneal_step: int = 0, mode: str = "eval") -> float:
    """Finite-T bound in nats for one sequence; an oracle for the continuous estimator."""
    return float(discrete_vlb_samples(sequence, model, schedule, table, T, draws, generator,
                                      anneal_step=anneal_step, mode=mode).mean())


# ============================================================================
# Held-out evaluation
# ============================================================================
def bits_per_char(nats_per_char: float) -> float:
    return nats_per_char / math.log(2.0)


def perplexity(nats_per_token: float) -> float:
    return math.exp(nats_per_token)


@torch.no_grad()
def eval_nll(model: Denoiser, schedule: NoiseSchedule, table: EmbeddingTable,
             dataset: Tensor, mc_draws: int = 1,
             generator: Optional[torch.Generator] = None, *,
             anneal_step: int = 0,
             batch_size: int = 32,
             token_chars: Optional[Tensor] = None,
             dataset_name: str = "validation",
             seed: Optional[int] = None) -> EvalReport:
    """Average the bound over every sequence and mc_draws stratified t-draws.

    Self-conditioning always unrolls to two passes. token_chars[v] is the number
    of characters token v decodes to (1 for every token when omitted).
    """
    data = torch.as_tensor(dataset, dtype=torch.long)
    if data.dim() != 2 or data.shape[0] == 0:
        raise InputError("evaluation dataset is empty")
    if mc_draws < 1:
        raise SizeError(f"mc_draws must be >= 1, got {mc_draws}")
    was_training = model.training
    model.eval()

    N, L = data.shape
    sums = {"prior_kl": 0.0, "recon": 0.0, "diffusion": 0.0}
    for k in range(mc_draws):
        for start in range(0, N, batch_size):
            batch = data[start:start + batch_size]
            u = torch.rand(batch.shape[0], generator=generator, dtype=schedule.dtype)
            t = (k + u) / mc_draws
            x = embed(batch, table)
            sums["prior_kl"] += float(prior_kl(x, schedule).sum())
            sums["diffusion"] += float(_diffusion_term(
                x, t, model, schedule, table, "eval", generator, anneal_step, None).sum())
            sums["recon"] += float(_recon_term(
                x, batch, model, schedule, table, "eval", generator, anneal_step, None).sum())
    model.train(was_training)

    n_tokens = N * L
    total = sum(sums.values()) / mc_draws
    if token_chars is None:
        n_chars = n_tokens
    else:
        n_chars = int(torch.as_tensor(token_chars)[data].sum())
    nats_per_token = total / n_tokens
    report = EvalReport(
        dataset=dataset_name, sequences=N, tokens=n_tokens,
        nats_per_token=nats_per_token,
        bpc=bits_per_char(total / max(n_chars, 1)),
        ppl=perplexity(nats_per_token),
        mc_draws=mc_draws, seed=seed,
        prior_kl=sums["prior_kl"] / mc_draws / n_tokens,
        recon=sums["recon"] / mc_draws / n_tokens,
        diffusion=sums["diffusion"] / mc_draws / n_tokens,
    )
    logger.info(f"eval {dataset_name}: {N} seqs, {nats_per_token:.4f} nats/token, "
                f"BPC {report.bpc:.4f}, PPL {report.ppl:.2f}")
    return report
