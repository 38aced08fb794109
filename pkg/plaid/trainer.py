"""Optimisation loop: warmup/decay schedule, masked gradients, sequence truncation.

One step draws a minibatch estimate of the bound, sends its gradient to the
denoiser, the embedding table and the schedule endpoints, and sends the gradient
of the squared diffusion losses to the schedule interior only.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Tuple

import torch
from torch import Tensor

from logging_service import get_logger

from .denoiser import Denoiser, DenoiserConfig
from .diffusion_core import NoiseSchedule
from .embedding import EmbeddingTable
from .errors import ConfigError, DomainError, TrainingError
from .objective import MomentTracker, schedule_interior_loss, vlb_estimate

logger = get_logger('plaid.trainer')


@dataclass
class TrainConfig:
    base_lr: float = 1.4e-3
    warmup_steps: int = 2500
    total_steps: int = 10000
    batch_size: int = 64
    seq_len: int = 256
    truncate_frac: float = 0.03
    seed: int = 0
    wd_coeff: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0       # 0 disables clipping
    log_every: int = 100
    eval_every: int = 0          # 0 disables periodic evaluation
    checkpoint_every: int = 0    # 0 keeps only the final checkpoint

    def validate(self) -> "TrainConfig":
        problems = []
        if self.total_steps < 0:
            problems.append(f"total_steps must be >= 0 (got {self.total_steps})")
        if not 0 <= self.warmup_steps <= self.total_steps:
            problems.append(
                f"warmup_steps must lie in [0, total_steps] (got {self.warmup_steps} / {self.total_steps})")
        if not 0.0 <= self.truncate_frac <= 1.0:
            problems.append(f"truncate_frac must lie in [0, 1] (got {self.truncate_frac})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.seq_len < 1:
            problems.append(f"seq_len must be >= 1 (got {self.seq_len})")
        if self.base_lr < 0 or self.wd_coeff < 0 or self.grad_clip < 0:
            problems.append("base_lr, wd_coeff and grad_clip must be nonnegative")
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems), problems)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TruncatedBatch:
    tokens: Tensor      # (B, L) unchanged token ids
    lengths: Tensor     # (B,) valid prefix length per example
    truncated: Tensor   # (B,) bool, which examples were shortened


@dataclass
class TrainState:
    """Everything a resumed run needs to continue on the identical trajectory."""

    model: Denoiser
    schedule: NoiseSchedule
    table: EmbeddingTable
    optimizer: torch.optim.Optimizer
    tracker: MomentTracker
    generator: torch.Generator
    config: TrainConfig
    step: int = 0
    group_names: List[str] = field(default_factory=list)

    @property
    def anneal_step(self) -> int:
        return self.step


# ============================================================================
# Schedules
# ============================================================================
def lr_ramp(step: int, config: TrainConfig) -> float:
    """Piecewise-linear factor: 0 -> 1 over warmup, then 1 -> 0 at total_steps."""
    if step < 0 or step > config.total_steps:
        raise DomainError(f"step {step} outside [0, {config.total_steps}]")
    if step >= config.total_steps:
        return 0.0
    if step < config.warmup_steps:
        return step / config.warmup_steps
    return (config.total_steps - step) / (config.total_steps - config.warmup_steps)


def lr_wd_schedule(step: int, config: TrainConfig) -> Tuple[float, float]:
    """(lr, wd) at a step. Peak wd is wd_coeff / base_lr so that lr * wd = wd_coeff at peak."""
    ramp = lr_ramp(step, config)
    lr = config.base_lr * ramp
    if lr == 0.0:
        return 0.0, 0.0
    return lr, (config.wd_coeff / config.base_lr) * ramp


def truncate_batch(batch: Tensor, frac: float,
                   generator: Optional[torch.Generator] = None) -> TruncatedBatch:
    """Shorten each example with probability frac to a length uniform on [1, L]."""
    if not 0.0 <= frac <= 1.0:
        raise DomainError(f"truncate_frac must lie in [0, 1], got {frac}")
    tokens = torch.as_tensor(batch, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    B, L = tokens.shape
    selected = torch.rand(B, generator=generator) < frac
    drawn = torch.randint(1, L + 1, (B,), generator=generator)
    lengths = torch.where(selected, drawn, torch.full_like(drawn, L))
    return TruncatedBatch(tokens=tokens, lengths=lengths, truncated=selected)


# ============================================================================
# State construction
# ============================================================================
def build_train_state(model_config: DenoiserConfig, config: TrainConfig) -> TrainState:
    """Fresh model, table, schedule and optimizer, all initialised from config.seed."""
    model_config.validate()
    config.validate()
    generator = torch.Generator().manual_seed(config.seed)
    dtype = model_config.torch_dtype

    table = EmbeddingTable(model_config.vocab_size, model_config.embed_dim,
                           generator=generator, dtype=dtype)
    if model_config.learn_schedule:
        schedule = NoiseSchedule(model_config.gamma_0, model_config.gamma_1,
                                 interior_width=model_config.interior_width,
                                 generator=generator, dtype=torch.float64)
    else:
        schedule = NoiseSchedule.fixed(model_config.gamma_0, model_config.gamma_1)
    model = Denoiser(model_config, generator=generator)
    if not model_config.learn_embeddings:
        table.requires_grad_(False)

    optimizer, names = build_optimizer(model, table, schedule, config)
    logger.info(f"built model: {model.non_embedding_parameters():,} non-embedding params, "
                f"V={model_config.vocab_size}, depth={model_config.depth}, width={model_config.width}")
    return TrainState(model=model, schedule=schedule, table=table, optimizer=optimizer,
                      tracker=MomentTracker(), generator=generator, config=config,
                      group_names=names)


def build_optimizer(model: Denoiser, table: EmbeddingTable, schedule: NoiseSchedule,
                    config: TrainConfig) -> Tuple[torch.optim.Optimizer, List[str]]:
    """AdamW with matrices (and the embedding table) decayed; biases, norms and the schedule not."""
    decay = [p for _, p in model.named_parameters() if p.requires_grad and p.dim() >= 2]
    no_decay = [p for _, p in model.named_parameters() if p.requires_grad and p.dim() < 2]
    if table.weight.requires_grad:
        decay.append(table.weight)
    sched = [p for p in schedule.parameters() if p.requires_grad]

    groups, names = [], []
    for name, params in (("decay", decay), ("no_decay", no_decay), ("schedule", sched)):
        if params:
            groups.append({"params": params, "weight_decay": 0.0, "name": name})
            names.append(name)
    optimizer = torch.optim.AdamW(groups, lr=0.0, betas=(config.beta1, config.beta2),
                                  eps=config.eps, foreach=False)
    return optimizer, names


def _main_parameters(state: TrainState) -> List[Tensor]:
    params = [p for p in state.model.parameters() if p.requires_grad]
    if state.table.weight.requires_grad:
        params.append(state.table.weight)
    params.extend(p for p in state.schedule.endpoint_parameters() if p.requires_grad)
    return params


def _assign_grads(params: List[Tensor], grads) -> None:
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g


# ============================================================================
# Step
# ============================================================================
def train_step(state: TrainState, batch: Tensor) -> Tuple[TrainState, Dict[str, Any]]:
    """One optimizer update; deterministic given (state, batch)."""
    started = time.time()
    cfg = state.config
    step = state.step
    lr, wd = lr_wd_schedule(step, cfg)

    cut = truncate_batch(batch, cfg.truncate_frac, state.generator)
    state.model.train()
    est = vlb_estimate(cut.tokens, state.model, state.schedule, state.table, state.tracker,
                       state.generator, anneal_step=state.anneal_step,
                       lengths=cut.lengths if bool(cut.truncated.any()) else None,
                       mode="train")
    terms = est.terms()
    if not math.isfinite(est.total):
        raise TrainingError("non-finite training loss", step, terms)

    main = _main_parameters(state)
    interior = [p for p in state.schedule.interior_parameters() if p.requires_grad]
    interior_loss = None
    if interior and est.diffusion_samples.numel() >= 2:
        interior_loss = schedule_interior_loss(est.diffusion_samples)

    state.optimizer.zero_grad(set_to_none=True)
    grads = torch.autograd.grad(est.loss, main, retain_graph=interior_loss is not None,
                                allow_unused=True)
    _assign_grads(main, grads)
    if interior_loss is not None:
        _assign_grads(interior, torch.autograd.grad(interior_loss, interior, allow_unused=True))

    all_params = main + interior
    max_norm = cfg.grad_clip if cfg.grad_clip > 0 else float("inf")
    grad_norm = float(torch.nn.utils.clip_grad_norm_(all_params, max_norm))
    if not math.isfinite(grad_norm):
        raise TrainingError("non-finite gradient norm", step, terms)

    for group in state.optimizer.param_groups:
        group["lr"] = lr
        group["weight_decay"] = wd if group.get("name") == "decay" else 0.0
    state.optimizer.step()
    state.step += 1

    metrics = {
        "step": step,
        **terms,
        "interior_loss": None if interior_loss is None else interior_loss.detach().item(),
        "lr": lr,
        "wd": wd,
        "grad_norm": grad_norm,
        "truncated": int(cut.truncated.sum()),
        "wallclock": time.time() - started,
    }
    return state, metrics


def fit(state: TrainState, batches: Iterable[Tensor], *,
        steps: Optional[int] = None,
        on_metrics: Optional[Callable[[Dict[str, Any]], None]] = None,
        on_eval: Optional[Callable[[TrainState], Dict[str, Any]]] = None,
        on_checkpoint: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Run train_step until total_steps (or `steps` more updates), with periodic eval/checkpoint hooks."""
    cfg = state.config
    stop = cfg.total_steps if steps is None else min(cfg.total_steps, state.step + steps)
    it: Iterator[Tensor] = iter(batches)
    logger.info(f"training from step {state.step} to {stop}")
    while state.step < stop:
        batch = next(it)
        state, metrics = train_step(state, batch)
        if on_metrics is not None:
            on_metrics(metrics)
        done = state.step
        if cfg.log_every and done % cfg.log_every == 0:
            logger.info(f"step {done}: total={metrics['total']:.4f} diffusion={metrics['diffusion']:.4f} "
                        f"recon={metrics['recon']:.4f} lr={metrics['lr']:.2e}")
        if on_eval is not None and cfg.eval_every and done % cfg.eval_every == 0:
            on_eval(state)
        if on_checkpoint is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 \
                and done != stop:
            on_checkpoint(state)
    if on_checkpoint is not None:
        on_checkpoint(state)
    return state
