"""Variance-exploding Gaussian forward process and its learned noise schedule.

The schedule is gamma(t) = log sigma^2(t) = gamma_0 + (gamma_1 - gamma_0) * F(t),
with F a monotone map of [0, 1] onto itself (F(0) = 0, F(1) = 1). Endpoints
are trained on the likelihood bound, the interior of F on the variance of its
Monte-Carlo estimate.

All math here runs in float64 unless the caller hands in another dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DomainError, OrderingError

TimeLike = Union[float, Tensor]

DEFAULT_GAMMA_0 = -3.0
DEFAULT_GAMMA_1 = 6.0


@dataclass
class Latent:
    """A noisy latent z_t together with the time it was drawn at."""

    z: Tensor   # (..., L, d)
    t: Tensor   # () or (B,)


def check_time(t: TimeLike) -> None:
    """Raise DomainError unless every entry of t lies in [0, 1]."""
    tt = torch.as_tensor(t)
    if torch.isnan(tt).any():
        raise DomainError("diffusion time is NaN")
    if ((tt < 0) | (tt > 1)).any():
        raise DomainError(f"diffusion time outside [0, 1]: {tt.tolist()}")


def broadcast_to_data(value: Tensor, data: Tensor) -> Tensor:
    """Right-pad a per-example value with singleton axes so it broadcasts over (L, d)."""
    extra = data.dim() - value.dim()
    if extra < 0:
        raise DomainError(f"cannot broadcast shape {tuple(value.shape)} over {tuple(data.shape)}")
    return value.reshape(value.shape + (1,) * extra)


# ============================================================================
# Interior maps F: [0, 1] -> [0, 1]
# ============================================================================
class PositiveLinear(nn.Module):
    """Linear layer whose weights pass through softplus, so it is monotone in every input."""

    def __init__(self, in_features: int, out_features: int, *,
                 generator: Optional[torch.Generator] = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.weight_raw = nn.Parameter(
            0.1 * torch.randn(out_features, in_features, generator=generator, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, F.softplus(self.weight_raw), self.bias)


class MonotoneInterior(nn.Module):
    """Small positive-weight network G, normalised to F(t) = (G(t) - G(0)) / (G(1) - G(0)).

    G(t) = l1(t) + l3(sigmoid(l2(l1(t)))) with every weight kept positive, so G
    and therefore F are strictly increasing and smooth.
    """

    def __init__(self, width: int = 16, *,
                 generator: Optional[torch.Generator] = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.l1 = PositiveLinear(1, 1, generator=generator, dtype=dtype)
        self.l2 = PositiveLinear(1, width, generator=generator, dtype=dtype)
        self.l3 = PositiveLinear(width, 1, generator=generator, dtype=dtype)

    def _g(self, t: Tensor) -> Tensor:
        h = self.l1(t)
        return h + self.l3(torch.sigmoid(self.l2(h)))

    def forward(self, t: Tensor) -> Tensor:
        flat = t.reshape(-1, 1)
        ends = torch.tensor([[0.0], [1.0]], dtype=flat.dtype, device=flat.device)
        g = self._g(torch.cat([flat, ends], dim=0)).squeeze(-1)
        g_t, g_0, g_1 = g[:-2], g[-2], g[-1]
        return ((g_t - g_0) / (g_1 - g_0)).reshape(t.shape)


class PowerInterior(nn.Module):
    """Fixed F(t) = t ** power (power 1 gives a linear gamma)."""

    def __init__(self, power: float = 1.0):
        super().__init__()
        if power <= 0:
            raise DomainError(f"power must be positive, got {power}")
        self.power = float(power)

    def forward(self, t: Tensor) -> Tensor:
        if self.power == 1.0:
            return t * 1.0
        return t ** self.power


# ============================================================================
# NoiseSchedule
# ============================================================================
class NoiseSchedule(nn.Module):
    """Learned monotone sigma^2(t) with trainable endpoints gamma_0 = log sigma^2(0), gamma_1 = log sigma^2(1)."""

    def __init__(self, gamma_0: float = DEFAULT_GAMMA_0, gamma_1: float = DEFAULT_GAMMA_1, *,
                 interior: Optional[nn.Module] = None,
                 interior_width: int = 16,
                 generator: Optional[torch.Generator] = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.gamma_0 = nn.Parameter(torch.tensor(float(gamma_0), dtype=dtype))
        self.gamma_1 = nn.Parameter(torch.tensor(float(gamma_1), dtype=dtype))
        if interior is None:
            interior = MonotoneInterior(interior_width, generator=generator, dtype=dtype)
        self.interior = interior

    @classmethod
    def fixed(cls, gamma_0: float, gamma_1: float, power: float = 1.0,
              dtype: torch.dtype = torch.float64) -> "NoiseSchedule":
        """A frozen schedule with F(t) = t ** power; nothing in it trains."""
        schedule = cls(gamma_0, gamma_1, interior=PowerInterior(power), dtype=dtype)
        schedule.requires_grad_(False)
        return schedule

    @property
    def dtype(self) -> torch.dtype:
        return self.gamma_0.dtype

    def endpoint_parameters(self):
        return [self.gamma_0, self.gamma_1]

    def interior_parameters(self):
        return list(self.interior.parameters())

    def _time(self, t: TimeLike) -> Tensor:
        check_time(t)
        return torch.as_tensor(t, dtype=self.dtype, device=self.gamma_0.device)

    def gamma(self, t: TimeLike) -> Tensor:
        tt = self._time(t)
        return self.gamma_0 + (self.gamma_1 - self.gamma_0) * self.interior(tt)

    def gamma_and_derivative(self, t: TimeLike) -> Tuple[Tensor, Tensor]:
        """gamma(t) and d gamma / dt, differentiable w.r.t. the schedule parameters when grad is on."""
        tt = self._time(t)
        keep_graph = torch.is_grad_enabled()
        with torch.enable_grad():
            t_var = tt.detach().clone().requires_grad_(True)
            f = self.interior(t_var)
            (df,) = torch.autograd.grad(f.sum(), t_var, create_graph=keep_graph)
            span = self.gamma_1 - self.gamma_0
            gamma = self.gamma_0 + span * f
            dgamma = span * df
        if not keep_graph:
            gamma, dgamma = gamma.detach(), dgamma.detach()
        return gamma, dgamma


# ============================================================================
# Operations
# ============================================================================
def sigma2(schedule: NoiseSchedule, t: TimeLike) -> Tensor:
    """Total noise variance added by time t: exp(gamma(t))."""
    return torch.exp(schedule.gamma(t))


def snr_prime(schedule: NoiseSchedule, t: TimeLike) -> Tensor:
    """d/dt (1 / sigma^2(t)) = -gamma'(t) * exp(-gamma(t)); <= 0 for monotone schedules.

    Defined on the closed interval: at t = 0 and t = 1 the one-sided derivative
    of the interior map is used (uniform and stratified draws can land on 0).
    """
    gamma, dgamma = schedule.gamma_and_derivative(t)
    return -dgamma * torch.exp(-gamma)


def sample_latent(x_embed: Tensor, t: TimeLike, schedule: NoiseSchedule, *,
                  generator: Optional[torch.Generator] = None,
                  noise: Optional[Tensor] = None) -> Latent:
    """Draw z_t ~ q(z_t | x) = N(x_embed, sigma^2(t) I)."""
    tt = schedule._time(t)
    s2 = broadcast_to_data(sigma2(schedule, tt), x_embed)
    if noise is None:
        noise = torch.randn(x_embed.shape, generator=generator,
                            dtype=x_embed.dtype, device=x_embed.device)
    return Latent(z=x_embed + torch.sqrt(s2) * noise, t=tt)


def gaussian_posterior(z_t: Tensor, x_hat: Tensor,
                       gamma_s: Tensor, gamma_t: Tensor) -> Tuple[Tensor, Tensor]:
    """Mean and variance of q(z_s | z_t, x = x_hat) given log-variances at s and t."""
    ratio = torch.exp(gamma_s - gamma_t)
    var = torch.exp(gamma_s) * -torch.expm1(gamma_s - gamma_t)
    mean = x_hat + broadcast_to_data(ratio, z_t) * (z_t - x_hat)
    return mean, var


def posterior_params(z_t: Union[Latent, Tensor], x_hat: Tensor, s: TimeLike, t: TimeLike,
                     schedule: NoiseSchedule) -> Tuple[Tensor, Tensor]:
    """Reverse-step Gaussian: mean = x_hat + r (z_t - x_hat), var = sigma^2(s) (1 - r), r = sigma^2(s)/sigma^2(t)."""
    z = z_t.z if isinstance(z_t, Latent) else z_t
    ss, tt = schedule._time(s), schedule._time(t)
    if (ss >= tt).any():
        raise OrderingError(f"posterior needs s < t, got s={ss.tolist()} t={tt.tolist()}")
    return gaussian_posterior(z, x_hat, schedule.gamma(ss), schedule.gamma(tt))


def prior_kl(x_embed: Tensor, schedule: NoiseSchedule, mask: Optional[Tensor] = None) -> Tensor:
    """KL(q(z_1|x) || N(0, sigma^2(1) I)) = ||x||^2 / (2 sigma^2(1)), summed over (L, d)."""
    sq = x_embed.pow(2).sum(-1)
    if mask is not None:
        sq = sq * mask.to(sq.dtype)
    return sq.sum(-1) / (2.0 * sigma2(schedule, 1.0))
