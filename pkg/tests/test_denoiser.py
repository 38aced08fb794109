"""Tests for the denoiser network, output prior and self-conditioning."""

from __future__ import annotations

import pytest
import torch

from plaid.denoiser import (
    TWO_PASS_PROB,
    Denoiser,
    denoise_logits,
    gaussian_prior_logits,
    logits_to_xhat,
    output_prior_coefficient,
    self_cond_forward,
)
from plaid.diffusion_core import Latent, NoiseSchedule, sample_latent
from plaid.embedding import EmbeddingTable, embed
from plaid.errors import ArgumentError, ConfigError, ShapeError

from tests.conftest import TINY_VOCAB, tiny_model_config


def _parts(**kw):
    cfg = tiny_model_config(**kw)
    g = torch.Generator().manual_seed(0)
    table = EmbeddingTable(cfg.vocab_size, cfg.embed_dim, generator=g)
    model = Denoiser(cfg, generator=g)
    return model, table, NoiseSchedule.fixed(-3.0, 6.0)


def _latent(table, t: float = 0.5, batch: int = 2, length: int = 5, seed: int = 0) -> Latent:
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randint(0, table.vocab_size, (batch, length), generator=g)
    return sample_latent(embed(tokens, table), torch.full((batch,), t, dtype=torch.float64),
                         NoiseSchedule.fixed(-3.0, 6.0), generator=g)


# ============================================================================
# Config and network
# ============================================================================
class TestDenoiserNetwork:
    def test_logits_shape(self):
        model, table, _ = _parts()
        z = _latent(table)
        assert model(z.z, z.t).shape == (2, 5, TINY_VOCAB)

    def test_unbatched_input(self):
        model, table, _ = _parts()
        z = _latent(table, batch=1)
        assert model(z.z[0], z.t[:1]).shape == (5, TINY_VOCAB)

    def test_sequence_longer_than_max_len_rejected(self):
        model, table, _ = _parts()
        z = _latent(table, length=9)
        with pytest.raises(ShapeError):
            model(z.z, z.t)

    def test_width_must_divide_heads(self):
        with pytest.raises(ConfigError):
            tiny_model_config(width=9, heads=2).validate()

    def test_self_cond_off_narrows_input(self):
        model, _, _ = _parts(self_cond=False)
        assert model.input_proj.in_features == 4

    def test_bidirectional(self):
        model, table, _ = _parts()
        z = _latent(table, batch=1)
        base = model(z.z, z.t)
        bumped = z.z.clone()
        bumped[0, -1] += 1.0
        # changing the last position moves the first position's logits
        assert not torch.equal(model(bumped, z.t)[0, 0], base[0, 0])

    def test_same_seed_same_weights(self):
        a, _, _ = _parts()
        b, _, _ = _parts()
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_config_round_trip(self):
        cfg = tiny_model_config(self_cond=False)
        assert type(cfg).from_dict(cfg.to_dict()) == cfg


# ============================================================================
# Output prior
# ============================================================================
class TestOutputPrior:
    @pytest.mark.parametrize("step,expected", [(0, 0.0), (2500, 0.5), (5000, 1.0), (9000, 1.0)])
    def test_anneal(self, step, expected):
        assert output_prior_coefficient(step, 5000) == pytest.approx(expected)

    def test_zero_anneal_steps_is_always_on(self):
        assert output_prior_coefficient(0, 0) == 1.0

    def test_negative_step_rejected(self):
        with pytest.raises(ArgumentError):
            output_prior_coefficient(-1)

    def test_prior_logits_pick_the_nearest_row(self):
        _, table, _ = _parts()
        z = table.weight[[3, 0, 6]].unsqueeze(0) + 1e-3
        logits = gaussian_prior_logits(z, table, torch.tensor(0.01, dtype=torch.float64))
        assert logits.argmax(-1).tolist() == [[3, 0, 6]]

    def test_no_prior_before_annealing_starts(self):
        model, table, sched = _parts()
        z = _latent(table)
        logits = denoise_logits(model, z, None, sched, table, anneal_step=0)
        scaled = z.z / torch.sqrt(1.0 + torch.exp(sched.gamma(z.t)))[:, None, None]
        assert torch.allclose(logits, model(scaled, z.t))

    def test_prior_recovers_tokens_at_low_noise(self):
        model, table, _ = _parts()
        with torch.no_grad():
            model.output_proj.weight.zero_()
            model.output_proj.bias.zero_()
        sched = NoiseSchedule.fixed(-10.0, 6.0)
        tokens = torch.tensor([[1, 5, 2, 6]])
        z = sample_latent(embed(tokens, table), torch.zeros(1, dtype=torch.float64), sched,
                          generator=torch.Generator().manual_seed(1))
        out = self_cond_forward(model, z, "eval", schedule=sched, table=table, anneal_step=10)
        assert torch.equal(out.logits.argmax(-1), tokens)
        assert torch.allclose(out.x_hat, embed(tokens, table), atol=1e-3)


# ============================================================================
# Self-conditioning
# ============================================================================
class TestSelfCondForward:
    def test_x_hat_is_softmax_average_of_rows(self):
        model, table, sched = _parts()
        out = self_cond_forward(model, _latent(table), "eval", schedule=sched, table=table,
                                anneal_step=0)
        assert torch.allclose(out.x_hat, torch.softmax(out.logits, -1) @ table.weight)

    def test_eval_runs_two_passes(self):
        model, table, sched = _parts()
        z = _latent(table)
        inner = denoise_logits(model, z, None, sched, table, 0)
        outer = denoise_logits(model, z, logits_to_xhat(inner, table), sched, table, 0)
        out = self_cond_forward(model, z, "eval", schedule=sched, table=table, anneal_step=0)
        assert torch.allclose(out.logits, outer)

    def test_eval_is_deterministic(self):
        model, table, sched = _parts()
        z = _latent(table)
        a = self_cond_forward(model, z, "eval", schedule=sched, table=table, anneal_step=3)
        b = self_cond_forward(model, z, "eval", schedule=sched, table=table, anneal_step=3)
        assert torch.equal(a.logits, b.logits)

    def test_sample_mode_conditions_on_prev(self):
        model, table, sched = _parts()
        z = _latent(table)
        prev = torch.ones_like(z.z)
        out = self_cond_forward(model, z, "sample", prev, schedule=sched, table=table,
                                anneal_step=0)
        assert torch.allclose(out.logits, denoise_logits(model, z, prev, sched, table, 0))

    def test_sample_mode_needs_prev(self):
        model, table, sched = _parts()
        with pytest.raises(ArgumentError):
            self_cond_forward(model, _latent(table), "sample", schedule=sched, table=table,
                              anneal_step=0)

    def test_unknown_mode_rejected(self):
        model, table, sched = _parts()
        with pytest.raises(ArgumentError):
            self_cond_forward(model, _latent(table), "decode", schedule=sched, table=table,
                              anneal_step=0)

    def test_train_mode_keeps_gradients(self):
        model, table, sched = _parts()
        out = self_cond_forward(model, _latent(table), "train",
                                generator=torch.Generator().manual_seed(0),
                                schedule=sched, table=table, anneal_step=0)
        out.x_hat.sum().backward()
        assert model.output_proj.weight.grad is not None

    def test_train_mode_unrolls_a_quarter_of_the_time(self):
        model, table, sched = _parts()
        z = _latent(table, batch=1, length=2)
        g = torch.Generator().manual_seed(0)
        calls = []
        handle = model.register_forward_hook(lambda *_: calls.append(1))
        n = 10_000
        try:
            with torch.no_grad():
                for _ in range(n):
                    self_cond_forward(model, z, "train", generator=g, schedule=sched,
                                      table=table, anneal_step=0)
        finally:
            handle.remove()
        # one network call per single pass, two per unrolled pass
        assert abs((len(calls) - n) / n - TWO_PASS_PROB) < 0.02
