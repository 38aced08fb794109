"""Tests for ancestral sampling, score temperature and token guidance."""

from __future__ import annotations

import json
import math

import pytest
import torch

from plaid.denoiser import Denoiser, denoise_logits, gaussian_prior_logits
from plaid.diffusion_core import Latent, NoiseSchedule
from plaid.embedding import EmbeddingTable
from plaid.errors import ConfigError, DomainError, SpecError
from plaid.sampler import (
    GuidanceSpec,
    GuidanceTerm,
    SamplerConfig,
    apply_score_temperature,
    guidance_logprob,
    guided_xhat,
    sample,
    write_samples,
)

from tests.conftest import TINY_VOCAB, tiny_model_config


def _uniform(length: int = 3, vocab: int = 4) -> torch.Tensor:
    return torch.zeros(1, length, vocab, dtype=torch.float64)


# ============================================================================
# Temperature
# ============================================================================
class TestScoreTemperature:
    def test_tau_one_is_identity(self):
        x_hat, z = torch.randn(2, 3), torch.randn(2, 3)
        assert apply_score_temperature(x_hat, z, 1.0) is x_hat

    def test_tau_half_doubles_the_step(self):
        x_hat, z = torch.ones(2, 3), torch.zeros(2, 3)
        assert torch.allclose(apply_score_temperature(x_hat, z, 0.5), torch.full((2, 3), 2.0))

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_nonpositive_tau_rejected(self, tau):
        with pytest.raises(DomainError):
            apply_score_temperature(torch.ones(1), torch.ones(1), tau)

    def test_config_checks_tau(self):
        with pytest.raises(ConfigError):
            SamplerConfig(tau=1.5).validate()


# ============================================================================
# Guidance spec and log-probabilities
# ============================================================================
class TestGuidanceSpec:
    def test_span_end_follows_tokens(self):
        term = GuidanceTerm.span(2, [1, 2, 3])
        assert term.end == 5

    def test_overlapping_spans_rejected(self):
        spec = GuidanceSpec([GuidanceTerm.span(0, [1, 2]), GuidanceTerm.span(1, [3])])
        with pytest.raises(SpecError):
            spec.validate(8, 4)

    def test_span_past_the_end_rejected(self):
        with pytest.raises(SpecError):
            GuidanceSpec([GuidanceTerm.span(6, [1, 2, 3])]).validate(8, 4)

    def test_token_outside_vocab_rejected(self):
        with pytest.raises(SpecError):
            GuidanceSpec([GuidanceTerm.lexical(4)]).validate(8, 4)

    def test_lexical_takes_one_token(self):
        with pytest.raises(SpecError):
            GuidanceSpec([GuidanceTerm("lexical", (1, 2))]).validate(8, 4)

    def test_dict_round_trip(self):
        spec = GuidanceSpec([GuidanceTerm.span(0, [1, 2]), GuidanceTerm.lexical(3, 2.0, True)])
        assert GuidanceSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    def test_malformed_term_rejected(self):
        with pytest.raises(SpecError):
            GuidanceSpec.from_dict({"terms": [{"kind": "span", "tokens": [1], "colour": "red"}]})


class TestGuidanceLogprob:
    def test_span_is_joint_probability(self):
        spec = GuidanceSpec([GuidanceTerm.span(0, [1, 2])])
        assert float(guidance_logprob(spec, _uniform())) == pytest.approx(2 * math.log(0.25))

    def test_lexical_is_unigram_probability(self):
        spec = GuidanceSpec([GuidanceTerm.lexical(3)])
        assert float(guidance_logprob(spec, _uniform())) == pytest.approx(math.log(0.25))

    def test_negated_terms(self):
        lex = GuidanceSpec([GuidanceTerm.lexical(3, negated=True)])
        span = GuidanceSpec([GuidanceTerm.span(0, [1, 2], negated=True)])
        assert float(guidance_logprob(lex, _uniform())) == pytest.approx(math.log(0.75))
        assert float(guidance_logprob(span, _uniform())) == pytest.approx(math.log(1 - 1 / 16))

    def test_weights_scale_terms(self):
        spec = GuidanceSpec([GuidanceTerm.lexical(3, weight=2.0), GuidanceTerm.span(1, [0])])
        assert float(guidance_logprob(spec, _uniform())) == pytest.approx(3 * math.log(0.25))

    def test_certain_token_stays_finite(self):
        logits = _uniform()
        logits[0, :, 1] = 1e4
        spec = GuidanceSpec([GuidanceTerm.lexical(1, negated=True)])
        assert math.isfinite(float(guidance_logprob(spec, logits)))

    def test_empty_spec(self):
        assert float(guidance_logprob(GuidanceSpec(), _uniform())) == 0.0


class TestGuidedXhat:
    def _setup(self):
        g = torch.Generator().manual_seed(0)
        weight = torch.randn(4, 3, generator=g, dtype=torch.float64)
        table = type("T", (), {"weight": weight})()
        z = Latent(torch.randn(1, 5, 3, generator=g, dtype=torch.float64).requires_grad_(True),
                   torch.tensor([0.5], dtype=torch.float64))
        return table, z

    def test_zero_weight_is_a_no_op(self):
        x_hat = torch.zeros(1, 5, 3)
        spec = GuidanceSpec([GuidanceTerm.lexical(1)])
        assert guided_xhat(x_hat, None, None, None, spec, 0.0) is x_hat

    def test_step_raises_the_guidance_objective(self):
        table, z = self._setup()
        sched = NoiseSchedule.fixed(-3.0, 6.0)
        spec = GuidanceSpec([GuidanceTerm.lexical(2)])

        def objective(latent):
            return float(guidance_logprob(spec, gaussian_prior_logits(latent, table, torch.tensor(1.0))))

        with torch.enable_grad():
            logits = gaussian_prior_logits(z.z, table, torch.tensor(1.0))
            x_hat = torch.zeros_like(z.z)
            guided = guided_xhat(x_hat, z, logits, sched, spec, 1.0)
        delta = (guided - x_hat).detach()
        assert delta.abs().sum() > 0
        step = z.z.detach() + 1e-4 * delta / delta.norm()
        assert objective(step) > objective(z.z.detach())

    def test_gradient_matches_finite_differences(self):
        cfg = tiny_model_config(self_cond=False)
        g = torch.Generator().manual_seed(0)
        table = EmbeddingTable(TINY_VOCAB, cfg.embed_dim, generator=g)
        model = Denoiser(cfg, generator=g)
        sched = NoiseSchedule.fixed(-3.0, 6.0)
        spec = GuidanceSpec([GuidanceTerm.span(1, [2, 3]), GuidanceTerm.lexical(4, weight=0.5),
                             GuidanceTerm.lexical(5, negated=True)])
        t = torch.tensor([0.4], dtype=torch.float64)
        z0 = torch.randn(1, 6, cfg.embed_dim, generator=g, dtype=torch.float64)

        def objective(z):
            # network logits plus half of the output prior
            logits = denoise_logits(model, Latent(z, t), None, sched, table, 5)
            return guidance_logprob(spec, logits).sum()

        latent = Latent(z0.clone().requires_grad_(True), t)
        with torch.enable_grad():
            (grad,) = torch.autograd.grad(objective(latent.z), latent.z)
            logits = denoise_logits(model, latent, None, sched, table, 5)
            guided = guided_xhat(torch.zeros_like(z0), latent, logits, sched, spec, 2.0)
        assert torch.allclose(guided, 2.0 * math.exp(-3.0 + 9.0 * 0.4) * grad)

        h = 1e-6
        with torch.no_grad():
            for i in (0, 5, 9, 17, 23):
                up, down = z0.clone(), z0.clone()
                up.view(-1)[i] += h
                down.view(-1)[i] -= h
                numeric = (float(objective(up)) - float(objective(down))) / (2.0 * h)
                analytic = float(grad.view(-1)[i])
                assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-6

    def test_negative_weight_rejected(self):
        with pytest.raises(DomainError):
            guided_xhat(torch.zeros(1), None, None, None, GuidanceSpec(), -1.0)


# ============================================================================
# sample
# ============================================================================
class TestSample:
    def _config(self, **kw):
        base = dict(T=3, tau=0.9, seq_len=5, seed=0, num_samples=2)
        base.update(kw)
        return SamplerConfig(**base)

    def test_shape_and_range(self, state):
        tokens = sample(state.model, state.schedule, state.table, self._config())
        assert tokens.shape == (2, 5)
        assert tokens.dtype == torch.long
        assert ((tokens >= 0) & (tokens < TINY_VOCAB)).all()

    def test_seeded(self, state):
        a = sample(state.model, state.schedule, state.table, self._config(seed=4))
        b = sample(state.model, state.schedule, state.table, self._config(seed=4))
        assert torch.equal(a, b)

    def test_one_network_call_per_step_plus_final(self, state):
        calls = []
        handle = state.model.register_forward_hook(lambda *_: calls.append(1))
        try:
            sample(state.model, state.schedule, state.table, self._config(T=3))
        finally:
            handle.remove()
        assert len(calls) == 4

    def test_zero_weight_guidance_matches_unguided(self, state):
        spec = GuidanceSpec([GuidanceTerm.lexical(1)])
        plain = sample(state.model, state.schedule, state.table, self._config())
        guided = sample(state.model, state.schedule, state.table, self._config(), spec)
        assert torch.equal(plain, guided)

    def test_guided_sampling_runs(self, state):
        spec = GuidanceSpec([GuidanceTerm.span(0, [1, 2]), GuidanceTerm.lexical(3, negated=True)])
        tokens = sample(state.model, state.schedule, state.table,
                        self._config(guidance_weight=2.0), spec)
        assert tokens.shape == (2, 5)

    def test_lexical_guidance_raises_token_presence(self):
        # zero network with the output prior fully on: x_hat is the posterior mean
        # under uniform i.i.d. tokens
        cfg = tiny_model_config(vocab_size=16, embed_dim=8, anneal_steps=0, self_cond=False)
        g = torch.Generator().manual_seed(0)
        table = EmbeddingTable(16, 8, generator=g)
        model = Denoiser(cfg, generator=g)
        with torch.no_grad():
            model.output_proj.weight.zero_()
            model.output_proj.bias.zero_()
        sched = NoiseSchedule.fixed(-3.0, 6.0)
        spec = GuidanceSpec([GuidanceTerm.lexical(3)])
        presence = []
        for weight in (0.0, 1.0, 2.0, 4.0):
            config = self._config(T=100, tau=1.0, seq_len=8, num_samples=512, guidance_weight=weight)
            tokens = sample(model, sched, table, config, spec)
            presence.append(float((tokens == 3).any(-1).double().mean()))
        for weaker, stronger in zip(presence, presence[1:]):
            assert stronger >= weaker - 0.05, presence
        assert presence[-1] >= presence[0] + 0.3, presence

    def test_spec_checked_against_length(self, state):
        spec = GuidanceSpec([GuidanceTerm.span(4, [1, 2])])
        with pytest.raises(SpecError):
            sample(state.model, state.schedule, state.table, self._config(guidance_weight=1.0), spec)


def test_write_samples(tmp_path):
    out = tmp_path / "run" / "samples.jsonl"
    sidecar = write_samples(out, [{"index": 0, "text": "hi"}, {"index": 1, "text": "yo"}], {"T": 3})
    assert len(out.read_text().splitlines()) == 2
    assert json.loads(sidecar.read_text())["T"] == 3
