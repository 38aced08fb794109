"""Tests for the likelihood bound, its estimators and held-out evaluation.

Covers:
  * term-level losses against closed forms
  * the variance-ratio batch split and its moment tracker
  * vlb_estimate bookkeeping, gradients and determinism
  * autograd against central differences
  * the finite-T bound: closed-form cases, convergence and monotonicity in T
  * eval_nll reporting
"""

from __future__ import annotations

import math
import warnings

import pytest
import torch

from plaid.denoiser import Denoiser
from plaid.diffusion_core import NoiseSchedule, prior_kl
from plaid.embedding import EmbeddingTable, embed
from plaid.errors import InputError, SizeError
from plaid.objective import (
    EvalReport,
    MomentTracker,
    allocate_split,
    bits_per_char,
    diffusion_loss,
    discrete_vlb,
    discrete_vlb_samples,
    eval_nll,
    length_mask,
    perplexity,
    reconstruction_loss,
    schedule_interior_loss,
    stratified_times,
    vlb_estimate,
    vlb_samples,
)

from tests.conftest import TINY_VOCAB, tiny_batch, tiny_model_config

GRAD_H = 1e-6


def _parts(learned_schedule: bool = True, **kw):
    cfg = tiny_model_config(**kw)
    g = torch.Generator().manual_seed(0)
    table = EmbeddingTable(cfg.vocab_size, cfg.embed_dim, generator=g)
    if learned_schedule:
        sched = NoiseSchedule(cfg.gamma_0, cfg.gamma_1, generator=g)
    else:
        sched = NoiseSchedule.fixed(cfg.gamma_0, cfg.gamma_1)
    return Denoiser(cfg, generator=g), sched, table


def _zero_network(model: Denoiser) -> Denoiser:
    """Zero the output layer so the network contributes no logits."""
    with torch.no_grad():
        model.output_proj.weight.zero_()
        model.output_proj.bias.zero_()
    return model


def _central_difference(loss_fn, param: torch.Tensor, index: int, h: float = GRAD_H) -> float:
    flat = param.data.view(-1)
    orig = float(flat[index])
    with torch.no_grad():
        flat[index] = orig + h
        up = float(loss_fn())
        flat[index] = orig - h
        down = float(loss_fn())
        flat[index] = orig
    return (up - down) / (2.0 * h)


def _assert_gradient_matches(loss_fn, param: torch.Tensor, indices) -> None:
    (grad,) = torch.autograd.grad(loss_fn(), [param])
    for i in indices:
        analytic = float(grad.reshape(-1)[i])
        numeric = _central_difference(loss_fn, param, i)
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-6, \
            (i, analytic, numeric)


# ============================================================================
# Term-level losses
# ============================================================================
class TestTerms:
    def test_reconstruction_of_uniform_logits(self):
        logits = torch.zeros(1, 3, TINY_VOCAB, dtype=torch.float64)
        tokens = torch.tensor([[0, 1, 2]])
        assert float(reconstruction_loss(logits, tokens)) == pytest.approx(3 * math.log(TINY_VOCAB))

    def test_reconstruction_mask(self):
        logits = torch.zeros(1, 3, TINY_VOCAB, dtype=torch.float64)
        tokens = torch.tensor([[0, 1, 2]])
        mask = length_mask(torch.tensor([2]), 3)
        assert float(reconstruction_loss(logits, tokens, mask)) == pytest.approx(2 * math.log(TINY_VOCAB))

    def test_diffusion_loss_closed_form(self):
        sched = NoiseSchedule.fixed(-3.0, 6.0)
        x = torch.zeros(1, 2, 2, dtype=torch.float64)
        x_hat = torch.ones_like(x)
        t = torch.tensor([0.5], dtype=torch.float64)
        expected = 0.5 * 9.0 * math.exp(-1.5) * 4.0
        assert float(diffusion_loss(x, x_hat, t, sched)) == pytest.approx(expected)

    def test_perfect_denoiser_has_no_diffusion_loss(self):
        sched = NoiseSchedule.fixed(-3.0, 6.0)
        x = torch.randn(3, 4, 2, dtype=torch.float64)
        t = torch.rand(3, dtype=torch.float64)
        assert torch.allclose(diffusion_loss(x, x, t, sched), torch.zeros(3, dtype=torch.float64))

    def test_length_mask(self):
        mask = length_mask(torch.tensor([1, 3]), 3)
        assert mask.tolist() == [[True, False, False], [True, True, True]]
        assert length_mask(None, 3) is None


# ============================================================================
# Batch split
# ============================================================================
class TestAllocateSplit:
    @pytest.mark.parametrize("vd,vr,batch,expected", [
        (1.0, 1.0, 64, (32, 32)),
        (4.0, 1.0, 30, (20, 10)),
        (1.0, 0.0, 10, (9, 1)),
        (0.0, 1.0, 10, (1, 9)),
        (0.0, 0.0, 10, (5, 5)),
        (1.0, 1.0, 2, (1, 1)),
    ])
    def test_sqrt_variance_ratio(self, vd, vr, batch, expected):
        assert allocate_split(vd, vr, batch) == expected

    @pytest.mark.parametrize("vd,vr,batch,expected", [
        (9.0, 1.0, 8, (6, 2)),
        (1e6, 1.0, 4, (3, 1)),
        (2.0, 2.0, 8, (4, 4)),
        # ratio rounds to 1 but 2 gives the smaller variance
        (0.345, 1.0, 4, (2, 2)),
    ])
    def test_worked_splits(self, vd, vr, batch, expected):
        assert allocate_split(vd, vr, batch) == expected

    def test_optimal_against_exhaustive_search(self):
        g = torch.Generator().manual_seed(0)
        cases = []
        for batch in range(2, 65):
            for _ in range(20):
                vd, vr = (10.0 ** (8.0 * torch.rand(2, generator=g, dtype=torch.float64) - 4.0)).tolist()
                cases.append((vd, vr, batch))
            cases += [(0.0, 1.0, batch), (1.0, 0.0, batch), (0.0, 0.0, batch)]
        for vd, vr, batch in cases:
            n_diff, n_recon = allocate_split(vd, vr, batch)
            assert n_diff >= 1 and n_recon >= 1 and n_diff + n_recon == batch
            best = min(vd / n + vr / (batch - n) for n in range(1, batch))
            assert vd / n_diff + vr / n_recon <= best * (1.0 + 1e-12), (vd, vr, batch)

    def test_batch_of_one_cannot_split(self):
        with pytest.raises(SizeError):
            allocate_split(1.0, 1.0, 1)

    def test_interior_loss_is_mean_square(self):
        assert float(schedule_interior_loss([1.0, 2.0, 3.0])) == pytest.approx(14.0 / 3.0)

    def test_interior_loss_needs_two_samples(self):
        with pytest.raises(SizeError):
            schedule_interior_loss(torch.tensor([1.0]))


class TestMomentTracker:
    def test_equal_split_during_warmup(self):
        tracker = MomentTracker(warmup_steps=100)
        tracker.update(torch.tensor([0.0, 10.0]), torch.tensor([1.0, 1.0]))
        assert tracker.split(10) == (5, 5)

    def test_first_update_is_taken_directly(self):
        tracker = MomentTracker()
        tracker.update(torch.tensor([0.0, 4.0]), torch.tensor([1.0, 1.0]))
        assert tracker.m1["diffusion"] == pytest.approx(2.0)
        assert tracker.variance("diffusion") == pytest.approx(4.0)
        assert tracker.variance("recon") == pytest.approx(0.0)

    def test_exponential_moving_average(self):
        tracker = MomentTracker(decay=0.99)
        tracker.update(torch.tensor([0.0, 4.0]), torch.tensor([1.0]))
        tracker.update(torch.tensor([2.0, 2.0]), torch.tensor([1.0]))
        assert tracker.m1["diffusion"] == pytest.approx(2.0)
        assert tracker.m2["diffusion"] == pytest.approx(0.99 * 8.0 + 0.01 * 4.0)

    def test_split_follows_variances_after_warmup(self):
        tracker = MomentTracker(warmup_steps=1)
        tracker.update(torch.tensor([0.0, 4.0]), torch.tensor([1.0, 3.0]))
        # sd = 2, sr = 1
        assert tracker.split(30) == (20, 10)

    def test_state_round_trip(self):
        tracker = MomentTracker(warmup_steps=3)
        tracker.update(torch.tensor([0.0, 4.0]), torch.tensor([1.0, 3.0]))
        other = MomentTracker()
        other.load_state_dict(tracker.state_dict())
        assert other == tracker


# ============================================================================
# Minibatch estimator
# ============================================================================
class TestVlbEstimate:
    def test_terms_add_up(self):
        model, sched, table = _parts()
        est = vlb_estimate(tiny_batch(), model, sched, table,
                           generator=torch.Generator().manual_seed(0))
        assert est.total == pytest.approx(est.prior_kl + est.recon + est.diffusion)
        assert float(est.loss) == pytest.approx(est.total)
        assert all(math.isfinite(v) for v in est.terms().values())

    def test_prior_term_is_exact(self):
        model, sched, table = _parts()
        tokens = tiny_batch()
        est = vlb_estimate(tokens, model, sched, table, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            expected = float(prior_kl(embed(tokens, table), sched).mean())
        assert est.prior_kl == pytest.approx(expected)

    def test_split_covers_the_batch(self):
        model, sched, table = _parts()
        tracker = MomentTracker()
        est = vlb_estimate(tiny_batch(batch=6), model, sched, table, tracker,
                           torch.Generator().manual_seed(0))
        assert (est.n_diff, est.n_recon) == (3, 3)
        assert est.diffusion_samples.shape == (3,)
        assert tracker.steps == 1

    def test_single_example_feeds_both_terms(self):
        model, sched, table = _parts()
        est = vlb_estimate(tiny_batch(batch=1), model, sched, table,
                           generator=torch.Generator().manual_seed(0))
        assert (est.n_diff, est.n_recon) == (1, 1)

    def test_fixed_likelihood_uses_whole_batch(self):
        model, sched, table = _parts(learned_likelihood=False)
        est = vlb_estimate(tiny_batch(), model, sched, table,
                           generator=torch.Generator().manual_seed(0))
        assert (est.n_diff, est.n_recon) == (4, 4)

    def test_eval_mode_leaves_tracker_alone(self):
        model, sched, table = _parts()
        tracker = MomentTracker()
        with torch.no_grad():
            vlb_estimate(tiny_batch(), model, sched, table, tracker,
                         torch.Generator().manual_seed(0), mode="eval")
        assert tracker.steps == 0

    def test_seeded_estimates_repeat(self):
        model, sched, table = _parts()
        a = vlb_estimate(tiny_batch(), model, sched, table, generator=torch.Generator().manual_seed(5))
        b = vlb_estimate(tiny_batch(), model, sched, table, generator=torch.Generator().manual_seed(5))
        assert a.total == b.total

    def test_loss_reaches_every_part(self):
        model, sched, table = _parts()
        est = vlb_estimate(tiny_batch(), model, sched, table,
                           generator=torch.Generator().manual_seed(0))
        est.loss.backward()
        assert sched.gamma_0.grad is not None and sched.gamma_1.grad is not None
        assert table.weight.grad is not None
        assert model.output_proj.weight.grad is not None

    def test_reported_terms_leave_the_graph_alone(self):
        model, sched, table = _parts()
        with warnings.catch_warnings():
            warnings.filterwarnings("error", message="Converting a tensor with requires_grad")
            est = vlb_estimate(tiny_batch(), model, sched, table,
                               generator=torch.Generator().manual_seed(0))
        assert est.loss.requires_grad
        assert isinstance(est.total, float)

    def test_truncated_examples(self):
        model, sched, table = _parts()
        est = vlb_estimate(tiny_batch(), model, sched, table,
                           generator=torch.Generator().manual_seed(0),
                           lengths=torch.tensor([6, 1, 3, 6]))
        assert math.isfinite(est.total)

    def test_empty_batch_rejected(self):
        model, sched, table = _parts()
        with pytest.raises(InputError):
            vlb_estimate(torch.zeros(0, dtype=torch.long), model, sched, table)


# ============================================================================
# Gradients
# ============================================================================
class TestGradients:
    """Autograd through the seeded minibatch estimate against central differences."""

    @staticmethod
    def _loss(model, sched, table):
        # anneal_step 5 puts half of the output prior on, so the table enters twice
        return lambda: vlb_estimate(tiny_batch(), model, sched, table,
                                    generator=torch.Generator().manual_seed(3),
                                    anneal_step=5).loss

    def test_embedding_table(self):
        model, sched, table = _parts(self_cond=False)
        _assert_gradient_matches(self._loss(model, sched, table), table.weight, [0, 5, 11, 22, 27])

    def test_network_weights(self):
        model, sched, table = _parts(self_cond=False)
        loss = self._loss(model, sched, table)
        _assert_gradient_matches(loss, model.output_proj.weight, [0, 9, 30, 55])
        _assert_gradient_matches(loss, model.output_proj.bias, [0, 6])
        _assert_gradient_matches(loss, model.blocks[0].attn.qkv.weight, [0, 50, 191])

    def test_schedule_endpoints(self):
        model, sched, table = _parts(self_cond=False)
        loss = self._loss(model, sched, table)
        _assert_gradient_matches(loss, sched.gamma_0, [0])
        _assert_gradient_matches(loss, sched.gamma_1, [0])

    def test_schedule_interior_through_variance_loss(self):
        model, sched, table = _parts(self_cond=False)

        def loss():
            est = vlb_estimate(tiny_batch(), model, sched, table,
                               generator=torch.Generator().manual_seed(3), anneal_step=5)
            return schedule_interior_loss(est.diffusion_samples)

        _assert_gradient_matches(loss, sched.interior.l1.weight_raw, [0])
        _assert_gradient_matches(loss, sched.interior.l2.weight_raw, [0, 7])
        _assert_gradient_matches(loss, sched.interior.l3.weight_raw, [3])


# ============================================================================
# Per-sequence estimators
# ============================================================================
class TestSequenceEstimators:
    def test_stratified_times_one_per_stratum(self):
        t = stratified_times(8, torch.Generator().manual_seed(0))
        k = torch.arange(8, dtype=torch.float64)
        assert ((t >= k / 8) & (t < (k + 1) / 8)).all()

    def test_vlb_samples_shape(self):
        model, sched, table = _parts()
        draws = vlb_samples(tiny_batch()[0], model, sched, table, 16,
                            torch.Generator().manual_seed(0), chunk=5)
        assert draws.shape == (16,)
        assert torch.isfinite(draws).all()

    def test_discrete_bound_is_finite(self):
        model, sched, table = _parts(learned_schedule=False)
        draws = discrete_vlb_samples(tiny_batch()[0], model, sched, table, T=10, draws=12,
                                     generator=torch.Generator().manual_seed(0))
        assert draws.shape == (12,)
        assert torch.isfinite(draws).all()
        value = discrete_vlb(tiny_batch()[0], model, sched, table, T=10, draws=12,
                             generator=torch.Generator().manual_seed(0))
        assert value == pytest.approx(float(draws.mean()))

    def test_discrete_bound_needs_a_step(self):
        model, sched, table = _parts()
        with pytest.raises(SizeError):
            discrete_vlb_samples(tiny_batch()[0], model, sched, table, T=0, draws=4)


class TestFiniteTBound:
    SEQ = torch.tensor([0, 1])

    @staticmethod
    def _posterior_mean_parts(vocab_size: int = 2):
        """A denoiser whose logits are the exact Gaussian posterior over rows (coef 1 from step 10)."""
        cfg = tiny_model_config(vocab_size=vocab_size, self_cond=False)
        g = torch.Generator().manual_seed(0)
        table = EmbeddingTable(vocab_size, cfg.embed_dim, generator=g)
        model = _zero_network(Denoiser(cfg, generator=g))
        return model, NoiseSchedule.fixed(cfg.gamma_0, cfg.gamma_1), table

    def test_perfect_denoiser_leaves_only_the_prior(self):
        model, sched, table = self._posterior_mean_parts(vocab_size=1)
        seq = torch.zeros(3, dtype=torch.long)
        with torch.no_grad():
            expected = float(prior_kl(embed(seq, table)[None], sched)[0])
        for T in (1, 16):
            draws = discrete_vlb_samples(seq, model, sched, table, T=T, draws=32,
                                         generator=torch.Generator().manual_seed(T))
            assert torch.allclose(draws, torch.full_like(draws, expected), rtol=1e-12, atol=1e-12)
        cont = vlb_samples(seq, model, sched, table, 32, torch.Generator().manual_seed(0))
        assert torch.allclose(cont, torch.full_like(cont, expected), rtol=1e-12, atol=1e-12)

    def test_constant_denoiser_telescopes(self):
        # zero logits: x_hat is the mean row c at every step, so the step KLs sum to
        # 1/2 ||x - c||^2 (1 / sigma^2(0) - 1 / sigma^2(1)) whatever T is
        cfg = tiny_model_config(self_cond=False)
        g = torch.Generator().manual_seed(0)
        table = EmbeddingTable(cfg.vocab_size, cfg.embed_dim, generator=g)
        model = _zero_network(Denoiser(cfg, generator=g))
        sched = NoiseSchedule.fixed(-3.0, 6.0)
        seq = tiny_batch()[0]
        with torch.no_grad():
            x = embed(seq, table)
            c = table.weight.mean(0)
            expected = (float(prior_kl(x[None], sched)[0])
                        + seq.numel() * math.log(TINY_VOCAB)
                        + 0.5 * float((x - c).pow(2).sum()) * (math.exp(3.0) - math.exp(-6.0)))

        single = discrete_vlb_samples(seq, model, sched, table, T=1, draws=8,
                                      generator=torch.Generator().manual_seed(0))
        assert torch.allclose(single, torch.full_like(single, expected), rtol=1e-10)
        for T in (4, 16):
            # draws == T with stratified u visits every step exactly once
            draws = discrete_vlb_samples(seq, model, sched, table, T=T, draws=T,
                                         generator=torch.Generator().manual_seed(T))
            assert float(draws.mean()) == pytest.approx(expected, rel=1e-9)

    def test_large_T_agrees_with_continuous_estimate(self):
        model, sched, table = self._posterior_mean_parts()
        n = 100_000
        cont = vlb_samples(self.SEQ, model, sched, table, n, torch.Generator().manual_seed(0),
                           anneal_step=10)
        disc = discrete_vlb_samples(self.SEQ, model, sched, table, T=4096, draws=n,
                                    generator=torch.Generator().manual_seed(1), anneal_step=10)
        se = math.sqrt(float(cont.var()) / n + float(disc.var()) / n)
        assert abs(float(cont.mean()) - float(disc.mean())) < 4.0 * se + 1e-3

    def test_bound_tightens_as_T_grows(self):
        model, sched, table = self._posterior_mean_parts()
        n = 20_000
        # one seed for every T: the same u and noise draws, so differences are paired
        runs = {T: discrete_vlb_samples(self.SEQ, model, sched, table, T=T, draws=n,
                                        generator=torch.Generator().manual_seed(7), anneal_step=10)
                for T in (2, 16, 64, 256, 1024)}
        steps = sorted(runs)
        for coarse, fine in zip(steps, steps[1:]):
            d = runs[coarse] - runs[fine]
            assert float(d.mean()) >= -3.0 * float(d.std()) / math.sqrt(n), (coarse, fine)
        d = runs[2] - runs[1024]
        assert float(d.mean()) > 3.0 * float(d.std()) / math.sqrt(n)


# ============================================================================
# eval_nll
# ============================================================================
class TestEvalNll:
    def test_report_units(self):
        model, sched, table = _parts()
        data = tiny_batch(batch=5)
        report = eval_nll(model, sched, table, data, mc_draws=2,
                          generator=torch.Generator().manual_seed(0), batch_size=2, seed=0)
        assert isinstance(report, EvalReport)
        assert report.tokens == 30
        assert report.nats_per_token == pytest.approx(
            report.prior_kl + report.recon + report.diffusion)
        assert report.bpc == pytest.approx(report.nats_per_token / math.log(2))
        assert report.ppl == pytest.approx(math.exp(report.nats_per_token))

    def test_token_chars_scale_bpc(self):
        model, sched, table = _parts()
        data = tiny_batch(batch=2)
        chars = torch.full((TINY_VOCAB,), 2, dtype=torch.long)
        report = eval_nll(model, sched, table, data, generator=torch.Generator().manual_seed(0),
                          token_chars=chars)
        assert report.bpc == pytest.approx(report.nats_per_token / 2 / math.log(2))

    def test_seeded_and_restores_train_mode(self):
        model, sched, table = _parts()
        model.train()
        data = tiny_batch(batch=3)
        a = eval_nll(model, sched, table, data, generator=torch.Generator().manual_seed(9))
        b = eval_nll(model, sched, table, data, generator=torch.Generator().manual_seed(9))
        assert a.nats_per_token == b.nats_per_token
        assert model.training

    def test_empty_dataset_rejected(self):
        model, sched, table = _parts()
        with pytest.raises(InputError):
            eval_nll(model, sched, table, torch.zeros(0, 6, dtype=torch.long))

    def test_record_names(self):
        record = EvalReport("validation", 1, 6, 1.0, 1.44, 2.7, 1, 0).to_record()
        assert record["BPC"] == 1.44 and record["PPL"] == 2.7
        assert "bpc" not in record

    def test_unit_helpers(self):
        assert bits_per_char(math.log(2)) == pytest.approx(1.0)
        assert perplexity(0.0) == 1.0
