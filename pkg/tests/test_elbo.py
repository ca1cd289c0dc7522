import csv

import numpy as np
import pytest
import torch

from conftest import micro_frames, micro_model
from dlh.distributions import ContractViolation
from dlh.elbo import (
    TrainConfig,
    TrainingDiverged,
    assemble_loss,
    beta_schedule,
    iwae_bound,
    metrics_header,
    read_metrics,
    sequence_elbo,
    sequence_log_weight,
    summarize_iteration,
    train,
)
from dlh.engine import ElboTerms, filter_sequence, frames_to_tensor
from dlh.checkpoint import load_checkpoint
from dlh.moving_ball import ArraySampler


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def toy_terms(recon=-10.0, kl_s=2.0, kl_i=0.5):
    return ElboTerms(
        recon_loglik=torch.tensor([recon], dtype=torch.float64),
        kl_state=torch.tensor([[kl_s]], dtype=torch.float64),
        kl_indicator=torch.tensor([[kl_i]], dtype=torch.float64),
        sample_logratio=torch.tensor([-kl_s], dtype=torch.float64),
    )


class TestBetaSchedule:
    def test_linear_ramp(self):
        assert beta_schedule(0, 10000) == 0.0
        assert beta_schedule(5000, 10000) == 0.5
        assert beta_schedule(10000, 10000) == 1.0
        assert beta_schedule(250000, 10000) == 1.0

    def test_zero_anneal_means_no_ramp(self):
        assert beta_schedule(0, 0) == 1.0
        assert beta_schedule(123, 0) == 1.0

    def test_validation(self):
        with pytest.raises(ContractViolation):
            beta_schedule(-1, 100)
        with pytest.raises(ContractViolation):
            beta_schedule(1, -100)


class TestAssembleLoss:
    def test_hand_computed_single_step(self):
        # recon -10, state KL 2, indicator KL 0.5 at full weight
        loss = assemble_loss([toy_terms()], beta=1.0)
        assert loss.dtype == torch.float64
        assert float(loss) == pytest.approx(12.5, abs=1e-12)

    def test_beta_scales_only_kl(self):
        assert float(assemble_loss([toy_terms()], 0.0)) == pytest.approx(10.0)
        assert float(assemble_loss([toy_terms()], 0.5)) == pytest.approx(11.25)

    def test_sums_over_steps_means_over_batch(self):
        t1 = toy_terms()
        loss = assemble_loss([t1, t1, t1], beta=1.0)
        assert float(loss) == pytest.approx(37.5)
        wide = ElboTerms(
            recon_loglik=torch.tensor([-10.0, -20.0], dtype=torch.float64),
            kl_state=torch.tensor([[2.0], [4.0]], dtype=torch.float64),
            kl_indicator=torch.tensor([[0.5], [0.5]], dtype=torch.float64),
            sample_logratio=torch.zeros(2, dtype=torch.float64),
        )
        assert float(assemble_loss([wide], 1.0)) == pytest.approx(
            (12.5 + 24.5) / 2
        )

    def test_validation(self):
        with pytest.raises(ContractViolation):
            assemble_loss([], 1.0)
        with pytest.raises(ContractViolation):
            assemble_loss([toy_terms()], 1.5)
        with pytest.raises(ContractViolation):
            assemble_loss([toy_terms()], -0.1)

    def test_matches_negative_sequence_elbo(self, model2):
        frames = frames_to_tensor(micro_frames(3, 5))
        with torch.no_grad():
            res = filter_sequence(model2, frames, gen())
        loss = assemble_loss(res.step_terms, 1.0)
        elbo = sequence_elbo(res.step_terms)
        assert float(loss) == pytest.approx(float(-elbo.mean()), rel=1e-12)


class TestImportanceWeights:
    def test_log_weight_expectation_is_elbo(self, model2):
        # E over noise of log w equals the analytic ELBO
        frames = frames_to_tensor(micro_frames(2, 3, seed=4))
        g = gen(4)
        lws, elbos = [], []
        with torch.no_grad():
            for _ in range(400):
                res = filter_sequence(model2, frames, g)
                lws.append(sequence_log_weight(res.step_terms).numpy())
                elbos.append(sequence_elbo(res.step_terms).numpy())
        diff = np.stack(lws) - np.stack(elbos)
        # per-draw gap is the logratio-vs-KL residual; mean must vanish
        stderr = diff.std(ddof=1) / np.sqrt(diff.shape[0])
        assert np.all(np.abs(diff.mean(axis=0)) < 5 * stderr + 1e-3)

    def test_iwae_at_least_elbo(self, model2):
        frames = frames_to_tensor(micro_frames(2, 3, seed=5))
        g = gen(5)
        with torch.no_grad():
            elbo_draws = []
            for _ in range(64):
                res = filter_sequence(model2, frames, g)
                elbo_draws.append(sequence_log_weight(res.step_terms))
            elbo_est = torch.stack(elbo_draws).mean(dim=0)
            iw_draws = [iwae_bound(model2, frames, 16, g) for _ in range(4)]
            iw_est = torch.stack(iw_draws).mean(dim=0)
        spread = torch.stack(elbo_draws).std(dim=0) / 8.0
        assert bool((iw_est >= elbo_est - 3 * spread).all())

    def test_iwae_k1_matches_single_weight_stream(self, model2):
        frames = frames_to_tensor(micro_frames(2, 3, seed=6))
        res = filter_sequence(model2, frames, gen(7))
        lw = sequence_log_weight(res.step_terms)
        iw = iwae_bound(model2, frames, 1, gen(7))
        assert torch.allclose(iw, lw.detach(), atol=1e-10)

    def test_iwae_validation(self, model2):
        frames = frames_to_tensor(micro_frames(1, 2))
        with pytest.raises(ContractViolation):
            iwae_bound(model2, frames, 0, gen())


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.total_iters == 20000
        assert cfg.batch_size == 100
        assert cfg.sequence_length == 100
        assert cfg.learning_rate == 5e-4
        assert cfg.adam_epsilon == 1e-4
        assert cfg.grad_clip == 100.0
        assert cfg.beta_anneal_iters == 10000

    def test_validation(self):
        with pytest.raises(ContractViolation):
            TrainConfig(total_iters=0)
        with pytest.raises(ContractViolation):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ContractViolation):
            TrainConfig(beta_anneal_iters=-1)
        with pytest.raises(ContractViolation):
            TrainConfig(seed=-3)


class TestMetricsSchema:
    def test_header_two_levels(self):
        assert metrics_header(2) == [
            "iter",
            "loss",
            "recon_nats",
            "kl_state_L1",
            "kl_state_L2",
            "kl_ind_L1",
            "kl_ind_L2",
            "mean_depth",
            "beta",
            "wallclock_s",
        ]

    def test_summarize_iteration(self, model2):
        frames = frames_to_tensor(micro_frames(3, 4))
        with torch.no_grad():
            res = filter_sequence(model2, frames, gen())
        s = summarize_iteration(res, beta=0.25)
        assert s["beta"] == 0.25
        assert len(s["kl_state"]) == 2
        assert s["mean_depth"] == pytest.approx(
            res.indicators.sum(axis=-1).mean()
        )
        manual = -float(
            torch.stack([t.recon_loglik for t in res.step_terms]).sum(0).mean()
        )
        assert s["recon_nats"] == pytest.approx(manual)


def small_train_cfg(**over):
    base = dict(
        total_iters=12,
        batch_size=2,
        sequence_length=4,
        checkpoint_every=6,
        beta_anneal_iters=8,
        seed=0,
    )
    base.update(over)
    return TrainConfig(**base)


class TestTrainLoop:
    def run(self, tmp_path, cfg=None, seed=0, **kw):
        model = micro_model(2, seed=seed)
        sampler = ArraySampler(micro_frames(6, 6, seed=seed), seed=seed)
        rows = train(model, cfg or small_train_cfg(), sampler, tmp_path, **kw)
        return model, rows

    def test_writes_metrics_and_checkpoint(self, tmp_path):
        model, rows = self.run(tmp_path, deterministic=True)
        assert len(rows) == 12
        got = read_metrics(tmp_path / "metrics.csv")
        assert len(got) == 12
        assert [r["iter"] for r in got] == list(range(12))
        assert all(np.isfinite(r["loss"]) for r in got)
        assert all(r["wallclock_s"] == 0.0 for r in got)
        payload = load_checkpoint(tmp_path / "checkpoint.pt")
        assert payload.iteration == 12
        for p, q in zip(payload.model.parameters(), model.parameters()):
            assert torch.equal(p, q)

    def test_loss_column_identity(self, tmp_path):
        _, rows = self.run(tmp_path)
        got = read_metrics(tmp_path / "metrics.csv")
        for r in got:
            parts = (
                r["recon_nats"]
                + r["beta"]
                * (
                    r["kl_state_L1"]
                    + r["kl_state_L2"]
                    + r["kl_ind_L1"]
                    + r["kl_ind_L2"]
                )
            )
            assert r["loss"] == pytest.approx(parts, abs=5e-5)

    def test_beta_column_follows_schedule(self, tmp_path):
        _, rows = self.run(tmp_path)
        got = read_metrics(tmp_path / "metrics.csv")
        for r in got:
            assert r["beta"] == pytest.approx(
                beta_schedule(int(r["iter"]), 8), abs=1e-6
            )

    def test_resume_reproduces_straight_run(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        model_a, _ = self.run(a_dir, deterministic=True)

        model_b = micro_model(2, seed=0)
        sampler_b = ArraySampler(micro_frames(6, 6, seed=0), seed=0)
        train(
            model_b,
            small_train_cfg(total_iters=6),
            sampler_b,
            b_dir,
            deterministic=True,
        )
        payload = load_checkpoint(b_dir / "checkpoint.pt")
        model_b = payload.model
        sampler_b = ArraySampler(micro_frames(6, 6, seed=0), seed=0)
        train(
            model_b,
            small_train_cfg(),
            sampler_b,
            b_dir,
            deterministic=True,
            resume={
                "iteration": payload.iteration,
                "optimizer_state": payload.optimizer_state,
                "torch_rng": payload.torch_rng,
                "sampler_state": payload.sampler_state,
            },
        )
        for p, q in zip(model_a.parameters(), model_b.parameters()):
            assert torch.equal(p, q)
        rows_a = (a_dir / "metrics.csv").read_text().splitlines()
        rows_b = (b_dir / "metrics.csv").read_text().splitlines()
        assert rows_a == rows_b

    def test_nan_frames_hit_the_activation_guard(self, tmp_path):
        # non-finite inputs are rejected at the encoder, before any loss
        from dlh.networks import NonFiniteActivation

        class PoisonSampler:
            def __init__(self):
                self.inner = ArraySampler(micro_frames(4, 6), seed=0)

            def sample(self, batch, length):
                frames = self.inner.sample(batch, length)
                frames[:] = np.nan
                return frames

            def state_dict(self):
                return self.inner.state_dict()

            def load_state_dict(self, state):
                self.inner.load_state_dict(state)

        with pytest.raises(NonFiniteActivation):
            train(micro_model(2), small_train_cfg(), PoisonSampler(), tmp_path)

    def test_diverged_loss_aborts_before_step(self, tmp_path, monkeypatch):
        # activations can stay finite while optimization still blows up the
        # objective; fake that by poisoning the assembled loss
        import dlh.elbo as elbo_mod

        real = elbo_mod.assemble_loss
        calls = {"n": 0}

        def poisoned(step_terms, beta):
            calls["n"] += 1
            loss = real(step_terms, beta)
            if calls["n"] > 3:
                return loss * torch.tensor(float("nan"), dtype=loss.dtype)
            return loss

        monkeypatch.setattr(elbo_mod, "assemble_loss", poisoned)
        model = micro_model(2)
        before = [p.clone() for p in model.parameters()]
        sampler = ArraySampler(micro_frames(4, 6), seed=0)
        with pytest.raises(TrainingDiverged):
            train(model, small_train_cfg(checkpoint_every=3), sampler, tmp_path)
        got = read_metrics(tmp_path / "metrics.csv")
        assert len(got) == 4  # three clean rows plus the poisoned one
        assert not np.isfinite(got[-1]["loss"])
        payload = load_checkpoint(tmp_path / "checkpoint.pt")
        assert payload.iteration == 3  # cadence save before the bad batch
        # parameters moved during clean iterations but stayed finite
        for p in model.parameters():
            assert bool(torch.isfinite(p).all())
        assert any(
            not torch.equal(p, q) for p, q in zip(before, model.parameters())
        )

    def test_smoothed_loss_decreases(self, tmp_path):
        # short smoke: mean of last rows under mean of first rows
        cfg = small_train_cfg(
            total_iters=60, batch_size=4, beta_anneal_iters=0, checkpoint_every=60
        )
        _, rows = self.run(tmp_path, cfg=cfg)
        losses = [r["loss"] for r in rows]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])
