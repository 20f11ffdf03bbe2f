"""Training loops: pretraining behavior, fine-tuning invariants, evaluation."""

import numpy as np
import pytest

from diffpg.ctmc import (
    NoiseSchedule,
    SequenceSpec,
    Vocab,
    build_generator,
    transition_kernel,
)
from diffpg.errors import ConfigError, DomainError
from diffpg.rewards import RewardFn, motif_count
from diffpg.sampling import SamplerConfig, sample_rollout
from diffpg.score import TabularScore, init_score_params, load_checkpoint, save_checkpoint
from diffpg.train import (
    CSV_COLUMNS,
    IterationRecord,
    RunLog,
    TrainConfig,
    evaluate_policy,
    finetune_score,
    gradient_norm_trace,
    params_digest,
    pretrain_score,
)

SCHED = NoiseSchedule(sigma_min=0.3, sigma_max=1.5)


def make_space(kind: str, m: int, n: int):
    mask = m - 1 if kind == "absorbing" else None
    spec = SequenceSpec(Vocab(size=m, mask_index=mask), length=n)
    return spec, build_generator(spec.vocab, kind)


def small_pretrained(seed: int = 0):
    """A lightly pretrained m=4, n=8 uniform model shared by the loop tests."""
    spec, g = make_space("uniform", 4, 8)
    data = np.random.default_rng(0).integers(0, 4, size=(64, 8))
    cfg = TrainConfig(S=200, N=32, lr=0.05, seed=seed)
    params, _ = pretrain_score(data, cfg, spec, g, SCHED, n_buckets=8)
    return params, spec, g


def loop_config(**overrides):
    base = dict(
        S=3,
        K=2,
        N=16,
        G=8,
        M=4,
        lr=0.2,
        alpha=0.0,
        eps=0.2,
        n_steps=128,
        variant="grpo",
        seed=0,
        snis_dt=0.2,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(S=-1)
        for field in ("K", "N", "G", "M", "n_steps"):
            with pytest.raises(ConfigError):
                TrainConfig(**{field: 0})
        with pytest.raises(ConfigError):
            TrainConfig(T0=2.0, T=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(eps=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(alpha=-0.1)
        with pytest.raises(ConfigError):
            TrainConfig(variant="trpo")
        with pytest.raises(ConfigError):
            TrainConfig(step_schedule="cosine")
        with pytest.raises(ConfigError):
            TrainConfig(variant="grpo", G=1)
        with pytest.raises(ConfigError):
            TrainConfig(variant="grpo", N=10, G=4)
        with pytest.raises(ConfigError):
            TrainConfig(snis_dt=0.0)

    def test_derived_dt_and_subconfigs(self):
        cfg = TrainConfig(T0=0.5, n_steps=64, M=7, snis_dt=None)
        assert cfg.dt == 0.5 / 64
        assert cfg.sampler_config().t_stop == 0.5
        snis = cfg.snis_config()
        assert snis.n_proposals == 7
        assert snis.dt is None  # falls back to the sampler dt

    def test_gf_mode_requests_a_corrector_sweep(self):
        assert TrainConfig(gf_mode=True).sampler_config().corrector_after_stop == 1
        assert TrainConfig().sampler_config().corrector_after_stop == 0


class TestPretrain:
    def test_zero_steps_leave_the_init_untouched(self):
        spec, g = make_space("uniform", 3, 2)
        data = np.array([[0, 1], [2, 0]])
        params, losses = pretrain_score(
            data, TrainConfig(S=0, seed=3), spec, g, SCHED, n_buckets=4
        )
        fresh = init_score_params(spec, g, n_buckets=4, horizon=SCHED.horizon)
        assert params_digest(params) == params_digest(fresh)
        assert len(losses) == 0

    def test_loss_decreases_over_the_first_fifty_steps(self):
        """Windowed training loss drops within 50 steps on a sharply structured
        dataset; windows of 10 tame the noise from the per-step time draw."""
        spec, g = make_space("absorbing", 4, 4)
        data = np.array([[0, 1, 2, 0]])
        _, losses = pretrain_score(
            data, TrainConfig(S=50, N=16, lr=0.1, seed=0), spec, g, SCHED, n_buckets=4
        )
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_single_sequence_recovery_absorbing(self):
        """Pretraining on one absorbing-noise sequence concentrates the reverse
        process on that sequence: > 90% exact recoveries at dt = 1/64."""
        spec, g = make_space("absorbing", 4, 4)
        target = np.array([0, 1, 2, 0])
        params, _ = pretrain_score(
            target[None, :],
            TrainConfig(S=2000, N=32, lr=0.05, seed=0),
            spec,
            g,
            SCHED,
            n_buckets=8,
        )
        roll = sample_rollout(
            TabularScore(params, spec),
            g,
            SCHED,
            spec,
            SamplerConfig(dt=1 / 64),
            np.random.default_rng(123),
            2000,
        )
        recovery = np.mean(np.all(roll.finals == target, axis=1))
        assert recovery > 0.9

    def test_learned_ratios_match_the_exact_kernel(self):
        """On m=2, n=2 with a factorized dataset the learned table approaches
        the exact noised-marginal ratios at the bucket centers. The residual
        is bucket discretization, so the bar is loose."""
        spec, g = make_space("uniform", 2, 2)
        rows = np.array(
            [[0, 0], [0, 0], [0, 0], [0, 1], [0, 1], [0, 1], [1, 0], [1, 1]]
        )
        params, _ = pretrain_score(
            rows, TrainConfig(S=2000, N=32, lr=0.05, seed=7), spec, g, SCHED, n_buckets=4
        )
        marginals = np.array([[0.75, 0.25], [0.5, 0.5]])  # empirical per position
        errs = []
        for b in range(4):
            t_mid = (b + 0.5) * SCHED.horizon / 4
            kernel = transition_kernel(g, SCHED, 0.0, t_mid)
            for i in range(2):
                p_t = kernel @ marginals[i]
                for cur in range(2):
                    prop = 1 - cur
                    exact = p_t[prop] / p_t[cur]
                    got = np.exp(params.table[b, i, cur, prop])
                    errs.append(abs(got - exact) / exact)
        assert np.mean(errs) < 0.25

    def test_dataset_validation(self):
        spec, g = make_space("absorbing", 4, 3)
        cfg = TrainConfig(S=1)
        with pytest.raises(ConfigError):
            pretrain_score(np.zeros((0, 3), dtype=int), cfg, spec, g, SCHED)
        with pytest.raises(ConfigError):
            pretrain_score(np.array([0, 1, 2]), cfg, spec, g, SCHED)
        with pytest.raises(ConfigError):
            pretrain_score(np.zeros((2, 5), dtype=int), cfg, spec, g, SCHED)
        with pytest.raises(DomainError):
            pretrain_score(np.array([[0, 1, 9]]), cfg, spec, g, SCHED)
        with pytest.raises(DomainError):
            # clean data may not contain the mask token
            pretrain_score(np.array([[0, 1, 3]]), cfg, spec, g, SCHED)

    def test_callback_sees_every_step(self):
        spec, g = make_space("uniform", 3, 2)
        data = np.random.default_rng(1).integers(0, 3, size=(8, 2))
        seen = []
        pretrain_score(
            data,
            TrainConfig(S=7, N=4, lr=0.05, seed=2),
            spec,
            g,
            SCHED,
            n_buckets=4,
            callback=lambda step, loss, params: seen.append(step),
        )
        assert seen == list(range(1, 8))


class TestFinetune:
    def test_zero_iterations_return_the_input(self):
        pre, spec, g = small_pretrained()
        params, log = finetune_score(
            pre, motif_count([1]), loop_config(S=0), spec, g, SCHED
        )
        assert params_digest(params) == params_digest(pre)
        assert log.records == []

    def test_schedule_horizon_must_match(self):
        pre, spec, g = small_pretrained()
        bad = NoiseSchedule(sigma_min=0.3, sigma_max=1.5, horizon=2.0)
        with pytest.raises(ConfigError):
            finetune_score(pre, motif_count([1]), loop_config(), spec, g, bad)

    def test_snapshot_discipline(self):
        """Iteration s+1 samples from exactly the parameters left by iteration
        s: the recorded sampling digests chain through the callback params."""
        pre, spec, g = small_pretrained()
        after = []
        _, log = finetune_score(
            pre,
            motif_count([1]),
            loop_config(S=3),
            spec,
            g,
            SCHED,
            callback=lambda rec, params: after.append(params_digest(params)),
        )
        assert log.records[0].sampled_from == params_digest(pre)
        for prev, rec in zip(after, log.records[1:]):
            assert rec.sampled_from == prev

    def test_first_epoch_clip_fraction_is_zero(self):
        """Before any update the ratio is identically one, so nothing clips."""
        pre, spec, g = small_pretrained()
        _, log = finetune_score(pre, motif_count([1]), loop_config(S=1), spec, g, SCHED)
        assert log.records[0].epoch_clip_fracs[0] == 0.0

    def test_kl_anchor_pulls_the_policy_back(self):
        """A strong divergence penalty keeps the final path divergence well
        below the unanchored run's, all else equal."""
        pre, spec, g = small_pretrained()
        reward = motif_count([1])
        base = dict(S=6, seed=3)
        _, free = finetune_score(
            pre, reward, loop_config(alpha=0.0, **base), spec, g, SCHED
        )
        _, anchored = finetune_score(
            pre, reward, loop_config(alpha=10.0, **base), spec, g, SCHED
        )
        kl_free = [r.path_kl for r in free.records if not r.failure][-1]
        kl_anch = [r.path_kl for r in anchored.records if not r.failure][-1]
        assert kl_anch < kl_free

    def test_deterministic_given_the_seed(self):
        pre, spec, g = small_pretrained()
        reward = motif_count([1])
        a, log_a = finetune_score(pre, reward, loop_config(S=2), spec, g, SCHED)
        b, log_b = finetune_score(pre, reward, loop_config(S=2), spec, g, SCHED)
        assert params_digest(a) == params_digest(b)
        assert [r.mean_reward for r in log_a.records] == [
            r.mean_reward for r in log_b.records
        ]
        c, _ = finetune_score(pre, reward, loop_config(S=2, seed=9), spec, g, SCHED)
        assert params_digest(c) != params_digest(a)

    def test_failed_iterations_roll_back_and_carry_nan_metrics(self):
        """A step size hot enough to blow up the reversal aborts iterations:
        the record carries the failure reason and NaN metrics, and the next
        iteration samples from the rolled-back parameters."""
        pre, spec, g = small_pretrained()
        cfg = loop_config(S=4, K=3, N=8, G=4, M=2, lr=5.0, n_steps=16)
        _, log = finetune_score(pre, motif_count([1]), cfg, spec, g, SCHED)
        failed = [r for r in log.records if r.failure]
        assert failed
        for rec in failed:
            assert np.isnan(rec.mean_reward)
            assert np.isnan(rec.grad_norm)
        # rollback: the iteration after a failure samples from the same state
        for prev, cur in zip(log.records, log.records[1:]):
            if prev.failure:
                assert cur.sampled_from == prev.sampled_from

    def test_ppo_variant_and_gf_mode_run(self):
        pre, spec, g = small_pretrained()
        reward = motif_count([1])
        _, log_ppo = finetune_score(
            pre, reward, loop_config(S=2, variant="ppo", G=1), spec, g, SCHED
        )
        assert len(log_ppo.records) == 2
        _, log_gf = finetune_score(
            pre, reward, loop_config(S=2, gf_mode=True), spec, g, SCHED
        )
        assert len(log_gf.records) == 2

    def test_metrics_csv_round_trip(self, tmp_path):
        pre, spec, g = small_pretrained()
        _, log = finetune_score(pre, motif_count([1]), loop_config(S=2), spec, g, SCHED)
        out = tmp_path / "metrics.csv"
        log.to_csv(out)
        lines = out.read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 3
        assert lines[1].startswith("1,")

    def test_checkpoint_round_trip_evaluates_identically(self, tmp_path):
        pre, spec, g = small_pretrained()
        reward = motif_count([1])
        tuned, _ = finetune_score(pre, reward, loop_config(S=2), spec, g, SCHED)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, tuned, spec, g, SCHED)
        loaded, meta = load_checkpoint(path)
        assert meta["generator_kind"] == "uniform"
        eval_cfg = TrainConfig(n_steps=256, seed=0)
        a = evaluate_policy(tuned, reward, 64, eval_cfg, spec, g, SCHED)
        b = evaluate_policy(loaded, reward, 64, eval_cfg, spec, g, SCHED)
        assert np.array_equal(a.rewards, b.rewards)
        assert np.array_equal(a.samples, b.samples)


class TestEvaluatePolicy:
    def test_constant_reward_collapses_the_summary(self):
        pre, spec, g = small_pretrained()
        const = RewardFn("const", lambda X: np.full(X.shape[0], 3.0))
        summary = evaluate_policy(pre, const, 50, TrainConfig(seed=1), spec, g, SCHED)
        assert summary.mean == 3.0
        assert summary.median == 3.0
        assert summary.std == 0.0

    def test_same_seed_means_same_draws(self):
        pre, spec, g = small_pretrained()
        reward = motif_count([1])
        cfg = TrainConfig(seed=5)
        a = evaluate_policy(pre, reward, 32, cfg, spec, g, SCHED)
        b = evaluate_policy(pre, reward, 32, cfg, spec, g, SCHED)
        assert np.array_equal(a.samples, b.samples)
        c = evaluate_policy(pre, reward, 32, cfg, spec, g, SCHED, seed=6)
        assert not np.array_equal(a.samples, c.samples)

    def test_sample_count_validated(self):
        pre, spec, g = small_pretrained()
        with pytest.raises(ConfigError):
            evaluate_policy(pre, motif_count([1]), 0, TrainConfig(), spec, g, SCHED)


class TestGradientNormTrace:
    @staticmethod
    def synthetic_log(norms):
        log = RunLog(step_schedule="inv_sqrt")
        for s, gn in enumerate(norms, start=1):
            log.append(
                IterationRecord(
                    iteration=s,
                    mean_reward=0.0,
                    median_reward=0.0,
                    surrogate_loss=0.0,
                    path_kl=0.0,
                    grad_norm=float(gn),
                    clip_frac=0.0,
                    wall_ms=1.0,
                    sampled_from="",
                )
            )
        return log

    def test_requires_the_decaying_schedule(self):
        log = RunLog(step_schedule="constant")
        with pytest.raises(ConfigError):
            gradient_norm_trace(log)

    def test_requires_enough_iterations(self):
        log = self.synthetic_log(np.ones(10))
        with pytest.raises(DomainError):
            gradient_norm_trace(log)

    def test_flat_zero_reward_is_flagged_not_crashed(self):
        """With R identically zero every gradient vanishes; the trace reports
        an undefined slope instead of taking log of zero."""
        slope, defined = gradient_norm_trace(self.synthetic_log(np.zeros(20)))
        assert not defined
        assert np.isnan(slope)

    def test_decaying_norms_give_a_negative_slope(self):
        s = np.arange(1, 65)
        slope, defined = gradient_norm_trace(self.synthetic_log(s**-0.5))
        assert defined
        assert slope == pytest.approx(-1.0, abs=0.15)


class TestRunLog:
    def test_iterations_must_increase(self):
        log = TestGradientNormTrace.synthetic_log([1.0, 0.5])
        bad = IterationRecord(
            iteration=2,
            mean_reward=0.0,
            median_reward=0.0,
            surrogate_loss=0.0,
            path_kl=0.0,
            grad_norm=0.0,
            clip_frac=0.0,
            wall_ms=0.0,
            sampled_from="",
        )
        with pytest.raises(DomainError):
            log.append(bad)
