"""Training loops: denoising pretraining and clipped policy-gradient
fine-tuning of the tabular score model.

Fine-tuning alternates three phases per outer iteration: roll out a batch
of trajectories under a frozen snapshot of the current policy, turn rewards
into advantages (exponential-baseline or group-standardized), then take K
optimization epochs on the clipped surrogate plus an optional path
divergence penalty that anchors the policy to its pretrained start. The
snapshot is refreshed after the epochs, never during them.

Optimizers are deliberately minimal: adaptive moments for regular runs and
plain scaled descent with a 1/sqrt(s) step schedule for the runs whose
gradient-norm decay gets measured.
"""

import dataclasses
import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from diffpg.ctmc import NoiseSchedule, SequenceSpec, TokenGenerator, transition_kernel
from diffpg.errors import ConfigError, DomainError, StepSizeError
from diffpg.estimators import (
    SnisConfig,
    collect_rollout_batch,
    grpo_advantages,
    path_kl,
    surrogate_loss,
)
from diffpg.implicit import support_weights
from diffpg.rewards import RewardFn
from diffpg.sampling import SamplerConfig, sample_rollout
from diffpg.score import (
    ScoreParams,
    TabularScore,
    accumulate_onehot,
    init_score_params,
    zeros_like_table,
)

VARIANTS = ("ppo", "grpo")
STEP_SCHEDULES = ("constant", "inv_sqrt")


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for both training loops.

    The pretraining loop reads S as its step count and N as its minibatch
    size; the fine-tuning loop reads every field.
    """

    S: int = 40  # outer iterations (pretraining: gradient steps)
    K: int = 2  # surrogate epochs per iteration
    N: int = 8  # trajectories per iteration (pretraining: minibatch)
    G: int = 8  # group size for group-standardized advantages
    M: int = 4  # marginal-estimate proposals per neighbor state
    eps: float = 0.2  # clip width for the importance ratio
    alpha: float = 0.05  # weight of the path divergence penalty
    lr: float = 1e-4  # optimizer step size
    T: float = 1.0  # diffusion horizon
    T0: float = 1.0  # reverse-time stopping point
    n_steps: int = 64  # predictor grid size over [0, T0]
    variant: str = "ppo"  # advantage scheme
    gf_mode: bool = False  # corrector-tail sampling + support reweighting
    step_schedule: str = "constant"  # constant (adaptive) | inv_sqrt (plain)
    seed: int = 0
    snis_dt: float | None = None  # marginal-estimation window; None = sampler dt

    def __post_init__(self):
        if self.S < 0:
            raise ConfigError("S must be nonnegative")
        for name in ("K", "N", "G", "M", "n_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not 0 < self.T0 <= self.T:
            raise ConfigError(f"need 0 < T0 <= T, got T0={self.T0}, T={self.T}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.step_schedule not in STEP_SCHEDULES:
            raise ConfigError(f"step_schedule must be one of {STEP_SCHEDULES}")
        if self.variant == "grpo":
            if self.G < 2:
                raise ConfigError("group advantages need G >= 2")
            if self.N % self.G != 0:
                raise ConfigError("N must be a multiple of G for grouped advantages")
        if self.snis_dt is not None and not self.snis_dt > 0:
            raise ConfigError("snis_dt must be positive when given")

    @property
    def dt(self) -> float:
        return self.T0 / self.n_steps

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            dt=self.dt,
            t_stop=self.T0,
            corrector_after_stop=1 if self.gf_mode else 0,
        )

    def snis_config(self) -> SnisConfig:
        return SnisConfig(n_proposals=self.M, dt=self.snis_dt)


@dataclass
class IterationRecord:
    iteration: int
    mean_reward: float
    median_reward: float
    surrogate_loss: float
    path_kl: float
    grad_norm: float
    clip_frac: float
    wall_ms: float
    sampled_from: str  # digest of the parameters the batch was drawn under
    epoch_clip_fracs: tuple = ()  # clip fraction of every epoch, first included
    failure: str = ""  # nonempty when the iteration aborted and was skipped

CSV_COLUMNS = (
    "iter",
    "mean_reward",
    "median_reward",
    "surrogate_loss",
    "path_kl",
    "grad_norm",
    "clip_frac",
    "wall_ms",
)


@dataclass
class RunLog:
    """Per-iteration training records plus the schedule they ran under."""

    step_schedule: str = "constant"
    records: list = field(default_factory=list)

    def append(self, record: IterationRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise DomainError("iteration indices must increase")
        self.records.append(record)

    def to_csv(self, path) -> None:
        lines = [",".join(CSV_COLUMNS)]
        for r in self.records:
            lines.append(
                f"{r.iteration},{r.mean_reward:.10g},{r.median_reward:.10g},"
                f"{r.surrogate_loss:.10g},{r.path_kl:.10g},{r.grad_norm:.10g},"
                f"{r.clip_frac:.10g},{r.wall_ms:.10g}"
            )
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


def params_digest(params: ScoreParams) -> str:
    return hashlib.sha256(params.table.tobytes()).hexdigest()[:16]


class _Adam:
    """Adaptive-moment descent on the trainable table entries."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params: ScoreParams, grad: np.ndarray) -> ScoreParams:
        mask = params.trainable_mask()
        g = np.where(mask, grad, 0.0)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        delta = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params.with_table(
            np.where(mask, params.table - delta, params.table)
        )


class _ScaledDescent:
    """Plain descent with step lr * min(1, 1/sqrt(s)), s the outer iteration."""

    def __init__(self, lr):
        self.lr = lr
        self.s = 0

    def start_iteration(self):
        self.s += 1

    def step(self, params: ScoreParams, grad: np.ndarray) -> ScoreParams:
        mask = params.trainable_mask()
        beta = min(1.0, 1.0 / np.sqrt(self.s))
        return params.with_table(
            np.where(mask, params.table - self.lr * beta * grad, params.table)
        )


class _EmaBaseline:
    """Bias-corrected exponential moving average of the mean reward."""

    def __init__(self, decay=0.99):
        self.decay = decay
        self.acc = 0.0
        self.weight = 0.0

    def update(self, value: float) -> float:
        self.acc = self.decay * self.acc + (1 - self.decay) * value
        self.weight = self.decay * self.weight + (1 - self.decay)
        return self.acc / self.weight


def _assign_advantages(batch, cfg: TrainConfig, baseline: _EmaBaseline) -> None:
    if cfg.variant == "ppo":
        batch.advantages = batch.rewards - baseline.update(
            float(batch.rewards.mean())
        )
    else:
        groups = batch.rewards.reshape(-1, cfg.G)
        adv = np.empty_like(groups)
        degenerate = np.zeros(groups.shape[0], dtype=bool)
        for j, row in enumerate(groups):
            adv[j], degenerate[j] = grpo_advantages(row)
        batch.advantages = adv.reshape(-1)
        batch.group_size = cfg.G
        batch.degenerate_groups = degenerate


def _gf_reweight(batch, score: TabularScore, t_fwd_terminal: float) -> None:
    """Scale each sample's advantage by the support weight of its terminal
    state, the cheap form of the implicit-gradient correction.

    Relative state masses come from the model's own pair ratios at the
    terminal time, anchored at the first distinct state.
    """
    states, inverse = np.unique(batch.samples, axis=0, return_inverse=True)
    k = states.shape[0]
    if k == 1:
        return  # single visited state: the weight is identically 1
    anchor = np.broadcast_to(states[0], states.shape)
    log_rel = score.pair_log_ratio(anchor, states, t_fwd_terminal)
    log_rel = log_rel - log_rel.max()
    pi = np.exp(log_rel)
    pi /= pi.sum()
    z = support_weights(pi, k)
    batch.advantages = batch.advantages * z[inverse]
    # the reweighting deliberately un-centers grouped advantages
    batch.group_size = None


def finetune_score(
    pre: ScoreParams,
    reward: RewardFn,
    cfg: TrainConfig,
    spec: SequenceSpec,
    g: TokenGenerator,
    sched: NoiseSchedule,
    callback=None,
):
    """Clipped policy-gradient fine-tuning loop.

    Per outer iteration: draw N trajectories from the frozen old policy,
    convert rewards to advantages, run K epochs of descent on the clipped
    surrogate plus alpha times the path divergence from ``pre``, then
    refresh the old policy. Iterations whose sampling or marginal
    estimation degenerates are logged as failures and skipped; the
    parameters roll back to the iteration start.

    Returns (params, RunLog). ``callback``, when given, is invoked as
    callback(record, params) after every iteration.
    """
    if abs(sched.horizon - cfg.T) > 1e-12:
        raise ConfigError(
            f"schedule horizon {sched.horizon} does not match cfg.T {cfg.T}"
        )
    rng = np.random.default_rng(cfg.seed)
    params = pre.copy()
    log = RunLog(step_schedule=cfg.step_schedule)
    baseline = _EmaBaseline()
    if cfg.step_schedule == "constant":
        opt = _Adam(pre.table.shape, cfg.lr)
    else:
        opt = _ScaledDescent(cfg.lr)
    t_fwd_terminal = cfg.T - cfg.T0

    for s in range(1, cfg.S + 1):
        tick = time.perf_counter()
        old = params
        old_digest = params_digest(old)
        if isinstance(opt, _ScaledDescent):
            opt.start_iteration()
        try:
            provider = TabularScore(old, spec)
            batch = collect_rollout_batch(
                provider, old, g, sched, spec, cfg.sampler_config(),
                cfg.snis_config(), reward, rng, cfg.N,
            )
            _assign_advantages(batch, cfg, baseline)
            if cfg.gf_mode:
                _gf_reweight(batch, provider, t_fwd_terminal)
            epoch_clips = []
            loss = kl_val = np.nan
            grad_norm = np.nan
            for _ in range(cfg.K):
                loss, grad, info = surrogate_loss(batch, params, eps=cfg.eps)
                total = grad
                if cfg.alpha > 0:
                    kl_val, kl_grad, infinite = path_kl(
                        params, pre, batch.rollout, g, sched, with_gradient=True
                    )
                    if infinite:
                        raise DomainError(
                            "path divergence from the pretrained policy is infinite"
                        )
                    total = grad + cfg.alpha * kl_grad
                epoch_clips.append(info["clip_frac"])
                mask = old.trainable_mask()
                grad_norm = float(np.linalg.norm(np.where(mask, total, 0.0)))
                params = opt.step(params, total)
            if cfg.alpha == 0:
                kl_val = path_kl(params, pre, batch.rollout, g, sched)
        except (StepSizeError, DomainError) as err:
            params = old
            record = IterationRecord(
                iteration=s, mean_reward=np.nan, median_reward=np.nan,
                surrogate_loss=np.nan, path_kl=np.nan, grad_norm=np.nan,
                clip_frac=np.nan,
                wall_ms=1e3 * (time.perf_counter() - tick),
                sampled_from=old_digest, failure=str(err),
            )
            log.append(record)
            if callback is not None:
                callback(record, params)
            continue
        record = IterationRecord(
            iteration=s,
            mean_reward=float(batch.rewards.mean()),
            median_reward=float(np.median(batch.rewards)),
            surrogate_loss=float(loss),
            path_kl=float(kl_val),
            grad_norm=grad_norm,
            clip_frac=float(epoch_clips[-1]),
            wall_ms=1e3 * (time.perf_counter() - tick),
            sampled_from=old_digest,
            epoch_clip_fracs=tuple(epoch_clips),
        )
        log.append(record)
        if callback is not None:
            callback(record, params)
    return params, log


@dataclass(frozen=True)
class EvalSummary:
    mean: float
    median: float
    std: float
    rewards: np.ndarray
    samples: np.ndarray  # (n_samples, length) terminal sequences


def evaluate_policy(
    params: ScoreParams,
    reward: RewardFn,
    n_samples: int,
    cfg: TrainConfig,
    spec: SequenceSpec,
    g: TokenGenerator,
    sched: NoiseSchedule,
    seed=None,
) -> EvalSummary:
    """Reward statistics of fresh samples from the policy.

    Deterministic given the seed (cfg.seed unless overridden); the median
    follows the midpoint rule on even counts.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be at least 1")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    roll = sample_rollout(
        TabularScore(params, spec), g, sched, spec, cfg.sampler_config(),
        rng, n_samples,
    )
    finals = roll.finals
    rewards = reward(finals)
    return EvalSummary(
        mean=float(rewards.mean()),
        median=float(np.median(rewards)),
        std=float(rewards.std()),
        rewards=rewards,
        samples=finals,
    )


def gradient_norm_trace(log: RunLog):
    """Slope of the log-log fit of the running-average squared gradient norm
    against the iteration index.

    Requires at least 16 completed iterations from an inv_sqrt-schedule run.
    Returns (slope, defined); an identically zero trace (for instance a
    reward that is zero everywhere) has no slope and comes back flagged.
    """
    if log.step_schedule != "inv_sqrt":
        raise ConfigError(
            "gradient-norm decay is only meaningful for the inv_sqrt schedule"
        )
    complete = [r for r in log.records if not r.failure]
    if len(complete) < 16:
        raise DomainError(f"need at least 16 iterations, got {len(complete)}")
    sq = np.array([r.grad_norm**2 for r in complete])
    running = np.cumsum(sq) / np.arange(1, sq.size + 1)
    if np.all(running == 0.0):
        return np.nan, False
    keep = running > 0
    s_axis = np.arange(1, sq.size + 1)[keep]
    slope = np.polyfit(np.log(s_axis), np.log(running[keep]), 1)[0]
    return float(slope), True


def pretrain_score(
    dataset,
    cfg: TrainConfig,
    spec: SequenceSpec,
    g: TokenGenerator,
    sched: NoiseSchedule,
    n_buckets: int = 16,
    init_scale: float = 0.0,
    callback=None,
):
    """Denoising pretraining of a fresh score table on example sequences.

    Each step noises a minibatch of data rows to a shared random time and
    regresses the table's rate ratios toward the per-position posterior
    ratios of the noising kernel, under a Bregman objective that is zero
    exactly at the true ratios. Runs cfg.S steps of adaptive descent with
    minibatch cfg.N and returns (params, per-step losses).
    """
    data = np.asarray(dataset, dtype=np.int64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ConfigError("dataset must be a nonempty (D, length) array")
    if data.shape[1] != spec.length:
        raise ConfigError(
            f"dataset length {data.shape[1]} does not match spec {spec.length}"
        )
    if np.any(data < 0) or np.any(data >= spec.vocab.size):
        raise DomainError("dataset token outside the vocabulary")
    if g.kind == "absorbing" and np.any(data == spec.vocab.mask_index):
        raise DomainError("dataset must not contain the mask token")
    if abs(sched.horizon - cfg.T) > 1e-12:
        raise ConfigError(
            f"schedule horizon {sched.horizon} does not match cfg.T {cfg.T}"
        )
    rng = np.random.default_rng(cfg.seed)
    params = init_score_params(spec, g, n_buckets=n_buckets, horizon=cfg.T,
                               init_scale=init_scale, rng=rng)
    opt = _Adam(params.table.shape, cfg.lr)
    losses = np.zeros(cfg.S)
    n = spec.length
    m = spec.vocab.size
    i_idx = np.arange(n)[None, :]
    live_base = g.base > 0  # slot (x, a) matters iff the jump a -> x has rate
    np.fill_diagonal(live_base, False)

    for step in range(cfg.S):
        rows = data[rng.integers(0, data.shape[0], size=cfg.N)]
        t = float(rng.uniform(0.0, cfg.T))
        sig = float(sched.sigma(t))
        K = transition_kernel(g, sched, 0.0, t)  # [target, source] over [0, t]
        noised = np.empty_like(rows)
        for i in range(n):
            cum = np.cumsum(K[:, rows[:, i]], axis=0)  # (m, N)
            u = rng.random(cfg.N)
            noised[:, i] = (u[None, :] < cum).argmax(axis=0)
        b = int(params.bucket_index(t))
        # posterior ratio for rewriting position i to token a given the clean
        # token: K[a, clean] / K[current, clean], per sample
        k_cur = K[noised, rows]  # (N, n)
        ratio = K[:, rows].transpose(1, 2, 0) / k_cur[:, :, None]  # (N, n, m)
        w = sig * g.base[noised, :]  # rate of the jump a -> current
        live = live_base[noised, :] & params.trainable_mask()[b][i_idx, noised, :]
        log_s = np.where(live, params.table[b, i_idx, noised, :], 0.0)
        s_val = np.exp(log_s)
        r_log = np.where(ratio > 0, np.log(np.where(ratio > 0, ratio, 1.0)), 0.0)
        # Bregman integrand, nonnegative with its zero exactly at s = ratio
        integrand = s_val - ratio * log_s + ratio * (r_log - 1.0)
        losses[step] = float(np.sum(np.where(live, w * integrand, 0.0)) / cfg.N)
        grad_w = np.where(live, w * (s_val - ratio), 0.0) / cfg.N
        grad = zeros_like_table(params)
        accumulate_onehot(
            grad,
            b,
            np.broadcast_to(np.arange(n)[None, :, None], grad_w.shape).reshape(-1),
            np.broadcast_to(noised[:, :, None], grad_w.shape).reshape(-1),
            np.broadcast_to(np.arange(m)[None, None, :], grad_w.shape).reshape(-1),
            grad_w.reshape(-1),
        )
        params = opt.step(params, grad)
        if callback is not None:
            callback(step, losses[step], params)
    return params, losses
