"""Gradient estimators, surrogate losses, and regularizers.

The policy-gradient pipeline built here works entirely from samples:
marginal probabilities of neighbor states are estimated by self-normalized
importance sampling over shared noising proposals (one-step reverse
conditionals reweighted by score ratios against the proposal kernel, which
collapses to a harmonic mean when proposals come from the model posterior),
then combined with rewards into score-function and importance-sampling
gradient estimates, clipped trust-region surrogates, and a discretized
path-KL penalty toward the pretrained policy.

Marginal estimation is staggered in time: proposals noise the target state
from its own time t to t + dt, while conditionals and ratio weights are
evaluated at t + dt. The reverse conditional then undoes exactly the drift
the proposal introduced, so the estimate targets the time-t marginal with
only a second-order step-size error instead of a first-order one.

Sign convention: every "loss" here is minimized, and every gradient array is
the gradient of that loss with respect to the score table. Lowering the
clipped surrogate raises expected reward: good samples (positive advantage)
have their outflow log-rates pushed down so the policy keeps them, bad
samples the reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffpg.ctmc import NoiseSchedule, SequenceSpec, TokenGenerator
from diffpg.errors import ConfigError, DomainError
from diffpg.rewards import RewardFn
from diffpg.sampling import (
    Rollout,
    SamplerConfig,
    batch_forward_rates,
    batch_reverse_rates,
    forward_leap_step,
    sample_rollout,
)
from diffpg.score import ScoreParams, TabularScore, accumulate_onehot, zeros_like_table


@dataclass(frozen=True)
class SnisConfig:
    """Marginal-estimation knobs."""

    n_proposals: int = 4  # proposals per neighbor state
    dt: float | None = None  # proposal step size; None reuses the sampler dt
    retry_cap: int = 8  # redraws allowed per zero-probability conditional

    def __post_init__(self) -> None:
        if self.n_proposals < 1:
            raise ConfigError("n_proposals must be at least 1")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("snis dt must be positive")
        if self.retry_cap < 1:
            raise ConfigError("retry_cap must be at least 1")


@dataclass(frozen=True)
class SnisEstimate:
    """One self-normalized marginal estimate and the draws behind it."""

    value: float
    n_proposals: int
    conditionals: np.ndarray
    weights: np.ndarray | None = None  # None for posterior-proposal draws


def snis_marginal(conditionals: np.ndarray) -> SnisEstimate:
    """Self-normalized marginal estimate from one-step conditionals.

    The estimate is the harmonic mean: reciprocals of the conditionals
    average to the reciprocal of the marginal when proposals come from the
    one-step noising kernel at the target state.
    """
    cond = np.asarray(conditionals, dtype=np.float64)
    if cond.ndim != 1 or cond.size < 1:
        raise DomainError("conditionals must be a nonempty 1-d array")
    if np.any(cond <= 0):
        raise DomainError("conditionals must be positive")
    value = 1.0 / np.mean(1.0 / cond)
    return SnisEstimate(value=float(value), n_proposals=cond.size, conditionals=cond)


def snis_weighted(conditionals: np.ndarray, weights: np.ndarray) -> SnisEstimate:
    """Self-normalized marginal estimate with explicit proposal weights.

    ``weights`` carries the unnormalized importance weight of each draw:
    the modeled probability ratio of the proposal against the target state,
    divided by the probability the proposal kernel assigned to the draw.
    When proposals come from the model posterior the weights are
    proportional to the reciprocals of the conditionals and this reduces to
    ``snis_marginal``.
    """
    cond = np.asarray(conditionals, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if cond.shape != w.shape or cond.ndim != 1 or cond.size < 1:
        raise DomainError("conditionals and weights must be matching 1-d arrays")
    if np.any(cond < 0) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError("conditionals and weights must be nonnegative finite")
    total = w.sum()
    if total <= 0:
        raise DomainError("every proposal weight vanished; draws are unusable")
    value = float(np.dot(cond, w) / total)
    return SnisEstimate(
        value=value, n_proposals=cond.size, conditionals=cond, weights=w
    )


def _harmonic(cond: np.ndarray) -> np.ndarray:
    """Harmonic mean along the last axis."""
    return 1.0 / np.mean(1.0 / cond, axis=-1)


def _weighted_q(
    cond: np.ndarray, log_nu: np.ndarray, kf: np.ndarray
) -> np.ndarray:
    """Batched self-normalized estimate along the last axis.

    ``log_nu`` holds modeled log-ratios of proposal against target state and
    may be -inf for unreachable proposals; the estimate is invariant to a
    per-row shift of log_nu, which is used here for overflow safety.
    """
    shift = np.max(log_nu, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    w = np.exp(log_nu - shift) / kf
    denom = w.sum(axis=-1)
    out = np.full(denom.shape, np.nan)
    ok = denom > 0
    num = (cond * w).sum(axis=-1)
    np.divide(num, denom, out=out, where=ok)
    return out


def one_step_reverse_prob(
    score,
    g: TokenGenerator,
    sched: NoiseSchedule,
    t_fwd: float,
    dt: float,
    Z: np.ndarray,
    Y: np.ndarray,
) -> np.ndarray:
    """Probability that one reversal tau-leap at Z lands exactly on Y.

    Z and Y are (K, n); the result is (K,). Positions factorize: each either
    stays (1 - dt * total outflow) or jumps to the target token
    (dt * rate).
    """
    Z = np.asarray(Z, dtype=np.int64)
    Y = np.asarray(Y, dtype=np.int64)
    ratios = np.asarray(score.ratios_batch(Z, t_fwd), dtype=np.float64)
    rates = batch_reverse_rates(g, sched, t_fwd, Z, ratios)
    jump = dt * rates
    total = jump.sum(axis=2)
    if np.any(total > 1.0):
        raise DomainError(
            f"one-step probability invalid: dt={dt} gives total {total.max():.3g} > 1"
        )
    move = np.take_along_axis(jump, Y[:, :, None], axis=2)[:, :, 0]
    per_pos = np.where(Z == Y, 1.0 - total, move)
    return per_pos.prod(axis=1)


def one_step_forward_prob(
    g: TokenGenerator,
    sched: NoiseSchedule,
    t_fwd: float,
    dt: float,
    Y: np.ndarray,
    Z: np.ndarray,
) -> np.ndarray:
    """Probability that one noising tau-leap at Y lands exactly on Z, (K,)."""
    Y = np.asarray(Y, dtype=np.int64)
    Z = np.asarray(Z, dtype=np.int64)
    rates = batch_forward_rates(g, sched, t_fwd, Y)
    jump = dt * rates
    total = jump.sum(axis=2)
    if np.any(total > 1.0):
        raise DomainError(
            f"one-step probability invalid: dt={dt} gives total {total.max():.3g} > 1"
        )
    move = np.take_along_axis(jump, Z[:, :, None], axis=2)[:, :, 0]
    per_pos = np.where(Y == Z, 1.0 - total, move)
    return per_pos.prod(axis=1)


def snis_eval_time(sched: NoiseSchedule, t_fwd: float, dt: float) -> float:
    """Forward time at which conditionals and ratio weights are evaluated.

    One proposal step ahead of the target state's own time, capped at the
    horizon so late-time estimates stay inside the schedule's domain.
    """
    return min(t_fwd + dt, sched.horizon)


def draw_snis_proposals(
    y: np.ndarray,
    t_rev: float,
    score,
    g: TokenGenerator,
    sched: NoiseSchedule,
    n_proposals: int,
    rng: np.random.Generator,
    dt: float = 0.01,
    retry_cap: int = 8,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Draw marginal-estimation proposals for one state y at reverse time t.

    Proposals z_i are one forward-noising tau-leap from y at the matching
    forward time (score-free, so the same draws serve any policy). Each
    conditional is the probability that one reversal leap at z_i recovers y,
    with rates read one proposal step later so the estimate targets y's own
    time. Draw sets whose estimate degenerates to zero are redrawn up to
    ``retry_cap`` times, then rejected.

    Returns (proposals (M, n), conditionals (M,), proposal probabilities
    (M,), modeled ratios (M,)); feed the latter pair through the weight
    quotient or call ``snis_weighted`` with weights = ratios / probabilities.
    """
    y = np.asarray(y, dtype=np.int64)
    t_fwd = sched.horizon - t_rev
    t_eval = snis_eval_time(sched, t_fwd, dt)
    Y = np.tile(y, (n_proposals, 1))

    def attempt():
        Z = forward_leap_step(g, sched, t_fwd, dt, Y, rng)
        cond = one_step_reverse_prob(score, g, sched, t_eval, dt, Z, Y)
        kf = one_step_forward_prob(g, sched, t_fwd, dt, Y, Z)
        log_nu = score.pair_log_ratio(Y, Z, t_eval)
        return Z, cond, kf, log_nu

    for _ in range(retry_cap + 1):
        Z, cond, kf, log_nu = attempt()
        q = _weighted_q(cond[None, :], log_nu[None, :], kf[None, :])[0]
        if np.isfinite(q) and q > 0:
            with np.errstate(over="raise"):
                nu = np.exp(log_nu)
            return Z, cond, kf, nu
    raise DomainError(
        "marginal estimate degenerated to zero after retries; "
        "the score assigns this state no inflow"
    )


@dataclass
class RolloutBatch:
    """Everything one fine-tuning iteration needs from its rollout.

    Neighbor axes: entry [b, i, a] refers to the state obtained from sample
    b by rewriting position i to token a. Self slots (a == samples[b, i])
    and pairs the generator cannot realize are masked out of every sum.
    ``proposals`` holds the shared noising draws (B, n, m, M, n),
    ``forward_probs`` the probability the proposal kernel gave each draw,
    and ``cond_old``/``log_nu_old`` the reverse conditionals and modeled
    log-ratios under the rollout policy, so marginal estimates under any
    later policy reuse the same draws.
    """

    spec: SequenceSpec
    g: TokenGenerator
    sched: NoiseSchedule
    samples: np.ndarray  # (B, n) terminal sequences
    rewards: np.ndarray  # (B,)
    advantages: np.ndarray  # (B,) zeros until the trainer assigns them
    old_params: ScoreParams  # frozen snapshot of the rollout policy
    proposals: np.ndarray  # (B, n, m, M, n)
    forward_probs: np.ndarray  # (B, n, m, M), policy-independent
    cond_old: np.ndarray  # (B, n, m, M)
    log_nu_old: np.ndarray  # (B, n, m, M)
    q_old: np.ndarray  # (B, n, m) self-normalized marginal estimates
    t_rev: float  # reverse time of the samples
    snis_dt: float
    rollout: Rollout  # full paths, kept for the path-KL term
    group_size: int | None = None  # set in grouped-advantage mode
    degenerate_groups: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def batch(self) -> int:
        return self.samples.shape[0]

    @property
    def t_fwd(self) -> float:
        return self.sched.horizon - self.t_rev

    @property
    def snis_t_eval(self) -> float:
        return snis_eval_time(self.sched, self.t_fwd, self.snis_dt)

    def pair_mask(self) -> np.ndarray:
        """(B, n, m) mask of neighbor pairs that carry gradient.

        Excludes self slots, pinned score entries, and jumps the reversal
        cannot make (zero forward base rate).
        """
        B, n = self.samples.shape
        m = self.spec.vocab.size
        mask = np.ones((B, n, m), dtype=bool)
        b_idx = np.arange(B)[:, None]
        i_idx = np.arange(n)[None, :]
        mask[b_idx, i_idx, self.samples] = False
        bucket = int(self.old_params.bucket_index(self.t_fwd))
        live = np.isfinite(self.old_params.table[bucket])  # (n, m, m)
        mask &= live[i_idx, self.samples, :]
        mask &= self.g.base[self.samples, :] > 0
        return mask

    def _flat_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (anchor, proposal) sequence pairs, both (B*n*m*M, n)."""
        B, n = self.samples.shape
        m = self.spec.vocab.size
        M = self.proposals.shape[3]
        Z = self.proposals.reshape(B * n * m * M, n)
        Y = self._neighbor_states().reshape(B, n, m, 1, n)
        Y = np.broadcast_to(Y, (B, n, m, M, n)).reshape(B * n * m * M, n)
        return Y, Z

    def cond_under(self, score) -> np.ndarray:
        """Reverse conditionals of the stored proposals under another score."""
        B, n = self.samples.shape
        m = self.spec.vocab.size
        M = self.proposals.shape[3]
        Y, Z = self._flat_pairs()
        cond = one_step_reverse_prob(
            score, self.g, self.sched, self.snis_t_eval, self.snis_dt, Z, Y
        )
        return cond.reshape(B, n, m, M)

    def nu_under(self, score) -> np.ndarray:
        """Modeled log density ratios log(mu(z)/mu(y)) of the stored draws."""
        B, n = self.samples.shape
        m = self.spec.vocab.size
        M = self.proposals.shape[3]
        Y, Z = self._flat_pairs()
        return score.pair_log_ratio(Y, Z, self.snis_t_eval).reshape(B, n, m, M)

    def q_under(self, score) -> np.ndarray:
        """Marginal estimates under another score from the shared draws."""
        q = _weighted_q(self.cond_under(score), self.nu_under(score),
                        self.forward_probs)
        if not np.all(q > 0):
            raise DomainError("shared proposals degenerate under this policy")
        return q

    def _neighbor_states(self) -> np.ndarray:
        """(B, n, m, n) tensor: neighbor (b, i, a) as a full sequence."""
        B, n = self.samples.shape
        m = self.spec.vocab.size
        Y = np.broadcast_to(self.samples[:, None, None, :], (B, n, m, n)).copy()
        a_grid = np.broadcast_to(np.arange(m)[None, None, :], (B, n, m))
        b_idx = np.arange(B)[:, None, None]
        i_idx = np.arange(n)[None, :, None]
        Y[b_idx, i_idx, np.arange(m)[None, None, :], i_idx] = a_grid
        return Y

    def validate(self) -> None:
        B = self.batch
        for name in ("rewards", "advantages"):
            arr = getattr(self, name)
            if arr.shape != (B,) or not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} must be {B} finite values")
        if self.group_size is not None:
            adv = self.advantages.reshape(-1, self.group_size)
            if np.any(np.abs(adv.mean(axis=1)) > 1e-9):
                raise DomainError("grouped advantages must have zero mean per group")


def collect_rollout_batch(
    score,
    params: ScoreParams,
    g: TokenGenerator,
    sched: NoiseSchedule,
    spec: SequenceSpec,
    sampler_cfg: SamplerConfig,
    snis_cfg: SnisConfig,
    reward_fn: RewardFn,
    rng: np.random.Generator,
    n_samples: int,
    prefix: np.ndarray | None = None,
) -> RolloutBatch:
    """Sample trajectories under the current policy and precompute the
    shared marginal-estimation draws for all neighbor states.

    Advantages are left at zero; the trainer overwrites them once it knows
    its baseline or grouping.
    """
    roll = sample_rollout(score, g, sched, spec, sampler_cfg, rng, n_samples, prefix)
    X = roll.finals
    rewards = reward_fn(X)
    B, n = X.shape
    m = spec.vocab.size
    M = snis_cfg.n_proposals
    dt = snis_cfg.dt if snis_cfg.dt is not None else (roll.dt or sampler_cfg.dt)
    t_rev = roll.t_stop
    t_fwd = sched.horizon - t_rev

    t_eval = snis_eval_time(sched, t_fwd, dt)

    batch = RolloutBatch(
        spec=spec,
        g=g,
        sched=sched,
        samples=X,
        rewards=rewards,
        advantages=np.zeros(B),
        old_params=params.copy(),
        proposals=np.zeros((B, n, m, M, n), dtype=np.int64),
        forward_probs=np.ones((B, n, m, M)),
        cond_old=np.ones((B, n, m, M)),
        log_nu_old=np.zeros((B, n, m, M)),
        q_old=np.ones((B, n, m)),
        t_rev=t_rev,
        snis_dt=dt,
        rollout=roll,
    )
    Y = batch._neighbor_states()  # (B, n, m, n)
    Y_flat = np.broadcast_to(Y[:, :, :, None, :], (B, n, m, M, n)).reshape(-1, n)

    def draw(rows: np.ndarray) -> tuple[np.ndarray, ...]:
        Z = forward_leap_step(g, sched, t_fwd, dt, rows, rng)
        kf = one_step_forward_prob(g, sched, t_fwd, dt, rows, Z)
        cond = one_step_reverse_prob(score, g, sched, t_eval, dt, Z, rows)
        log_nu = score.pair_log_ratio(rows, Z, t_eval)
        return Z, kf, cond, log_nu

    Z, kf, cond, log_nu = draw(Y_flat)
    R = B * n * m
    q = _weighted_q(cond.reshape(R, M), log_nu.reshape(R, M), kf.reshape(R, M))
    for _ in range(snis_cfg.retry_cap):
        bad = ~(q > 0)  # catches zeros and NaN markers alike
        if not np.any(bad):
            break
        sel = np.repeat(bad, M)
        Z[sel], kf[sel], cond[sel], log_nu[sel] = draw(Y_flat[sel])
        q[bad] = _weighted_q(
            cond.reshape(R, M)[bad], log_nu.reshape(R, M)[bad],
            kf.reshape(R, M)[bad],
        )
    if not np.all(q > 0):
        raise DomainError("degenerate marginal estimate survived the retry cap")
    batch.proposals = Z.reshape(B, n, m, M, n)
    batch.forward_probs = kf.reshape(B, n, m, M)
    batch.cond_old = cond.reshape(B, n, m, M)
    batch.log_nu_old = log_nu.reshape(B, n, m, M)
    batch.q_old = q.reshape(B, n, m)
    return batch


def _gather_log_scores(params: ScoreParams, batch: RolloutBatch) -> np.ndarray:
    """(B, n, m) log-score entries for every neighbor pair of the batch."""
    bucket = int(params.bucket_index(batch.t_fwd))
    n = batch.samples.shape[1]
    return params.table[bucket, np.arange(n)[None, :], batch.samples, :]


def _accumulate_pairs(
    params: ScoreParams, batch: RolloutBatch, weights: np.ndarray
) -> np.ndarray:
    """Scatter per-pair weights into a table-shaped gradient."""
    grad = zeros_like_table(params)
    bucket = int(params.bucket_index(batch.t_fwd))
    B, n = batch.samples.shape
    m = batch.spec.vocab.size
    pos = np.broadcast_to(np.arange(n)[None, :, None], (B, n, m))
    cur = np.broadcast_to(batch.samples[:, :, None], (B, n, m))
    prop = np.broadcast_to(np.arange(m)[None, None, :], (B, n, m))
    accumulate_onehot(
        grad, bucket, pos.reshape(-1), cur.reshape(-1), prop.reshape(-1),
        weights.reshape(-1),
    )
    return grad


def reinforce_gradient(batch: RolloutBatch, params: ScoreParams) -> np.ndarray:
    """Score-function gradient estimate of the negative expected reward.

    Each sample x contributes R(x) times the estimated marginal of every
    neighbor at the one-hot coordinate of that pair's log-score; descent on
    the returned array raises reward once rewards are centered.
    """
    w = batch.rewards[:, None, None] * batch.q_old * batch.pair_mask()
    return _accumulate_pairs(params, batch, w / batch.batch)


def is_ratio(
    s_new: float, s_old: float, snis_new_y: float, snis_old_y: float
) -> float:
    """Per-pair importance ratio: (q_new(y)/q_old(y)) * (s_old/s_new)."""
    vals = np.array([s_new, s_old, snis_new_y, snis_old_y], dtype=np.float64)
    if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
        raise DomainError("importance ratio needs positive finite inputs")
    return (snis_new_y / snis_old_y) * (s_old / s_new)


def importance_ratios(
    batch: RolloutBatch, params_new: ScoreParams
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized importance ratios for all neighbor pairs.

    Returns (u, q_new), both (B, n, m); entries off the pair mask are 1 and
    q_old respectively so downstream code can multiply blindly.
    """
    provider = TabularScore(params_new, batch.spec)
    q_new = batch.q_under(provider)
    mask = batch.pair_mask()
    log_new = _gather_log_scores(params_new, batch)
    log_old = _gather_log_scores(batch.old_params, batch)
    # s_old / s_new via exp of the log difference; masked entries forced to 1
    diff = np.where(mask, log_old - log_new, 0.0)
    u = np.where(mask, q_new / batch.q_old, 1.0) * np.exp(diff)
    return u, np.where(mask, q_new, batch.q_old)


def is_gradient(
    batch: RolloutBatch,
    params_new: ScoreParams,
    weight_mode: str = "as_printed",
) -> np.ndarray:
    """Off-policy gradient estimate under importance reweighting.

    ``as_printed`` weights each pair by the new-policy marginal estimate
    times the ratio u (so the marginal appears squared over q_old);
    ``single_factor`` weights by the old-policy marginal instead, leaving
    the marginal to appear exactly once through u. Both reduce to the
    on-policy estimator at equal parameters.
    """
    if weight_mode not in ("as_printed", "single_factor"):
        raise ConfigError(f"unknown weight_mode {weight_mode!r}")
    u, q_new = importance_ratios(batch, params_new)
    outer = q_new if weight_mode == "as_printed" else batch.q_old
    w = batch.rewards[:, None, None] * outer * u * batch.pair_mask()
    return _accumulate_pairs(params_new, batch, w / batch.batch)


def clipped_weight_ppo(u, advantage, eps: float):
    """Pessimistic clipped coefficient min(clip(u, 1-eps, 1+eps) * A, u * A).

    Scalar or array inputs broadcast elementwise.
    """
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(advantage, dtype=np.float64)
    out = np.minimum(np.clip(u, 1.0 - eps, 1.0 + eps) * a, u * a)
    return float(out) if out.ndim == 0 else out


def grpo_advantages(rewards: np.ndarray) -> tuple[np.ndarray, bool]:
    """Group-standardized advantages (population std).

    A group with zero spread gets all-zero advantages and a degenerate flag
    so the caller can drop it from the surrogate.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise DomainError("a reward group needs at least 2 entries")
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r), True
    return (r - r.mean()) / std, False


def surrogate_loss(
    batch: RolloutBatch,
    params_new: ScoreParams,
    eps: float = 0.2,
    weight_mode: str = "as_printed",
) -> tuple[float, np.ndarray, dict]:
    """Clipped trust-region surrogate and its gradient in the score table.

    loss = mean over samples of sum over neighbor pairs of
    w_{x,y} * log s_new(x -> y), where w freezes the marginal estimates and
    importance ratios (no gradient flows through them) and applies the
    pessimistic clip to u times the advantage. Minimizing it raises reward.

    Returns (loss, gradient, info) where info carries the clip fraction
    (pairs whose ratio left [1-eps, 1+eps]) and the mean ratio.
    """
    if weight_mode not in ("as_printed", "single_factor"):
        raise ConfigError(f"unknown weight_mode {weight_mode!r}")
    batch.validate()
    u, q_new = importance_ratios(batch, params_new)
    mask = batch.pair_mask()
    outer = q_new if weight_mode == "as_printed" else batch.q_old
    core = clipped_weight_ppo(u, batch.advantages[:, None, None], eps)
    w = np.where(mask, outer * core, 0.0) / batch.batch
    log_new = _gather_log_scores(params_new, batch)
    loss = float(np.sum(np.where(mask, w * log_new, 0.0)))
    grad = _accumulate_pairs(params_new, batch, w)
    n_pairs = int(mask.sum())
    clipped = mask & ((u < 1.0 - eps) | (u > 1.0 + eps))
    info = {
        "clip_frac": float(clipped.sum() / n_pairs) if n_pairs else 0.0,
        "mean_ratio": float(u[mask].mean()) if n_pairs else 1.0,
    }
    return loss, grad, info


def path_kl(
    params: ScoreParams,
    params_pre: ScoreParams,
    rollout: Rollout,
    g: TokenGenerator,
    sched: NoiseSchedule,
    with_gradient: bool = False,
):
    """Discretized path divergence of the policy from the pretrained one.

    Along each trajectory, every visited state contributes
    dt * sum over jumps of [Qpre - Q + Q * log(Q / Qpre)], a Bregman
    integrand that is nonnegative and zero only at equal rates. Averaged
    over the batch of paths. Returns the scalar (and, with
    ``with_gradient``, the gradient in ``params`` and an infinity flag);
    a jump with positive rate under ``params`` but zero rate under the
    pretrained policy makes the divergence infinite.
    """
    m = g.vocab.size
    grad = zeros_like_table(params) if with_gradient else None
    total = 0.0
    infinite = False
    B = rollout.batch
    dt = rollout.dt
    for k in range(rollout.steps):
        X = rollout.states[k]
        t_fwd = rollout.horizon - float(rollout.rev_times[k])
        sig = float(sched.sigma(t_fwd))
        b_new = int(params.bucket_index(t_fwd))
        b_pre = int(params_pre.bucket_index(t_fwd))
        n = X.shape[1]
        i_idx = np.arange(n)[None, :]
        base_rows = g.base[X, :]  # (B, n, m), forward rate of the opposite jump
        with np.errstate(over="raise"):
            q_new = np.exp(params.table[b_new, i_idx, X, :]) * (sig * base_rows)
            q_pre = np.exp(params_pre.table[b_pre, i_idx, X, :]) * (sig * base_rows)
        b_ar = np.arange(B)[:, None]
        q_new[b_ar, i_idx, X] = 0.0
        q_pre[b_ar, i_idx, X] = 0.0
        if rollout.clamp_len:
            q_new[:, : rollout.clamp_len, :] = 0.0
            q_pre[:, : rollout.clamp_len, :] = 0.0
        if np.any((q_new > 0) & (q_pre == 0)):
            infinite = True
            break
        both = (q_new > 0) & (q_pre > 0)
        log_ratio = np.zeros_like(q_new)
        log_ratio[both] = np.log(q_new[both] / q_pre[both])
        integrand = q_pre - q_new + q_new * log_ratio
        total += dt * float(integrand.sum()) / B
        if with_gradient:
            accumulate_onehot(
                grad,
                b_new,
                np.broadcast_to(np.arange(n)[None, :, None], (B, n, m)).reshape(-1),
                np.broadcast_to(X[:, :, None], (B, n, m)).reshape(-1),
                np.broadcast_to(np.arange(m)[None, None, :], (B, n, m)).reshape(-1),
                (dt / B) * (q_new * log_ratio).reshape(-1),
            )
    value = np.inf if infinite else total
    if with_gradient:
        return value, grad, infinite
    return value


def first_variation(functional: str, p: np.ndarray, aux: np.ndarray) -> np.ndarray:
    """Sensitivity direction of a simplex functional at distribution p.

    ``expected_reward``: aux is the reward table; the variation is the
    reward itself. ``kl_vs_ref``: aux is the reference distribution q; the
    variation is log(p/q) + 1, requiring q > 0 wherever p > 0. Entries where
    p = 0 use the convention 1 when q = 0 there too, -inf when q > 0.
    """
    p = np.asarray(p, dtype=np.float64)
    aux = np.asarray(aux, dtype=np.float64)
    if p.shape != aux.shape:
        raise DomainError(f"shape mismatch: {p.shape} vs {aux.shape}")
    if functional == "expected_reward":
        return aux.copy()
    if functional == "kl_vs_ref":
        if np.any((p > 0) & (aux <= 0)):
            raise DomainError("reference must be positive on the support of p")
        out = np.full_like(p, 1.0)
        pos = p > 0
        out[pos] = np.log(p[pos] / aux[pos]) + 1.0
        zero_p = (p == 0) & (aux > 0)
        out[zero_p] = -np.inf
        return out
    raise ConfigError(f"unknown functional {functional!r}")
