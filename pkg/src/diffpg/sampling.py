"""Stochastic simulation of the learned reverse process.

Generation runs a reverse clock u from 0 to t_stop: states drawn from the
reference distribution are evolved by tau-leaping the reversal, whose rates
at reverse time u come from the score provider evaluated at forward time
T - u. Optional corrector sweeps run the stationarity-preserving chain
(reverse plus forward generator) at a frozen time between predictor steps,
nudging samples back onto the current marginal.

Everything is batched: a rollout of B sequences advances as one (B, n)
array per step. All randomness flows through an explicit
``numpy.random.Generator`` so runs are reproducible from a seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from diffpg.ctmc import (
    NoiseSchedule,
    SequenceSpec,
    TokenGenerator,
    token_reference_dist,
)
from diffpg.errors import ConfigError, DomainError, StepSizeError


@dataclass(frozen=True)
class SamplerConfig:
    """Discretization knobs for reverse-process simulation."""

    dt: float = 0.01  # target tau-leap step on the reverse clock
    t_stop: float | None = None  # reverse time to simulate; None = full horizon
    corrector_steps: int = 0  # corrector sweeps after each predictor step
    corrector_dt: float | None = None  # corrector step size; None reuses dt
    corrector_after_stop: int = 0  # fixed-time corrector iterations once stopped

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.t_stop is not None and self.t_stop < 0:
            raise ConfigError(f"t_stop must be nonnegative, got {self.t_stop}")
        if self.corrector_steps < 0:
            raise ConfigError("corrector_steps must be nonnegative")
        if self.corrector_dt is not None and not self.corrector_dt > 0:
            raise ConfigError("corrector_dt must be positive")
        if self.corrector_after_stop < 0:
            raise ConfigError("corrector_after_stop must be nonnegative")


@dataclass(frozen=True)
class Rollout:
    """A batch of simulated reverse paths.

    states[k] is the (batch, length) array after k predictor steps
    (states[0] holds the reference draws); rev_times[k] is the reverse-clock
    time of states[k], so the forward time there is horizon - rev_times[k].
    """

    states: np.ndarray  # (steps + 1, batch, length) int64
    rev_times: np.ndarray  # (steps + 1,)
    horizon: float
    clamp_len: int = 0  # leading positions held fixed throughout

    @property
    def finals(self) -> np.ndarray:
        return self.states[-1]

    @property
    def batch(self) -> int:
        return self.states.shape[1]

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def dt(self) -> float:
        if self.steps == 0:
            return 0.0
        return float(self.rev_times[1] - self.rev_times[0])

    @property
    def t_stop(self) -> float:
        return float(self.rev_times[-1])

    def fwd_times(self) -> np.ndarray:
        return self.horizon - self.rev_times


@dataclass(frozen=True)
class Trajectory:
    """Single-path view over a batch-of-one rollout."""

    states: np.ndarray  # (steps + 1, length) int64
    rev_times: np.ndarray
    horizon: float
    clamp_len: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    def fwd_times(self) -> np.ndarray:
        return self.horizon - self.rev_times


def sample_reference(
    g: TokenGenerator,
    spec: SequenceSpec,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """Draw sequences from the product reference distribution."""
    ref = token_reference_dist(g)
    shape = (spec.length,) if size is None else (size, spec.length)
    return rng.choice(spec.vocab.size, size=shape, p=ref).astype(np.int64)


def batch_reverse_rates(
    g: TokenGenerator,
    sched: NoiseSchedule,
    t_fwd: float,
    X: np.ndarray,
    ratios: np.ndarray,
) -> np.ndarray:
    """Reversal jump rates for a whole batch: (B, n, m) with zero self slots.

    ratios[b, i, a] is the score's marginal ratio for rewriting X[b, i] to a;
    the rate pairs it with the forward rate of the opposite jump, base[X, a].
    """
    X = np.asarray(X, dtype=np.int64)
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != X.shape + (g.vocab.size,):
        raise DomainError(
            f"ratios must have shape {X.shape + (g.vocab.size,)}, got {ratios.shape}"
        )
    if not np.all(np.isfinite(ratios)):
        raise DomainError("ratios must be finite")
    sig = float(sched.sigma(t_fwd))
    rates = ratios * (sig * g.base[X, :])
    b_idx = np.arange(X.shape[0])[:, None]
    i_idx = np.arange(X.shape[1])[None, :]
    rates[b_idx, i_idx, X] = 0.0
    if np.any(rates < 0):
        raise DomainError("negative reverse rate; ratios must be nonnegative")
    return rates


def batch_forward_rates(
    g: TokenGenerator, sched: NoiseSchedule, t_fwd: float, X: np.ndarray
) -> np.ndarray:
    """Forward jump rates (B, n, m): entry [b, i, a] = sigma * base[a, X[b, i]]."""
    sig = float(sched.sigma(t_fwd))
    rates = sig * g.base.T[X, :]  # base.T[c, a] = base[a, c], rate c -> a
    b_idx = np.arange(X.shape[0])[:, None]
    i_idx = np.arange(X.shape[1])[None, :]
    rates = rates.copy()
    rates[b_idx, i_idx, X] = 0.0
    return rates


def _leap(
    rates: np.ndarray,
    dt: float,
    X: np.ndarray,
    rng: np.random.Generator,
    frozen: np.ndarray | None,
    what: str,
) -> np.ndarray:
    """Shared tau-leap kernel: per position, move to a w.p. dt * rates[..., a]."""
    if frozen is not None:
        rates = rates.copy()
        rates[:, frozen, :] = 0.0
    jump_probs = dt * rates
    total = jump_probs.sum(axis=2)
    if np.any(total > 1.0):
        raise StepSizeError(
            f"{what} jump probability {total.max():.3g} exceeds 1 at dt={dt}; reduce dt"
        )
    B, n, m = jump_probs.shape
    probs = np.concatenate([jump_probs, (1.0 - total)[:, :, None]], axis=2)
    flat = probs.reshape(B * n, m + 1)
    cum = np.cumsum(flat, axis=1)
    u = rng.random(B * n) * cum[:, -1]
    draw = (u[:, None] < cum).argmax(axis=1).reshape(B, n)
    return np.where(draw == m, X, draw).astype(np.int64)


def tau_leap_step(
    g: TokenGenerator,
    sched: NoiseSchedule,
    t_fwd: float,
    dt: float,
    X: np.ndarray,
    ratios: np.ndarray,
    rng: np.random.Generator,
    frozen: np.ndarray | None = None,
) -> np.ndarray:
    """Advance one reversal tau-leap for a (B, n) batch (or a single (n,) state).

    ``frozen`` is a boolean position mask whose True entries never move.
    Raises StepSizeError when dt makes any total jump probability exceed 1.
    """
    X = np.asarray(X, dtype=np.int64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
        ratios = np.asarray(ratios)[None, :, :]
    rates = batch_reverse_rates(g, sched, t_fwd, X, ratios)
    out = _leap(rates, dt, X, rng, frozen, "reversal")
    return out[0] if single else out


def corrector_step(
    score,
    g: TokenGenerator,
    sched: NoiseSchedule,
    t_fwd: float,
    dt: float,
    X: np.ndarray,
    rng: np.random.Generator,
    frozen: np.ndarray | None = None,
) -> np.ndarray:
    """One tau-leap of the corrector chain at a frozen forward time.

    The corrector generator is the sum of the reversal and the forward
    generator; it leaves the time-t marginal invariant when the score is
    exact, so extra sweeps pull wandering samples back toward it.
    """
    X = np.asarray(X, dtype=np.int64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    ratios = np.asarray(score.ratios_batch(X, t_fwd), dtype=np.float64)
    rates = batch_reverse_rates(g, sched, t_fwd, X, ratios)
    rates = rates + batch_forward_rates(g, sched, t_fwd, X)
    out = _leap(rates, dt, X, rng, frozen, "corrector")
    return out[0] if single else out


def forward_leap_step(
    g: TokenGenerator,
    sched: NoiseSchedule,
    t_fwd: float,
    dt: float,
    X: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """One tau-leap of the forward noising process from a (B, n) batch.

    Per position, move to token a with probability dt * sigma * base[a, x_i],
    else stay. Score-free: used to draw marginal-estimation proposals that
    can be shared across policies.
    """
    X = np.asarray(X, dtype=np.int64)
    rates = batch_forward_rates(g, sched, t_fwd, X)
    return _leap(rates, dt, X, rng, None, "forward")


def _resolve_grid(sched: NoiseSchedule, cfg: SamplerConfig) -> tuple[int, float]:
    t_stop = sched.horizon if cfg.t_stop is None else cfg.t_stop
    if t_stop > sched.horizon + 1e-12:
        raise DomainError(f"t_stop {t_stop} exceeds horizon {sched.horizon}")
    if t_stop == 0.0:
        return 0, 0.0
    steps = max(1, int(np.ceil(t_stop / cfg.dt - 1e-9)))
    return steps, t_stop / steps


def _check_prefix(prefix: np.ndarray | None, spec: SequenceSpec):
    if prefix is None:
        return 0, None
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 1 or prefix.shape[0] > spec.length:
        raise DomainError(
            f"prefix shape {prefix.shape} does not fit sequences of length {spec.length}"
        )
    if np.any(prefix < 0) or np.any(prefix >= spec.vocab.size):
        raise DomainError("prefix token outside vocabulary")
    frozen = np.zeros(spec.length, dtype=bool)
    frozen[: prefix.shape[0]] = True
    return prefix.shape[0], frozen


def sample_rollout(
    score,
    g: TokenGenerator,
    sched: NoiseSchedule,
    spec: SequenceSpec,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    size: int,
    prefix: np.ndarray | None = None,
) -> Rollout:
    """Simulate ``size`` reverse paths in lockstep from the reference.

    ``prefix`` clamps that many leading positions to the given tokens for
    the whole simulation (conditional generation); it may be shorter than
    the sequence. Returns the full path tensor for downstream estimators.
    """
    if size < 1:
        raise ConfigError(f"rollout size must be positive, got {size}")
    steps, dt = _resolve_grid(sched, cfg)
    clamp_len, frozen = _check_prefix(prefix, spec)
    X = sample_reference(g, spec, rng, size=size)
    if clamp_len:
        X[:, :clamp_len] = prefix
    states = np.empty((steps + 1, size, spec.length), dtype=np.int64)
    states[0] = X
    rev_times = np.linspace(0.0, steps * dt, steps + 1)
    corr_dt = cfg.corrector_dt if cfg.corrector_dt is not None else dt
    for k in range(steps):
        t_fwd = sched.horizon - rev_times[k]
        ratios = np.asarray(score.ratios_batch(X, t_fwd), dtype=np.float64)
        X = tau_leap_step(g, sched, t_fwd, dt, X, ratios, rng, frozen)
        t_next = sched.horizon - rev_times[k + 1]
        for _ in range(cfg.corrector_steps):
            X = corrector_step(score, g, sched, t_next, corr_dt, X, rng, frozen)
        states[k + 1] = X
    return Rollout(
        states=states, rev_times=rev_times, horizon=sched.horizon, clamp_len=clamp_len
    )


def sample_trajectory(
    score,
    g: TokenGenerator,
    sched: NoiseSchedule,
    spec: SequenceSpec,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    prefix: np.ndarray | None = None,
) -> Trajectory:
    """Single-path convenience wrapper over ``sample_rollout``."""
    roll = sample_rollout(score, g, sched, spec, cfg, rng, size=1, prefix=prefix)
    return Trajectory(
        states=roll.states[:, 0, :],
        rev_times=roll.rev_times,
        horizon=roll.horizon,
        clamp_len=roll.clamp_len,
    )


def gradient_flow_sample(
    score,
    g: TokenGenerator,
    sched: NoiseSchedule,
    spec: SequenceSpec,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    size: int = 1,
    prefix: np.ndarray | None = None,
) -> np.ndarray:
    """Terminal sequences after the predictor run plus a tail of fixed-time
    corrector iterations.

    The predictor integrates the reverse chain up to the stopping time; the
    tail then holds the clock still and applies cfg.corrector_after_stop
    corrector sweeps at that frozen time. With the stationary distribution
    of the frozen-time corrector chain being the exact marginal, the tail
    can only sharpen an imperfect predictor output. Returns (size, length).
    """
    roll = sample_rollout(score, g, sched, spec, cfg, rng, size, prefix)
    X = roll.finals.copy()
    if cfg.corrector_after_stop:
        _, frozen = _check_prefix(prefix, spec)
        t_fwd = sched.horizon - roll.t_stop
        corr_dt = cfg.corrector_dt if cfg.corrector_dt is not None else roll.dt
        for _ in range(cfg.corrector_after_stop):
            X = corrector_step(score, g, sched, t_fwd, corr_dt, X, rng, frozen)
    return X


def corrector_chain(
    score,
    g: TokenGenerator,
    sched: NoiseSchedule,
    t_fwd: float,
    dt: float,
    X0: np.ndarray,
    steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run the fixed-time corrector chain for several steps, returning final
    states. Used to test stationarity of the time-t marginal."""
    X = np.asarray(X0, dtype=np.int64).copy()
    for _ in range(steps):
        X = corrector_step(score, g, sched, t_fwd, dt, X, rng)
    return X
