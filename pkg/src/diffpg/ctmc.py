"""Forward noising processes on token sequences and their time reversals.

A sequence of n tokens from an m-token vocabulary diffuses under a
continuous-time Markov chain that acts independently on each position.
Everything here uses the column convention: a rate matrix entry [target,
source] is the jump rate from the source token to the target token, columns
sum to zero, and distributions evolve as dp/dt = sigma(t) * base @ p.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from diffpg.errors import ConfigError, DomainError

GENERATOR_KINDS = ("uniform", "absorbing")
SCHEDULE_KINDS = ("linear", "geometric")


@dataclass(frozen=True)
class Vocab:
    """Token alphabet. ``mask_index`` is only meaningful for absorbing noise."""

    size: int
    mask_index: int | None = None

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ConfigError(f"vocab size must be at least 2, got {self.size}")
        if self.mask_index is not None and not 0 <= self.mask_index < self.size:
            raise ConfigError(
                f"mask_index {self.mask_index} outside vocab of size {self.size}"
            )


@dataclass(frozen=True)
class SequenceSpec:
    """Shape of the sequence state space: ``length`` positions over ``vocab``."""

    vocab: Vocab
    length: int

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ConfigError(f"sequence length must be positive, got {self.length}")

    @property
    def num_states(self) -> int:
        """Size of the full sequence state space, m ** n."""
        return self.vocab.size**self.length


@dataclass(frozen=True)
class NoiseSchedule:
    """Time-dependent noise intensity sigma(t) on the horizon [0, T].

    ``linear`` interpolates sigma_min to sigma_max; ``geometric`` interpolates
    them on a log scale. ``cumulative`` integrates sigma from 0 and therefore
    starts at zero and never decreases.
    """

    kind: str = "linear"
    sigma_min: float = 0.001
    sigma_max: float = 5.0
    horizon: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not self.sigma_min > 0 or not self.sigma_max >= self.sigma_min:
            raise ConfigError(
                "schedule needs 0 < sigma_min <= sigma_max, got "
                f"[{self.sigma_min}, {self.sigma_max}]"
            )
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")

    def _check_time(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < -1e-12) or np.any(t > self.horizon + 1e-12):
            raise DomainError(f"time {t} outside [0, {self.horizon}]")
        return np.clip(t, 0.0, self.horizon)

    def sigma(self, t):
        """Instantaneous noise intensity at time t. Vectorized."""
        t = self._check_time(t)
        u = t / self.horizon
        if self.kind == "linear":
            return self.sigma_min + (self.sigma_max - self.sigma_min) * u
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** u

    def cumulative(self, t):
        """Integral of sigma over [0, t]. Vectorized."""
        t = self._check_time(t)
        u = t / self.horizon
        if self.kind == "linear":
            return self.sigma_min * t + 0.5 * (self.sigma_max - self.sigma_min) * t * u
        if self.sigma_max == self.sigma_min:
            return self.sigma_min * t
        log_ratio = np.log(self.sigma_max / self.sigma_min)
        return self.horizon * self.sigma_min * (np.expm1(u * log_ratio)) / log_ratio


@dataclass(frozen=True)
class TokenGenerator:
    """Single-position rate matrix ``base`` scaled by a schedule at run time.

    ``base`` is m x m in the column convention: base[target, source] is the
    jump rate source -> target, off-diagonal entries are nonnegative, and
    every column sums to zero.
    """

    vocab: Vocab
    kind: str
    base: np.ndarray

    def rate_matrix(self, sched: NoiseSchedule, t: float) -> np.ndarray:
        """Time-scaled single-position generator sigma(t) * base."""
        return float(sched.sigma(t)) * self.base


def build_generator(vocab: Vocab, kind: str) -> TokenGenerator:
    """Construct the single-position generator for a noise family.

    ``uniform`` jumps to every other token at rate 1/m. ``absorbing`` routes
    all mass of each non-mask token to the mask token at rate 1 and never
    leaves the mask.
    """
    if kind not in GENERATOR_KINDS:
        raise ConfigError(f"unknown generator kind {kind!r}")
    m = vocab.size
    if kind == "uniform":
        base = np.full((m, m), 1.0 / m)
        np.fill_diagonal(base, 1.0 / m - 1.0)
        return TokenGenerator(vocab=vocab, kind=kind, base=base)

    if vocab.mask_index is None:
        raise ConfigError("absorbing generator requires vocab.mask_index")
    mask = vocab.mask_index
    base = np.zeros((m, m))
    for a in range(m):
        if a == mask:
            continue  # the mask column stays zero: the mask state is absorbing
        base[a, a] = -1.0
        base[mask, a] = 1.0
    return TokenGenerator(vocab=vocab, kind=kind, base=base)


def token_reference_dist(g: TokenGenerator) -> np.ndarray:
    """Limiting single-token distribution of the forward process.

    Uniform noise relaxes to the uniform distribution; absorbing noise
    collapses onto the mask token. Sequence-level reference distributions
    are products of this over positions.
    """
    m = g.vocab.size
    if g.kind == "uniform":
        return np.full(m, 1.0 / m)
    ref = np.zeros(m)
    ref[g.vocab.mask_index] = 1.0
    return ref


def transition_kernel(
    g: TokenGenerator, sched: NoiseSchedule, s: float, t: float
) -> np.ndarray:
    """Single-token transition probabilities from time s to time t >= s.

    Returns the column-stochastic matrix K with K[target, source] =
    P(token is ``target`` at t | token was ``source`` at s), the closed-form
    exponential of the time-scaled generator over [s, t].
    """
    if t < s - 1e-12:
        raise DomainError(f"kernel needs s <= t, got s={s}, t={t}")
    sbar = float(sched.cumulative(t) - sched.cumulative(s))
    sbar = max(sbar, 0.0)
    m = g.vocab.size
    decay = np.exp(-sbar)
    if g.kind == "uniform":
        return decay * np.eye(m) + (1.0 - decay) * np.full((m, m), 1.0 / m)
    mask = g.vocab.mask_index
    kernel = decay * np.eye(m)
    kernel[mask, :] += 1.0 - decay
    kernel[mask, mask] = 1.0
    return kernel


def reverse_rates(
    g: TokenGenerator,
    sched: NoiseSchedule,
    t: float,
    x: np.ndarray,
    ratios: np.ndarray,
) -> np.ndarray:
    """Jump rates of the time-reversed chain out of sequence x at time t.

    ``ratios[i, a]`` must hold the marginal ratio p_t(y) / p_t(x) for the
    neighbor y obtained by setting position i of x to token a (the entry at
    a == x[i] is ignored). Entries must be finite and nonnegative; a zero
    ratio simply disables that jump.

    Returns an (n, m) array whose [i, a] entry is the rate of jumping from x
    to that neighbor; self entries [i, x[i]] are zero. The diagonal rate of
    the full reversal is minus the sum of the returned array. In the column
    convention the reversal multiplies each ratio by the forward rate of the
    opposite jump, base[x[i], a].
    """
    x = np.asarray(x)
    n = x.shape[0]
    m = g.vocab.size
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (n, m):
        raise DomainError(f"ratios must have shape ({n}, {m}), got {ratios.shape}")
    if not np.all(np.isfinite(ratios)):
        raise DomainError("ratios must be finite")
    sig = float(sched.sigma(t))
    # base[x_i, a] is the forward rate of the jump a -> x_i, the factor the
    # reversal pairs with the marginal ratio of the jump x_i -> a.
    rates = ratios * (sig * g.base[x, :])
    rates[np.arange(n), x] = 0.0
    if np.any(rates < 0):
        raise DomainError("negative reverse rate; ratios must be nonnegative")
    return rates


def check_sequence(x: np.ndarray, spec: SequenceSpec) -> np.ndarray:
    """Validate token values and length, returning an int64 copy."""
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != spec.length:
        raise DomainError(f"sequence must have shape ({spec.length},), got {x.shape}")
    x = x.astype(np.int64)
    if np.any(x < 0) or np.any(x >= spec.vocab.size):
        raise DomainError("token id outside vocabulary")
    return x
