"""Deterministic toy reward functions over token sequences.

Rewards are plain functions of the final sequence: no differentiability is
assumed anywhere, and every reward here is bounded on the finite state
space. The registry maps config-file names to factories so training runs
can pick a reward by name.
"""

from __future__ import annotations

import numpy as np

from diffpg.errors import ConfigError


class RewardFn:
    """A named, deterministic, batched reward.

    Calling with a (B, n) batch returns (B,) rewards; ``eval`` scores one
    sequence.
    """

    def __init__(self, name: str, fn):
        self.name = name
        self._fn = fn

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.int64)
        if X.ndim == 1:
            X = X[None, :]
        return np.asarray(self._fn(X), dtype=np.float64)

    def eval(self, x: np.ndarray) -> float:
        return float(self(np.asarray(x)[None, :])[0])


def motif_count(pattern) -> RewardFn:
    """Number of (possibly overlapping) occurrences of a contiguous pattern."""
    pat = np.asarray(pattern, dtype=np.int64)
    if pat.ndim != 1 or pat.size < 1:
        raise ConfigError("motif pattern must be a nonempty 1-d token list")

    def fn(X: np.ndarray) -> np.ndarray:
        B, n = X.shape
        k = pat.size
        if k > n:
            return np.zeros(B)
        windows = np.stack([X[:, i : i + k] for i in range(n - k + 1)], axis=1)
        return (windows == pat).all(axis=2).sum(axis=1).astype(np.float64)

    return RewardFn(f"motif_count{tuple(int(p) for p in pat)}", fn)


def target_composition(token: int, target: float) -> RewardFn:
    """Negative absolute deviation of a token's frequency from a target."""
    if not 0.0 <= target <= 1.0:
        raise ConfigError(f"target frequency must lie in [0, 1], got {target}")

    def fn(X: np.ndarray) -> np.ndarray:
        freq = (X == token).mean(axis=1)
        return -np.abs(freq - target)

    return RewardFn(f"target_composition({token}, {target})", fn)


def parity(token_sum_even: bool = True) -> RewardFn:
    """1 when the token sum has the requested parity, else 0."""
    want = 0 if token_sum_even else 1

    def fn(X: np.ndarray) -> np.ndarray:
        return (X.sum(axis=1) % 2 == want).astype(np.float64)

    return RewardFn(f"parity(even={token_sum_even})", fn)


REWARD_FACTORIES = {
    "motif_count": motif_count,
    "target_composition": target_composition,
    "parity": parity,
}


def make_reward(name: str, **kwargs) -> RewardFn:
    """Build a registered reward by name; unknown names are config errors."""
    if name not in REWARD_FACTORIES:
        raise ConfigError(
            f"unknown reward {name!r}; known: {sorted(REWARD_FACTORIES)}"
        )
    try:
        return REWARD_FACTORIES[name](**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad arguments for reward {name!r}: {exc}") from exc
