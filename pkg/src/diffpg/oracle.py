"""Dense enumeration oracles for small sequence state spaces.

Every estimator in the package has a counterpart here that works on the full
state space by brute force: exact forward marginals (numerical ODE solve and
closed-form kernel products), exact marginal ratios, exact reverse-process
terminal distributions, and finite-difference loss gradients. The oracles are
deliberately straightforward so the fast paths can be tested against them.

State spaces are capped at ``ORACLE_CAP`` states; larger requests raise
``CapacityError`` instead of silently thrashing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from diffpg.ctmc import (
    NoiseSchedule,
    SequenceSpec,
    TokenGenerator,
    token_reference_dist,
    transition_kernel,
)
from diffpg.errors import CapacityError, DomainError

ORACLE_CAP = 4096  # largest m ** n a dense oracle will enumerate

_SIMPLEX_ATOL = 1e-9


class IndexCodec:
    """Bijection between token sequences and flat state indices.

    Sequences are read as base-m integers with position 0 most significant,
    so index arithmetic by strides matches numpy's C-order reshape to a
    (m, m, ..., m) tensor.
    """

    def __init__(self, spec: SequenceSpec):
        d = spec.num_states
        if d > ORACLE_CAP:
            raise CapacityError(
                f"state space has {d} states, oracle cap is {ORACLE_CAP}"
            )
        self.spec = spec
        self.num_states = d
        m, n = spec.vocab.size, spec.length
        self.strides = m ** np.arange(n - 1, -1, -1, dtype=np.int64)

    def encode(self, x: np.ndarray) -> int:
        x = np.asarray(x, dtype=np.int64)
        if x.shape != (self.spec.length,):
            raise DomainError(f"expected shape ({self.spec.length},), got {x.shape}")
        if np.any(x < 0) or np.any(x >= self.spec.vocab.size):
            raise DomainError("token id outside vocabulary")
        return int(x @ self.strides)

    def encode_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != self.spec.length:
            raise DomainError(f"expected (K, {self.spec.length}), got {X.shape}")
        if np.any(X < 0) or np.any(X >= self.spec.vocab.size):
            raise DomainError("token id outside vocabulary")
        return X @ self.strides

    def decode(self, index: int) -> np.ndarray:
        if not 0 <= index < self.num_states:
            raise DomainError(f"index {index} outside [0, {self.num_states})")
        return (index // self.strides) % self.spec.vocab.size

    def all_sequences(self) -> np.ndarray:
        """All states as a (num_states, length) digit table, in index order."""
        idx = np.arange(self.num_states, dtype=np.int64)
        return (idx[:, None] // self.strides[None, :]) % self.spec.vocab.size


def check_dist(p: np.ndarray, d: int) -> np.ndarray:
    """Validate a probability vector over d states."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (d,):
        raise DomainError(f"distribution must have shape ({d},), got {p.shape}")
    if np.any(p < -_SIMPLEX_ATOL) or abs(p.sum() - 1.0) > 1e-6:
        raise DomainError("not a probability distribution")
    return p


def sequence_reference_dist(g: TokenGenerator, spec: SequenceSpec) -> np.ndarray:
    """Product reference distribution across positions, as a flat vector."""
    codec = IndexCodec(spec)
    token_ref = token_reference_dist(g)
    seqs = codec.all_sequences()
    return np.prod(token_ref[seqs], axis=1)


def _apply_positionwise(mat: np.ndarray, p: np.ndarray, spec: SequenceSpec):
    """Sum over positions of (I x ... x mat x ... x I) @ p (Kronecker sum)."""
    m, n = spec.vocab.size, spec.length
    p_nd = p.reshape((m,) * n)
    out = np.zeros_like(p_nd)
    for i in range(n):
        out += np.moveaxis(np.tensordot(mat, p_nd, axes=(1, i)), 0, i)
    return out.reshape(-1)


def _kron_apply(mat: np.ndarray, p: np.ndarray, spec: SequenceSpec):
    """(mat x mat x ... x mat) @ p without materializing the product."""
    m, n = spec.vocab.size, spec.length
    p_nd = p.reshape((m,) * n)
    for i in range(n):
        p_nd = np.moveaxis(np.tensordot(mat, p_nd, axes=(1, i)), 0, i)
    return p_nd.reshape(-1)


def forward_marginals_kernel(
    g: TokenGenerator,
    sched: NoiseSchedule,
    spec: SequenceSpec,
    p0: np.ndarray,
    t: float,
) -> np.ndarray:
    """Exact forward marginal at time t via the closed-form token kernel."""
    codec = IndexCodec(spec)
    p0 = check_dist(p0, codec.num_states)
    kernel = transition_kernel(g, sched, 0.0, t)
    return _kron_apply(kernel, p0, spec)


def exact_forward_marginals(
    g: TokenGenerator,
    sched: NoiseSchedule,
    spec: SequenceSpec,
    p0: np.ndarray,
    t: float,
    steps: int = 512,
    method: str = "rk4",
) -> np.ndarray:
    """Forward marginal at time t by integrating dp/du = sigma(u) * base p.

    ``method`` picks the fixed-step integrator: fourth-order Runge-Kutta
    (default) or explicit Euler for cross-checking convergence order.
    """
    codec = IndexCodec(spec)
    p0 = check_dist(p0, codec.num_states)
    if t < 0 or t > sched.horizon + 1e-12:
        raise DomainError(f"time {t} outside [0, {sched.horizon}]")
    if steps < 1:
        raise DomainError("steps must be positive")

    def flow(u: float, p: np.ndarray) -> np.ndarray:
        return float(sched.sigma(u)) * _apply_positionwise(g.base, p, spec)

    return _integrate(flow, p0, 0.0, t, steps, method)


def _integrate(flow, p0, u0: float, u1: float, steps: int, method: str):
    if method not in ("rk4", "euler"):
        raise DomainError(f"unknown integration method {method!r}")
    p = p0.copy()
    if u1 <= u0:
        return p
    h = (u1 - u0) / steps
    for k in range(steps):
        u = u0 + k * h
        if method == "euler":
            p = p + h * flow(u, p)
            continue
        k1 = flow(u, p)
        k2 = flow(u + 0.5 * h, p + 0.5 * h * k1)
        k3 = flow(u + 0.5 * h, p + 0.5 * h * k2)
        k4 = flow(u + h, p + h * k3)
        p = p + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return p


def exact_ratios(
    p: np.ndarray, x: np.ndarray, codec: IndexCodec
) -> np.ndarray:
    """Marginal ratios p(y) / p(x) over all Hamming-1 neighbors y of x.

    Returns an (n, m) table whose [i, a] entry is the ratio for the neighbor
    with position i set to token a; the self entry [i, x[i]] is 1. Requires
    p(x) > 0.
    """
    spec = codec.spec
    x = np.asarray(x, dtype=np.int64)
    idx = codec.encode(x)
    px = p[idx]
    if not px > 0:
        raise DomainError("ratios undefined at a zero-probability state")
    n, m = spec.length, spec.vocab.size
    neighbor_idx = idx + (np.arange(m)[None, :] - x[:, None]) * codec.strides[:, None]
    return p[neighbor_idx] / px


def ratios_batch_from_dist(
    p: np.ndarray, X: np.ndarray, codec: IndexCodec, strict: bool = True
) -> np.ndarray:
    """Vectorized ``exact_ratios`` for a (B, n) batch of sequences.

    With ``strict=False`` rows at zero-probability states get all-zero
    ratios instead of an error; the reversal assigns such states zero
    outflow, which is consistent because they also receive zero inflow.
    """
    X = np.asarray(X, dtype=np.int64)
    m = codec.spec.vocab.size
    idx = X @ codec.strides
    px = p[idx]
    if strict and np.any(px <= 0):
        raise DomainError("ratios undefined at a zero-probability state")
    nbr = idx[:, None, None] + (
        np.arange(m)[None, None, :] - X[:, :, None]
    ) * codec.strides[None, :, None]
    num = p[nbr]
    den = px[:, None, None]
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


class TeacherScore:
    """Concrete-score provider backed by exact forward marginals.

    At forward time t it returns the true ratios p_t(y) / p_t(x) of the
    noised data distribution, computed from the closed-form kernel product.
    This is the ideal score a trained model approximates.
    """

    def __init__(
        self,
        g: TokenGenerator,
        sched: NoiseSchedule,
        spec: SequenceSpec,
        p0: np.ndarray,
    ):
        self.g = g
        self.sched = sched
        self.spec = spec
        self.codec = IndexCodec(spec)
        self.p0 = check_dist(p0, self.codec.num_states)
        self._cache: dict[float, np.ndarray] = {}

    def marginal(self, t_fwd: float) -> np.ndarray:
        key = round(float(t_fwd), 12)
        if key not in self._cache:
            self._cache[key] = forward_marginals_kernel(
                self.g, self.sched, self.spec, self.p0, t_fwd
            )
        return self._cache[key]

    def ratios_batch(self, X: np.ndarray, t_fwd: float) -> np.ndarray:
        return ratios_batch_from_dist(
            self.marginal(t_fwd), X, self.codec, strict=False
        )

    def ratios(self, x: np.ndarray, t_fwd: float) -> np.ndarray:
        return self.ratios_batch(np.asarray(x)[None, :], t_fwd)[0]

    def pair_log_ratio(
        self, Y: np.ndarray, Z: np.ndarray, t_fwd: float
    ) -> np.ndarray:
        """log of p_t(z) / p_t(y) for arbitrary state pairs, (K,).

        Zero-probability targets give -inf; a zero-probability anchor y is
        rejected because the ratio is undefined there.
        """
        p = self.marginal(t_fwd)
        iy = self.codec.encode_batch(np.asarray(Y, dtype=np.int64))
        iz = self.codec.encode_batch(np.asarray(Z, dtype=np.int64))
        if np.any(p[iy] <= 0):
            raise DomainError("pair ratio anchored at a zero-probability state")
        with np.errstate(divide="ignore"):
            return np.log(p[iz]) - np.log(p[iy])


def forward_flow_apply(
    g: TokenGenerator, sched: NoiseSchedule, codec: IndexCodec, t_fwd: float
):
    """Dense action p -> Q_t p of the forward noising generator."""
    sig = float(sched.sigma(t_fwd))

    def apply(p: np.ndarray) -> np.ndarray:
        return sig * _apply_positionwise(g.base, p, codec.spec)

    return apply


def reverse_flow_apply(
    score, g: TokenGenerator, sched: NoiseSchedule, codec: IndexCodec, t_fwd: float
):
    """Dense action q -> Qbar_t q of the reversal built from a score provider."""
    spec = codec.spec
    m, n = spec.vocab.size, spec.length
    seqs = codec.all_sequences()
    ratios = np.asarray(score.ratios_batch(seqs, t_fwd), dtype=np.float64)
    sig = float(sched.sigma(t_fwd))
    # rates[x, i, a]: jump rate out of state x that rewrites position i to a
    rates = ratios * (sig * g.base[seqs, :])
    rates[np.arange(codec.num_states)[:, None], np.arange(n)[None, :], seqs] = 0.0
    if np.any(rates < 0):
        raise DomainError("negative reverse rate from score provider")
    outflow = rates.sum(axis=(1, 2))

    def apply(q: np.ndarray) -> np.ndarray:
        q_nd = q.reshape((m,) * n)
        out = -(outflow * q).reshape((m,) * n)
        for i in range(n):
            flux = rates[:, i, :] * q[:, None]  # (d, m) mass leaving along axis i
            flux_nd = flux.reshape((m,) * n + (m,))
            # collapse the source digit at position i, deposit on the target digit
            inflow = flux_nd.sum(axis=i)  # (m,)*(n-1) + (m,)
            out += np.moveaxis(inflow, -1, i)
        return out.reshape(-1)

    return apply


def exact_policy_dist(
    score,
    g: TokenGenerator,
    sched: NoiseSchedule,
    spec: SequenceSpec,
    t_stop: float,
    steps: int = 512,
    method: str = "rk4",
) -> np.ndarray:
    """Terminal distribution of the reverse process run for ``t_stop`` time.

    Integrates dq/du = Qbar(T - u) q from the reference distribution at u = 0
    to u = t_stop, where Qbar is assembled from the score provider's ratios.
    The result is the exact distribution the stochastic sampler approximates.
    """
    codec = IndexCodec(spec)
    if not 0 <= t_stop <= sched.horizon + 1e-12:
        raise DomainError(f"t_stop {t_stop} outside [0, {sched.horizon}]")
    q0 = sequence_reference_dist(g, spec)

    def flow(u: float, q: np.ndarray) -> np.ndarray:
        apply = reverse_flow_apply(score, g, sched, codec, sched.horizon - u)
        return apply(q)

    q = _integrate(flow, q0, 0.0, t_stop, steps, method)
    # the flow conserves mass exactly; clip tiny integrator undershoots
    q = np.clip(q, 0.0, None)
    return q / q.sum()


def corrector_flow_apply(
    score, g: TokenGenerator, sched: NoiseSchedule, codec: IndexCodec, t_fwd: float
):
    """Dense action of the corrector generator Qbar_t + Q_t at a fixed time.

    When the score is exact this generator annihilates the forward marginal
    p_t, so p_t is its stationary distribution and the corrector chain pulls
    samples toward it.
    """
    rev = reverse_flow_apply(score, g, sched, codec, t_fwd)
    fwd = forward_flow_apply(g, sched, codec, t_fwd)

    def apply(q: np.ndarray) -> np.ndarray:
        return rev(q) + fwd(q)

    return apply


def exact_loss_gradient_fd(
    params,
    g: TokenGenerator,
    sched: NoiseSchedule,
    spec: SequenceSpec,
    reward_fn,
    t_stop: float,
    steps: int = 256,
    h: float = 1e-4,
) -> np.ndarray:
    """Central-difference gradient of the negative expected terminal reward.

    Treats the scalar loss L(theta) = -sum_x q_theta(x) R(x), with q_theta
    the exact reverse-process terminal distribution under the tabular score
    ``params``, and differences every table entry. Slow by design; this is
    the reference the sampling-based estimators are tested against.
    """
    from diffpg.score import TabularScore

    codec = IndexCodec(spec)
    rewards = np.asarray(reward_fn(codec.all_sequences()), dtype=np.float64)

    def loss(table: np.ndarray) -> float:
        provider = TabularScore(params.with_table(table), spec)
        q = exact_policy_dist(provider, g, sched, spec, t_stop, steps=steps)
        return -float(q @ rewards)

    base = params.table
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    base_flat = base.reshape(-1)
    for c in range(base_flat.size):
        if not np.isfinite(base_flat[c]):
            continue  # pinned entries stay pinned
        bump = np.zeros_like(base_flat)
        bump[c] = h
        up = loss((base_flat + bump).reshape(base.shape))
        down = loss((base_flat - bump).reshape(base.shape))
        flat[c] = (up - down) / (2.0 * h)
    return grad
