"""Simplex projection and the rank-one implicit-gradient solve.

The fine-tuning objective can treat the induced distribution as the fixed
point of a projected-descent map; differentiating through that fixed point
yields a linear system whose matrix is a rank-one update of a diagonal.
This module provides the pieces: the Euclidean simplex projection
(sparsemax) with its support-size rule, a closed-form rank-one solver, the
corrected gradient that solves the full system, and the support-weight
vector used by the cheap reweighting path in the trainer.

Everything here is dense and intended for oracle-sized state spaces.
"""

from dataclasses import dataclass

import numpy as np

from diffpg.errors import DomainError, SingularSystemError

# log-spaced candidate thresholds for matching a requested support size
DEFAULT_ETA_GRID = np.logspace(-6.0, 0.0, 32)


def _as_finite_vector(z, name: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise DomainError(f"{name} must be a nonempty 1-d vector, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DomainError(f"{name} must be finite")
    return z


def _support_k(z: np.ndarray) -> tuple[int, np.ndarray, np.ndarray]:
    """Support size of the simplex projection via the sorted-coordinate rule.

    Returns (k, z_sorted_desc, cumsum) so callers can reuse the sort.
    """
    zs = np.sort(z)[::-1]
    css = np.cumsum(zs)
    ks = np.arange(1, z.size + 1)
    ok = 1.0 + ks * zs > css
    k = int(ks[ok].max())
    return k, zs, css


@dataclass(frozen=True)
class SparsemaxResult:
    projection: np.ndarray  # length-d simplex vector
    support: np.ndarray  # ascending indices of the strictly positive entries
    tau: float  # threshold subtracted inside the positive part


def sparsemax(z) -> SparsemaxResult:
    """Euclidean projection of z onto the probability simplex.

    The projection is max(z - tau, 0) with tau the unique threshold making
    the result sum to one; entries off the support come out exactly zero.
    """
    z = _as_finite_vector(z, "z")
    k, zs, css = _support_k(z)
    tau = (css[k - 1] - 1.0) / k
    proj = np.maximum(z - tau, 0.0)
    support = np.flatnonzero(proj > 0)
    return SparsemaxResult(projection=proj, support=support, tau=float(tau))


def support_size(z) -> int:
    """Number of strictly positive entries the simplex projection keeps.

    Follows the sorted-coordinate rule k = max{k : 1 + k z_(k) > sum_{j<=k}
    z_(j)} with z sorted descending; invariant under adding a constant to z.
    """
    z = _as_finite_vector(z, "z")
    return _support_k(z)[0]


@dataclass(frozen=True)
class RankOneSystem:
    """(diag + u v^T) X = rhs with a strictly positive diagonal."""

    diag: np.ndarray  # length-d positive diagonal entries
    u: np.ndarray  # length-d
    v: np.ndarray  # length-d
    rhs: np.ndarray  # (d, p)

    def __post_init__(self):
        d = self.diag.shape[0]
        if self.diag.ndim != 1 or self.u.shape != (d,) or self.v.shape != (d,):
            raise DomainError("diag, u, v must be matching 1-d vectors")
        if self.rhs.ndim != 2 or self.rhs.shape[0] != d:
            raise DomainError(f"rhs must be (d, p) with d = {d}")


DIAG_FLOOR = 1e-12


def sherman_morrison_solve(sys: RankOneSystem) -> np.ndarray:
    """Solve (diag + u v^T) X = rhs in O(d p) via the rank-one inverse.

    X = D^-1 rhs - D^-1 u (v^T D^-1 rhs) / (1 + v^T D^-1 u).
    """
    if np.any(sys.diag < DIAG_FLOOR):
        raise DomainError(
            f"diagonal entries must be at least {DIAG_FLOOR}; "
            f"smallest is {sys.diag.min():.3g}"
        )
    dinv_rhs = sys.rhs / sys.diag[:, None]
    dinv_u = sys.u / sys.diag
    denom = 1.0 + float(sys.v @ dinv_u)
    if abs(denom) < 1e-10:
        raise SingularSystemError(
            f"rank-one denominator {denom:.3g} is numerically singular"
        )
    return dinv_rhs - np.outer(dinv_u, sys.v @ dinv_rhs) / denom


def support_weights(pi, k_h: int) -> np.ndarray:
    """Reweighting vector z over states: k_h * pi_i / (top-k_h mass) on the
    k_h largest-mass states, zero elsewhere.

    This is the cheap corrected-gradient path: scaling state i's gradient
    contribution by z_i. Uniform pi with full support gives all ones.
    """
    pi = _as_finite_vector(pi, "pi")
    d = pi.size
    if not 1 <= k_h <= d:
        raise DomainError(f"k_h must be in [1, {d}], got {k_h}")
    order = np.argsort(-pi, kind="stable")
    top = order[:k_h]
    if np.any(pi[top] <= 0):
        raise DomainError("support weights need positive mass on the top-k states")
    z = np.zeros(d)
    z[top] = k_h * pi[top] / pi[top].sum()
    return z


def eta_for_support(pi, k_target: int, grid=None) -> tuple[float, int]:
    """Smallest grid threshold whose induced support size matches k_target.

    The induced support size of a threshold eta is the number of pi entries
    at least eta, which steps down as eta grows. Returns (eta, achieved k);
    when no grid value hits k_target exactly the closest achievable size
    wins, ties broken toward the smaller eta.
    """
    pi = _as_finite_vector(pi, "pi")
    if not 1 <= k_target <= pi.size:
        raise DomainError(f"k_target must be in [1, {pi.size}], got {k_target}")
    grid = DEFAULT_ETA_GRID if grid is None else _as_finite_vector(grid, "grid")
    counts = (pi[None, :] >= grid[:, None]).sum(axis=1)
    usable = counts >= 1
    if not np.any(usable):
        raise DomainError("every grid threshold empties the support")
    gap = np.where(usable, np.abs(counts - k_target), np.iinfo(np.int64).max)
    best = int(np.argmin(gap))  # argmin takes the first, i.e. smallest eta
    return float(grid[best]), int(counts[best])


def corrected_gradient(pi, grad_pi, k_h: int) -> np.ndarray:
    """Solve the implicit-gradient system restricted to the top-k_h support.

    Assembling the fixed-point Jacobians yields A X = B with, in the basis
    sorted by decreasing pi, A = -(M + u v^T) on the support block and the
    identity off it, where M = diag(eta / pi_i), u = (1/k_h) 1, and
    v = 1 - eta / pi_i; B = -eta D (grad_pi / pi) with D the centering
    matrix diag(r) - r r^T / k_h of the support indicator r. The solution
    is independent of eta (it cancels between M, v, and B), so a reference
    value of 1 is used; rows off the support are zero.
    """
    pi = _as_finite_vector(pi, "pi")
    d = pi.size
    grad_pi = np.asarray(grad_pi, dtype=np.float64)
    if grad_pi.ndim != 2 or grad_pi.shape[0] != d:
        raise DomainError(f"grad_pi must be (d, p) with d = {d}")
    if not 1 <= k_h <= d:
        raise DomainError(f"k_h must be in [1, {d}], got {k_h}")
    order = np.argsort(-pi, kind="stable")
    top = order[:k_h]
    pi_top = pi[top]
    if np.any(pi_top <= 0):
        raise DomainError("corrected gradient needs positive mass on the support")
    eta = 1.0
    g = grad_pi[top] / pi_top[:, None]
    centered = g - g.sum(axis=0, keepdims=True) / k_h
    system = RankOneSystem(
        diag=eta / pi_top,
        u=np.full(k_h, 1.0 / k_h),
        v=1.0 - eta / pi_top,
        rhs=eta * centered,
    )
    out = np.zeros_like(grad_pi)
    out[top] = sherman_morrison_solve(system)
    return out
