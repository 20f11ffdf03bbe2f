"""Tabular concrete-score models over bucketed time.

The score model stores log-ratios in a dense table indexed by
(time bucket, position, current token, proposed token). Ratios are
``exp(table[...])``, so a zero entry means "neighbor equally likely" and the
gradient of a single log-ratio with respect to the table is a one-hot
coordinate. Absorbing-kind models pin every entry that the reversal can
never consume to ``-inf`` (ratio zero), and those entries are excluded from
all gradient updates and finite differencing.

Checkpoint serialization lives here too: a single ``.npz`` with the table
plus a json header describing the dimensions and the noise schedule it was
trained under.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from diffpg.ctmc import NoiseSchedule, SequenceSpec, TokenGenerator
from diffpg.errors import ConfigError, DomainError

CHECKPOINT_FORMAT = "diffpg-score-v1"

PINNED = -np.inf  # sentinel for table entries the reversal never consumes


@dataclass(frozen=True)
class ScoreParams:
    """Learnable state of a tabular score model.

    table: (n_buckets, length, vocab, vocab) log-ratios; entry
        [b, i, c, a] scores rewriting token c at position i into token a
        during time bucket b.
    horizon: the diffusion horizon the bucket grid divides.
    """

    table: np.ndarray
    horizon: float

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.ndim != 4 or table.shape[2] != table.shape[3]:
            raise ConfigError(f"score table must be (B, n, m, m), got {table.shape}")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        object.__setattr__(self, "table", table)

    @property
    def n_buckets(self) -> int:
        return self.table.shape[0]

    def with_table(self, table: np.ndarray) -> "ScoreParams":
        return dataclasses.replace(self, table=table)

    def copy(self) -> "ScoreParams":
        return self.with_table(self.table.copy())

    def bucket_index(self, t_fwd) -> np.ndarray:
        """Map forward times in [0, horizon] to bucket indices."""
        t = np.asarray(t_fwd, dtype=np.float64)
        if np.any(t < -1e-12) or np.any(t > self.horizon + 1e-12):
            raise DomainError(f"time outside [0, {self.horizon}]")
        b = (t / self.horizon * self.n_buckets).astype(np.int64)
        return np.clip(b, 0, self.n_buckets - 1)

    def trainable_mask(self) -> np.ndarray:
        """Boolean mask of entries that gradient updates may touch."""
        mask = np.isfinite(self.table)
        m = self.table.shape[2]
        mask[:, :, np.arange(m), np.arange(m)] = False  # self slots are inert
        return mask


def init_score_params(
    spec: SequenceSpec,
    g: TokenGenerator,
    n_buckets: int = 16,
    horizon: float = 1.0,
    init_scale: float = 0.0,
    rng: np.random.Generator | None = None,
) -> ScoreParams:
    """Fresh score table: all ratios 1, plus optional Gaussian jitter.

    For absorbing generators only the unmasking entries
    [b, i, mask, a != mask] stay live; the rest are pinned, matching the
    fact that the reversal of an absorbing process only ever fills masks.
    """
    if n_buckets < 1:
        raise ConfigError("n_buckets must be at least 1")
    m, n = spec.vocab.size, spec.length
    table = np.zeros((n_buckets, n, m, m))
    if init_scale > 0.0:
        if rng is None:
            rng = np.random.default_rng()
        table += init_scale * rng.standard_normal(table.shape)
    if g.kind == "absorbing":
        mask_idx = spec.vocab.mask_index
        keep = np.zeros((m, m), dtype=bool)
        keep[mask_idx, :] = True
        keep[mask_idx, mask_idx] = False
        table = np.where(keep[None, None, :, :], table, PINNED)
    return ScoreParams(table=table, horizon=float(horizon))


class TabularScore:
    """Score provider reading ratios straight out of a parameter table."""

    def __init__(self, params: ScoreParams, spec: SequenceSpec):
        if params.table.shape[1] != spec.length:
            raise ConfigError("table length does not match sequence spec")
        if params.table.shape[2] != spec.vocab.size:
            raise ConfigError("table vocab does not match sequence spec")
        self.params = params
        self.spec = spec

    def log_ratios_batch(self, X: np.ndarray, t_fwd: float) -> np.ndarray:
        """(B, n, m) log-ratios for every single-position rewrite of each row."""
        X = np.asarray(X, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != self.spec.length:
            raise DomainError(f"expected (B, {self.spec.length}) batch, got {X.shape}")
        b = int(self.params.bucket_index(t_fwd))
        n = self.spec.length
        return self.params.table[b, np.arange(n)[None, :], X, :]

    def ratios_batch(self, X: np.ndarray, t_fwd: float) -> np.ndarray:
        with np.errstate(over="raise"):
            return np.exp(self.log_ratios_batch(X, t_fwd))

    def ratios(self, x: np.ndarray, t_fwd: float) -> np.ndarray:
        return self.ratios_batch(np.asarray(x)[None, :], t_fwd)[0]

    def log_ratios(self, x: np.ndarray, t_fwd: float) -> np.ndarray:
        return self.log_ratios_batch(np.asarray(x)[None, :], t_fwd)[0]

    def pair_log_ratio(
        self, Y: np.ndarray, Z: np.ndarray, t_fwd: float
    ) -> np.ndarray:
        """Modeled log-ratio between arbitrary state pairs, (K,).

        The table factorizes over positions, so the pair ratio is the sum of
        single-position rewrite ratios. A pinned rewrite (token to mask) is
        recovered from the reciprocal of its live opposite slot; if neither
        direction is finite the pair is unreachable and the result is -inf.
        """
        Y = np.asarray(Y, dtype=np.int64)
        Z = np.asarray(Z, dtype=np.int64)
        if Y.shape != Z.shape or Y.ndim != 2 or Y.shape[1] != self.spec.length:
            raise DomainError(f"expected matching (K, {self.spec.length}) pairs")
        b = int(self.params.bucket_index(t_fwd))
        i_idx = np.arange(self.spec.length)[None, :]
        direct = self.params.table[b, i_idx, Y, Z]
        recip = -self.params.table[b, i_idx, Z, Y]
        step = np.where(np.isfinite(direct), direct, recip)
        step = np.where(np.isfinite(step), step, -np.inf)
        step = np.where(Y == Z, 0.0, step)
        return step.sum(axis=1)


def zeros_like_table(params: ScoreParams) -> np.ndarray:
    """Gradient accumulator matching the parameter table."""
    return np.zeros_like(params.table)


def accumulate_onehot(
    grad: np.ndarray,
    bucket: int,
    positions: np.ndarray,
    current: np.ndarray,
    proposed: np.ndarray,
    weights: np.ndarray,
) -> None:
    """Scatter-add one-hot log-ratio gradients into an accumulator.

    Each entry k contributes weights[k] at coordinate
    (bucket, positions[k], current[k], proposed[k]). Duplicate coordinates
    sum, which is exactly what a sum of one-hot gradients should do.
    """
    np.add.at(grad, (bucket, positions, current, proposed), weights)


def schedule_hash(sched: NoiseSchedule) -> str:
    """Stable digest of a noise schedule's defining fields."""
    canon = "|".join(
        [
            sched.kind,
            format(sched.sigma_min, ".17g"),
            format(sched.sigma_max, ".17g"),
            format(sched.horizon, ".17g"),
        ]
    )
    return hashlib.sha256(canon.encode("ascii")).hexdigest()


def save_checkpoint(
    path,
    params: ScoreParams,
    spec: SequenceSpec,
    g: TokenGenerator,
    sched: NoiseSchedule,
    extra: dict | None = None,
) -> None:
    """Write params plus a self-describing header to an .npz file."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "vocab_size": spec.vocab.size,
        "mask_index": spec.vocab.mask_index,
        "length": spec.length,
        "generator_kind": g.kind,
        "n_buckets": params.n_buckets,
        "horizon": params.horizon,
        "schedule": {
            "kind": sched.kind,
            "sigma_min": sched.sigma_min,
            "sigma_max": sched.sigma_max,
            "horizon": sched.horizon,
        },
        "schedule_hash": schedule_hash(sched),
    }
    if extra:
        meta["extra"] = extra
    with open(path, "wb") as fh:
        np.savez(fh, table=params.table, meta=np.frombuffer(
            json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
        ))


def load_checkpoint(path) -> tuple[ScoreParams, dict]:
    """Read a checkpoint, returning the params and the header dict."""
    try:
        with np.load(path) as data:
            table = data["table"]
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unknown checkpoint format {meta.get('format')!r}")
    expected = (meta["n_buckets"], meta["length"], meta["vocab_size"], meta["vocab_size"])
    if table.shape != expected:
        raise ConfigError(f"checkpoint table {table.shape} does not match header {expected}")
    return ScoreParams(table=table, horizon=float(meta["horizon"])), meta
