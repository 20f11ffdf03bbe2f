"""Command-line entry point wiring config files to the library.

Subcommands: pretrain, finetune, sample, evaluate, oracle-verify. Exit
status is 0 on success, 1 on domain errors, 2 on config errors (argparse
usage failures also exit 2). All randomness is controlled by --seed, which
overrides the seed in the [train] section.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from diffpg.config import ConfigFile, config_digest, load_config
from diffpg.ctmc import (
    NoiseSchedule,
    SequenceSpec,
    TokenGenerator,
    Vocab,
    build_generator,
    transition_kernel,
)
from diffpg.errors import ConfigError, DiffpgError
from diffpg.estimators import snis_marginal
from diffpg.implicit import RankOneSystem, sherman_morrison_solve, sparsemax
from diffpg.oracle import (
    IndexCodec,
    TeacherScore,
    corrector_flow_apply,
    exact_forward_marginals,
    forward_marginals_kernel,
)
from diffpg.sampling import sample_rollout
from diffpg.score import (
    ScoreParams,
    TabularScore,
    init_score_params,
    load_checkpoint,
    save_checkpoint,
    schedule_hash,
)
from diffpg.train import (
    TrainConfig,
    evaluate_policy,
    params_digest,
    pretrain_score,
    finetune_score,
)
from diffpg.estimators import path_kl


# ---------------------------------------------------------------------------
# sequences on disk: one per line, integer tokens space-separated, `#` headers


def write_sequences(path, seqs: np.ndarray, header: list[str]) -> None:
    """Write sequences as text; ``path`` of None writes to stdout."""
    lines = [f"# {h}" for h in header]
    lines.extend(" ".join(str(int(v)) for v in row) for row in np.asarray(seqs))
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise ConfigError(f"cannot write sequences to {path}: {exc}") from exc


def read_sequences(path) -> np.ndarray:
    """Read a sequences file back into an int array, skipping comments."""
    try:
        with open(path) as fh:
            raw = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read sequences from {path}: {exc}") from exc
    rows = []
    for ln, line in enumerate(raw, start=1):
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        try:
            rows.append([int(tok, 10) for tok in body.split()])
        except ValueError:
            raise ConfigError(
                f"{path}:{ln}: sequences must be space-separated integers"
            ) from None
    if not rows:
        raise ConfigError(f"{path}: no sequences found")
    width = len(rows[0])
    for ln_row, row in enumerate(rows):
        if len(row) != width:
            raise ConfigError(
                f"{path}: ragged sequence lengths ({width} vs {len(row)})"
            )
    return np.array(rows, dtype=np.int64)


# ---------------------------------------------------------------------------
# shared plumbing


def _ensure_parent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _train_config(cfg: ConfigFile, seed_override) -> TrainConfig:
    tcfg = cfg.build_train()
    if seed_override is not None:
        tcfg = dataclasses.replace(tcfg, seed=seed_override)
    return tcfg


def _load_matching_checkpoint(path, spec, g, sched):
    """Load a checkpoint and reject it if it disagrees with the config."""
    params, meta = load_checkpoint(path)
    problems = []
    if meta["vocab_size"] != spec.vocab.size:
        problems.append(f"vocab size {meta['vocab_size']} != {spec.vocab.size}")
    if meta["length"] != spec.length:
        problems.append(f"length {meta['length']} != {spec.length}")
    if meta["generator_kind"] != g.kind:
        problems.append(f"generator {meta['generator_kind']!r} != {g.kind!r}")
    if meta.get("mask_index") != spec.vocab.mask_index:
        problems.append(
            f"mask_index {meta.get('mask_index')} != {spec.vocab.mask_index}"
        )
    if meta.get("schedule_hash") != schedule_hash(sched):
        problems.append("noise schedule differs from the one it was trained under")
    if problems:
        raise ConfigError(
            f"checkpoint {path} does not match config: " + "; ".join(problems)
        )
    return params, meta


def _toy_dataset(
    spec: SequenceSpec, g: TokenGenerator, rng: np.random.Generator, rows: int
) -> np.ndarray:
    """Uniform random sequences over the clean alphabet, for demo pretraining."""
    tokens = [
        a
        for a in range(spec.vocab.size)
        if not (g.kind == "absorbing" and a == spec.vocab.mask_index)
    ]
    return rng.choice(np.array(tokens, dtype=np.int64), size=(rows, spec.length))


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_pretrain(ns) -> int:
    cfg = load_config(ns.config)
    spec, g = cfg.build_space()
    sched = cfg.build_schedule()
    tcfg = _train_config(cfg, ns.seed)
    data_path = cfg.paths.get("data")
    if data_path is not None:
        dataset = read_sequences(data_path)
    else:
        rows = ns.n_samples if ns.n_samples is not None else 256
        dataset = _toy_dataset(spec, g, np.random.default_rng(tcfg.seed), rows)
    params, losses = pretrain_score(
        dataset,
        tcfg,
        spec,
        g,
        sched,
        n_buckets=cfg.score["n_buckets"],
        init_scale=cfg.score["init_scale"],
    )
    out = ns.out or os.path.join(cfg.paths["checkpoint_dir"], "pretrained.npz")
    _ensure_parent(out)
    save_checkpoint(
        out,
        params,
        spec,
        g,
        sched,
        extra={"stage": "pretrained", "config": config_digest(cfg), "seed": tcfg.seed},
    )
    if not ns.quiet:
        tail = f"final loss {losses[-1]:.6g}" if len(losses) else "no steps taken"
        print(f"pretrain: {tcfg.S} steps on {dataset.shape[0]} sequences, {tail}")
        print(f"wrote {out}")
    return 0


def _cmd_finetune(ns) -> int:
    cfg = load_config(ns.config)
    spec, g = cfg.build_space()
    sched = cfg.build_schedule()
    tcfg = _train_config(cfg, ns.seed)
    reward = cfg.build_reward()
    pre, _ = _load_matching_checkpoint(ns.checkpoint, spec, g, sched)
    params, log = finetune_score(pre, reward, tcfg, spec, g, sched)
    out = ns.out or os.path.join(cfg.paths["checkpoint_dir"], "finetuned.npz")
    _ensure_parent(out)
    save_checkpoint(
        out,
        params,
        spec,
        g,
        sched,
        extra={"stage": "finetuned", "config": config_digest(cfg), "seed": tcfg.seed},
    )
    metrics = os.path.join(cfg.paths["log_dir"], "metrics.csv")
    _ensure_parent(metrics)
    log.to_csv(metrics)
    if not ns.quiet:
        done = [r for r in log.records if not r.failure]
        failed = len(log.records) - len(done)
        if done:
            last = done[-1]
            print(
                f"finetune: {len(log.records)} iterations ({failed} aborted), "
                f"final mean reward {last.mean_reward:.6g}, "
                f"median {last.median_reward:.6g}"
            )
        else:
            print(f"finetune: every iteration aborted ({failed} failures)")
        print(f"wrote {out}")
        print(f"wrote {metrics}")
    return 0


def _cmd_sample(ns) -> int:
    cfg = load_config(ns.config)
    spec, g = cfg.build_space()
    sched = cfg.build_schedule()
    sampler_cfg = cfg.build_sampler()
    seed = ns.seed if ns.seed is not None else cfg.train["seed"]
    n = ns.n_samples if ns.n_samples is not None else 16
    if n < 1:
        raise ConfigError(f"--n-samples must be positive, got {n}")
    params, _ = _load_matching_checkpoint(ns.checkpoint, spec, g, sched)
    score = TabularScore(params, spec)
    roll = sample_rollout(
        score, g, sched, spec, sampler_cfg, np.random.default_rng(seed), n
    )
    header = [
        "diffpg sequences",
        f"config = {config_digest(cfg)}",
        f"checkpoint = {params_digest(params)}",
        f"seed = {seed}",
        f"n_samples = {n}",
    ]
    write_sequences(ns.out, roll.finals, header)
    if ns.out is not None and not ns.quiet:
        print(f"wrote {n} sequences to {ns.out}")
    return 0


def _cmd_evaluate(ns) -> int:
    cfg = load_config(ns.config)
    spec, g = cfg.build_space()
    sched = cfg.build_schedule()
    tcfg = cfg.build_train()
    reward = cfg.build_reward()
    n = ns.n_samples if ns.n_samples is not None else 512
    params, _ = _load_matching_checkpoint(ns.checkpoint, spec, g, sched)
    summary = evaluate_policy(
        params, reward, n, tcfg, spec, g, sched, seed=ns.seed
    )
    seed = ns.seed if ns.seed is not None else tcfg.seed
    line = (
        f"mean = {summary.mean:.10g}, median = {summary.median:.10g}, "
        f"std = {summary.std:.10g}, n = {n}, seed = {seed}"
    )
    print(line)
    if ns.out is not None:
        _ensure_parent(ns.out)
        body = [
            f"reward = {reward.name}",
            f"mean = {summary.mean:.10g}",
            f"median = {summary.median:.10g}",
            f"std = {summary.std:.10g}",
            f"n_samples = {n}",
            f"seed = {seed}",
            f"config = {config_digest(cfg)}",
            f"checkpoint = {params_digest(params)}",
        ]
        try:
            with open(ns.out, "w") as fh:
                fh.write("\n".join(body) + "\n")
        except OSError as exc:
            raise ConfigError(f"cannot write summary to {ns.out}: {exc}") from exc
    return 0


# ---------------------------------------------------------------------------
# oracle-verify: fast invariant suite over the exact reference machinery


def _kl(q: np.ndarray, p: np.ndarray) -> float:
    live = q > 0
    return float(np.sum(q[live] * (np.log(q[live]) - np.log(p[live]))))


def _check_closed_form_marginal():
    vocab = Vocab(size=2)
    spec = SequenceSpec(vocab=vocab, length=1)
    g = build_generator(vocab, "uniform")
    sched = NoiseSchedule(sigma_min=1.0, sigma_max=1.0, horizon=2.0)
    p0 = np.array([1.0, 0.0])
    worst = 0.0
    for t in (0.1, 0.5, 1.0, 2.0):
        p = forward_marginals_kernel(g, sched, spec, p0, t)
        worst = max(worst, abs(p[0] - 0.5 * (1 + np.exp(-t))))
    return worst < 1e-6, f"max deviation {worst:.3e} (tol 1e-6)"


def _check_kernel_vs_ode():
    vocab = Vocab(size=3, mask_index=2)
    spec = SequenceSpec(vocab=vocab, length=2)
    sched = NoiseSchedule(sigma_min=0.2, sigma_max=2.0)
    rng = np.random.default_rng(11)
    worst = 0.0
    for kind in ("uniform", "absorbing"):
        g = build_generator(vocab, kind)
        p0 = rng.dirichlet(np.ones(spec.num_states))
        for t in (0.3, 0.8):
            a = forward_marginals_kernel(g, sched, spec, p0, t)
            b = exact_forward_marginals(g, sched, spec, p0, t, steps=512)
            worst = max(worst, float(np.max(np.abs(a - b))))
    return worst < 1e-8, f"kernel vs integrator gap {worst:.3e} (tol 1e-8)"


def _check_kernel_columns():
    rng = np.random.default_rng(23)
    vocab = Vocab(size=5, mask_index=4)
    sched = NoiseSchedule(sigma_min=0.1, sigma_max=3.0)
    worst_col = 0.0
    worst_gen = 0.0
    for kind in ("uniform", "absorbing"):
        g = build_generator(vocab, kind)
        worst_gen = max(worst_gen, float(np.max(np.abs(g.base.sum(axis=0)))))
        for _ in range(8):
            s = rng.uniform(0.0, 0.9)
            t = s + rng.uniform(0.0, 1.0 - s)
            k = transition_kernel(g, sched, s, t)
            worst_col = max(worst_col, float(np.max(np.abs(k.sum(axis=0) - 1))))
            if np.any(k < -1e-15):
                return False, "kernel produced a negative probability"
    ok = worst_col < 1e-12 and worst_gen < 1e-12
    return ok, f"column sums off by {worst_col:.1e}, generator by {worst_gen:.1e}"


def _check_reversal_stationarity():
    vocab = Vocab(size=3)
    spec = SequenceSpec(vocab=vocab, length=2)
    g = build_generator(vocab, "uniform")
    sched = NoiseSchedule(sigma_min=0.2, sigma_max=2.0)
    codec = IndexCodec(spec)
    rng = np.random.default_rng(7)
    p0 = rng.dirichlet(np.ones(spec.num_states))
    teacher = TeacherScore(g, sched, spec, p0)
    worst = 0.0
    for t in rng.uniform(0.05, sched.horizon, size=8):
        p_t = forward_marginals_kernel(g, sched, spec, p0, float(t))
        resid = corrector_flow_apply(teacher, g, sched, codec, float(t))(p_t)
        worst = max(worst, float(np.max(np.abs(resid))))
    return worst < 1e-8, f"sup |(Q + Qbar) p_t| = {worst:.3e} (tol 1e-8)"


def _check_corrector_kl_descent():
    vocab = Vocab(size=3)
    spec = SequenceSpec(vocab=vocab, length=2)
    g = build_generator(vocab, "uniform")
    sched = NoiseSchedule(sigma_min=0.2, sigma_max=2.0)
    codec = IndexCodec(spec)
    rng = np.random.default_rng(5)
    p0 = rng.dirichlet(np.ones(spec.num_states))
    teacher = TeacherScore(g, sched, spec, p0)
    t = 0.6
    p_t = forward_marginals_kernel(g, sched, spec, p0, t)
    apply = corrector_flow_apply(teacher, g, sched, codec, t)
    d = spec.num_states
    gen = np.column_stack([apply(col) for col in np.eye(d)])
    h = 0.9 / float(np.max(-np.diag(gen)))
    step = np.eye(d) + h * gen  # column-stochastic for this h
    q = rng.dirichlet(np.ones(d))
    kls = [_kl(q, p_t)]
    for _ in range(20):
        q = step @ q
        kls.append(_kl(q, p_t))
    diffs = np.diff(kls)
    ok = bool(np.all(diffs <= 1e-12)) and kls[-1] < kls[0]
    return ok, f"KL {kls[0]:.4f} -> {kls[-1]:.2e} over 20 corrector steps"


def _check_snis_identity():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        cond = rng.uniform(0.01, 1.0, size=rng.integers(1, 30))
        est = snis_marginal(cond)
        exact = cond.size / np.sum(1.0 / cond)
        worst = max(worst, abs(est.value - exact) / exact)
    return worst < 1e-12, f"harmonic identity rel err {worst:.1e}"


def _check_snis_consistency():
    # two-state toy with a known marginal: proposals from the exact posterior
    prior = np.array([0.3, 0.7])
    cond = np.array([0.2, 0.05])
    marginal = float(prior @ cond)
    posterior = prior * cond / marginal
    rng = np.random.default_rng(17)
    reps = 400
    draws = rng.choice(2, size=(reps, 64), p=posterior)
    estimates = [snis_marginal(cond[row]).value for row in draws]
    rel = abs(float(np.mean(estimates)) - marginal) / marginal
    return rel < 0.05, f"mean of 400 estimates off by {rel:.2%} (tol 5%)"


def _project_simplex_bisect(z: np.ndarray) -> np.ndarray:
    lo, hi = float(z.min() - 1.0), float(z.max())
    for _ in range(100):
        tau = 0.5 * (lo + hi)
        total = np.maximum(z - tau, 0.0).sum()
        if total > 1.0:
            lo = tau
        else:
            hi = tau
    return np.maximum(z - 0.5 * (lo + hi), 0.0)


def _check_sparsemax():
    rng = np.random.default_rng(29)
    worst = 0.0
    for _ in range(200):
        z = rng.normal(scale=rng.uniform(0.2, 4.0), size=rng.integers(2, 9))
        gap = np.max(np.abs(sparsemax(z).projection - _project_simplex_bisect(z)))
        worst = max(worst, float(gap))
    return worst < 1e-10, f"sparsemax vs projection oracle gap {worst:.1e}"


def _check_sherman_morrison():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(20):
        d = 32
        diag = rng.uniform(0.5, 3.0, size=d)
        u = rng.normal(size=d)
        v = rng.normal(size=d)
        rhs = rng.normal(size=(d, 3))
        sys_ = RankOneSystem(diag=diag, u=u, v=v, rhs=rhs)
        fast = sherman_morrison_solve(sys_)
        dense = np.linalg.solve(np.diag(diag) + np.outer(u, v), rhs)
        worst = max(worst, float(np.max(np.abs(fast - dense)) / np.max(np.abs(dense))))
    return worst < 1e-8, f"rank-one vs dense solve rel gap {worst:.1e}"


def _check_path_kl():
    vocab = Vocab(size=2)
    spec = SequenceSpec(vocab=vocab, length=2)
    g = build_generator(vocab, "uniform")
    sched = NoiseSchedule(sigma_min=0.3, sigma_max=1.5)
    pre = init_score_params(spec, g, n_buckets=4, horizon=sched.horizon)
    rng = np.random.default_rng(41)
    from diffpg.sampling import SamplerConfig

    roll = sample_rollout(
        TabularScore(pre, spec), g, sched, spec, SamplerConfig(dt=1.0 / 32), rng, 16
    )
    at_pre = path_kl(pre, pre, roll, g, sched)
    if at_pre != 0.0:
        return False, f"path KL at the pretrained rates is {at_pre:.3e}, not 0"
    floor = np.inf
    mask = pre.trainable_mask()
    for _ in range(20):
        jitter = rng.normal(scale=0.5, size=pre.table.shape)
        params = pre.with_table(np.where(mask, pre.table + jitter, pre.table))
        floor = min(floor, path_kl(params, pre, roll, g, sched))
    return floor >= 0.0, f"smallest divergence over 20 perturbations {floor:.3e}"


ORACLE_CHECKS = (
    ("forward marginal closed form", _check_closed_form_marginal),
    ("kernel agrees with ODE integrator", _check_kernel_vs_ode),
    ("kernel columns stochastic", _check_kernel_columns),
    ("time reversal stationarity", _check_reversal_stationarity),
    ("corrector KL descent", _check_corrector_kl_descent),
    ("marginal estimate harmonic identity", _check_snis_identity),
    ("marginal estimate consistency", _check_snis_consistency),
    ("sparsemax projection", _check_sparsemax),
    ("rank-one solve", _check_sherman_morrison),
    ("path divergence sign and zero", _check_path_kl),
)


def _cmd_oracle_verify(ns) -> int:
    failures = 0
    for name, check in ORACLE_CHECKS:
        ok, detail = check()
        if not ok:
            failures += 1
        if ok and ns.quiet:
            continue
        print(f"{'PASS' if ok else 'FAIL'}  {name:<36} {detail}")
    if not ns.quiet or failures:
        print(f"{len(ORACLE_CHECKS) - failures}/{len(ORACLE_CHECKS)} checks passed")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffpg",
        description="Fine-tune discrete diffusion models with clipped policy gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True, checkpoint=False, checkpoint_required=False):
        if config_required:
            p.add_argument("--config", required=True, help="path to a config file")
        p.add_argument("--seed", type=int, default=None, help="override [train] seed")
        p.add_argument("--out", default=None, help="output path")
        if checkpoint:
            p.add_argument(
                "--checkpoint",
                required=checkpoint_required,
                help="score checkpoint (.npz)",
            )
        p.add_argument("--quiet", action="store_true", help="suppress progress chatter")

    p = sub.add_parser("pretrain", help="fit the score table by denoising")
    common(p)
    p.add_argument("--n-samples", type=int, default=None, help="toy dataset rows")
    p.set_defaults(handler=_cmd_pretrain)

    p = sub.add_parser("finetune", help="policy-gradient fine-tuning")
    common(p, checkpoint=True, checkpoint_required=True)
    p.set_defaults(handler=_cmd_finetune)

    p = sub.add_parser("sample", help="draw sequences from a checkpoint")
    common(p, checkpoint=True, checkpoint_required=True)
    p.add_argument("--n-samples", type=int, default=None, help="sequences to draw")
    p.set_defaults(handler=_cmd_sample)

    p = sub.add_parser("evaluate", help="reward statistics of a checkpoint")
    common(p, checkpoint=True, checkpoint_required=True)
    p.add_argument("--n-samples", type=int, default=None, help="evaluation draws")
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("oracle-verify", help="run the exact-reference invariant suite")
    common(p, config_required=False)
    p.set_defaults(handler=_cmd_oracle_verify)

    return parser


def run_command(argv) -> int:
    """Parse argv and dispatch; returns the process exit status."""
    parser = _build_parser()
    try:
        ns = parser.parse_args(list(argv))
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 2
        return code
    try:
        return ns.handler(ns)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except DiffpgError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
