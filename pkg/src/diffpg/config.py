"""Sectioned key = value config files and their typed schema.

The format is deliberately dumb: named sections in square brackets, one
``key = value`` pair per line, full-line comments starting with ``#`` or
``;``. Parsing applies defaults and type-checks every value, rejecting
unknown sections, unknown keys, and duplicates. Rendering emits a canonical
form (fixed section and key order, shortest float spelling), so
parse -> render -> parse is a fixed point.
"""

import hashlib
from dataclasses import dataclass, field

from diffpg.ctmc import NoiseSchedule, SequenceSpec, TokenGenerator, Vocab, build_generator
from diffpg.errors import ConfigError
from diffpg.rewards import RewardFn, make_reward
from diffpg.sampling import SamplerConfig
from diffpg.train import TrainConfig

_REQUIRED = object()  # sentinel: key must appear in the file


def _parse_int(text: str) -> int:
    try:
        return int(text, 10)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}") from None


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}") from None


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ConfigError(f"expected true or false, got {text!r}")


def _parse_int_list(text: str):
    parts = text.split()
    if not parts:
        raise ConfigError("expected at least one integer")
    return tuple(_parse_int(p) for p in parts)


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default); _REQUIRED means the file must set it, None means
# the key is optional and may be absent entirely.
SCHEMA = {
    "space": {
        "m": (_parse_int, _REQUIRED),
        "n": (_parse_int, _REQUIRED),
        "kind": (str, _REQUIRED),
        "mask_index": (_parse_int, None),
    },
    "schedule": {
        "kind": (str, "linear"),
        "sigma_min": (_parse_float, _REQUIRED),
        "sigma_max": (_parse_float, _REQUIRED),
        "horizon": (_parse_float, 1.0),
    },
    "sampler": {
        "dt": (_parse_float, _REQUIRED),
        "t_stop": (_parse_float, None),
        "corrector_steps": (_parse_int, 0),
        "corrector_dt": (_parse_float, None),
        "corrector_after_stop": (_parse_int, 0),
    },
    "train": {
        "S": (_parse_int, 40),
        "K": (_parse_int, 2),
        "N": (_parse_int, 8),
        "G": (_parse_int, 8),
        "M": (_parse_int, 4),
        "eps": (_parse_float, 0.2),
        "alpha": (_parse_float, 0.05),
        "lr": (_parse_float, 1e-4),
        "T": (_parse_float, 1.0),
        "T0": (_parse_float, 1.0),
        "n_steps": (_parse_int, 64),
        "variant": (str, "ppo"),
        "gf_mode": (_parse_bool, False),
        "step_schedule": (str, "constant"),
        "seed": (_parse_int, 0),
        "snis_dt": (_parse_float, None),
    },
    "reward": {
        "name": (str, _REQUIRED),
        "pattern": (_parse_int_list, None),
        "token": (_parse_int, None),
        "target": (_parse_float, None),
        "token_sum_even": (_parse_bool, None),
    },
    "score": {
        "n_buckets": (_parse_int, 16),
        "init_scale": (_parse_float, 0.0),
    },
    "paths": {
        "checkpoint_dir": (str, "."),
        "log_dir": (str, "."),
        "data": (str, None),  # sequences file consumed by pretrain
    },
}

# parameters each reward accepts; extras in the file are rejected
REWARD_PARAMS = {
    "motif_count": ("pattern",),
    "target_composition": ("token", "target"),
    "parity": ("token_sum_even",),
}


@dataclass(frozen=True)
class ConfigFile:
    """Parsed and validated configuration, one dict per section."""

    space: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    reward: dict = field(default_factory=dict)
    score: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return getattr(self, name)

    def build_space(self) -> tuple[SequenceSpec, TokenGenerator]:
        s = self.space
        vocab = Vocab(size=s["m"], mask_index=s.get("mask_index"))
        spec = SequenceSpec(vocab=vocab, length=s["n"])
        return spec, build_generator(vocab, s["kind"])

    def build_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return NoiseSchedule(
            kind=s["kind"], sigma_min=s["sigma_min"],
            sigma_max=s["sigma_max"], horizon=s["horizon"],
        )

    def build_sampler(self) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(
            dt=s["dt"],
            t_stop=s.get("t_stop"),
            corrector_steps=s["corrector_steps"],
            corrector_dt=s.get("corrector_dt"),
            corrector_after_stop=s["corrector_after_stop"],
        )

    def build_train(self) -> TrainConfig:
        t = dict(self.train)
        snis_dt = t.pop("snis_dt", None)
        return TrainConfig(snis_dt=snis_dt, **t)

    def build_reward(self) -> RewardFn:
        r = self.reward
        name = r["name"]
        if name not in REWARD_PARAMS:
            raise ConfigError(
                f"unknown reward {name!r}; known: {sorted(REWARD_PARAMS)}"
            )
        allowed = REWARD_PARAMS[name]
        given = {k: v for k, v in r.items() if k != "name"}
        stray = sorted(set(given) - set(allowed))
        if stray:
            raise ConfigError(f"reward {name!r} does not take {stray}")
        if name == "motif_count":
            if "pattern" not in given:
                raise ConfigError("motif_count needs a pattern")
            return make_reward(name, pattern=list(given["pattern"]))
        if name == "target_composition":
            missing = sorted(set(allowed) - set(given))
            if missing:
                raise ConfigError(f"target_composition needs {missing}")
        return make_reward(name, **given)


def parse_config(text: str) -> ConfigFile:
    """Parse sectioned key = value text, applying defaults and types."""
    sections: dict[str, dict] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{name}]")
            if name in sections:
                raise ConfigError(f"line {lineno}: duplicate section [{name}]")
            sections[name] = {}
            current = name
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA[current]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{current}]")
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        parser = SCHEMA[current][key][0]
        try:
            sections[current][key] = parser(value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from None

    out: dict[str, dict] = {}
    for name, keys in SCHEMA.items():
        got = sections.get(name, {})
        if name not in sections and any(d is _REQUIRED for _, d in keys.values()):
            raise ConfigError(f"missing section [{name}]")
        filled = {}
        for key, (_, default) in keys.items():
            if key in got:
                filled[key] = got[key]
            elif default is _REQUIRED:
                raise ConfigError(f"missing required key {key!r} in [{name}]")
            elif default is not None:
                filled[key] = default
        out[name] = filled
    return ConfigFile(**out)


def render_config(cfg: ConfigFile) -> str:
    """Canonical text form: schema section and key order, typed spellings."""
    lines = []
    for name, keys in SCHEMA.items():
        section = cfg.section(name)
        lines.append(f"[{name}]")
        for key in keys:
            if key in section:
                lines.append(f"{key} = {_render_value(section[key])}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> ConfigFile:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def save_config(cfg: ConfigFile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_config(cfg))


def config_digest(cfg: ConfigFile) -> str:
    """Stable hash of the canonical rendering, for run manifests."""
    return hashlib.sha256(render_config(cfg).encode("utf-8")).hexdigest()[:16]
