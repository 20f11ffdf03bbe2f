"""Policy-gradient reward fine-tuning for discrete-state diffusion models.

The package trains continuous-time Markov chain (CTMC) diffusion models over
token sequences and fine-tunes them against scalar sequence rewards with
clipped policy-gradient surrogates. Every statistical estimator in the
package has an exhaustive small-state-space oracle counterpart used by the
test suite.

Layout:

- ``ctmc``        forward generators, noise schedules, transition kernels,
                  time-reversal rates
- ``oracle``      dense enumeration oracles (exact marginals, exact ratios,
                  exact policy distributions, finite-difference gradients)
- ``score``       tabular concrete-score model, teacher scores, checkpoints
- ``sampling``    tau-leaping samplers, corrector steps, trajectory records
- ``rewards``     deterministic sequence-reward registry
- ``estimators``  SNIS marginal estimation, policy-gradient estimators,
                  clipped surrogates, path-space KL
- ``implicit``    sparsemax projection and rank-one implicit-gradient solves
- ``train``       pretraining and fine-tuning loops, run logs
- ``config``      sectioned key=value run configuration files
- ``cli``         command-line entry point
"""

from diffpg.config import load_config, parse_config, render_config
from diffpg.ctmc import (
    NoiseSchedule,
    SequenceSpec,
    TokenGenerator,
    Vocab,
    build_generator,
    reverse_rates,
    transition_kernel,
)
from diffpg.errors import ConfigError, DiffpgError, DomainError
from diffpg.rewards import make_reward
from diffpg.sampling import SamplerConfig, sample_rollout
from diffpg.score import (
    ScoreParams,
    TabularScore,
    init_score_params,
    load_checkpoint,
    save_checkpoint,
)
from diffpg.train import (
    TrainConfig,
    evaluate_policy,
    pretrain_score,
    finetune_score,
)

__all__ = [
    "ConfigError",
    "DiffpgError",
    "DomainError",
    "NoiseSchedule",
    "SamplerConfig",
    "ScoreParams",
    "SequenceSpec",
    "TabularScore",
    "TokenGenerator",
    "TrainConfig",
    "Vocab",
    "build_generator",
    "evaluate_policy",
    "init_score_params",
    "load_checkpoint",
    "load_config",
    "make_reward",
    "parse_config",
    "pretrain_score",
    "render_config",
    "reverse_rates",
    "sample_rollout",
    "save_checkpoint",
    "finetune_score",
    "transition_kernel",
]

__version__ = "0.1.0"
