"""Exact power distributions of finite autoregressive models.

Raising a sequence model's distribution to a power and renormalizing at
the sequence level is not the same thing as tempering each next-token
step; this package makes the difference computable. It enumerates the
powered distribution exactly on finite tabular models, samples it with
importance sampling and blockwise Metropolis-Hastings, connects it to
KL-regularized self-reward optimization, and distills it into tabular
students, all with seeded, reproducible experiments.
"""

from powerlab.distill import (
    DistillDataset,
    ExactPowerSampler,
    FlaggedValue,
    TabularStudent,
    best_of_n_self_reward,
    collect_distill_dataset,
    fit_tabular_mle,
    hellinger_sq,
    kl_divergence,
    kl_rl_objective,
    random_policy,
    rl_kl_decomposition_check,
    self_reward_fn,
    sharpening_prob,
    teacher_sample,
    tilted_policy,
)
from powerlab.harness import CommandReport, ConfigError, run_experiment
from powerlab.model import (
    ARModel,
    ProbRow,
    PromptDist,
    Sequence,
    build_synthetic_two_step,
    load_model,
    model_from_rows,
    powerlaw_suffix_row,
    random_tabular_model,
    sample_sequence,
    save_model,
    seq_logprob,
    seq_logprob_per_token,
    suffix_exponent,
    zipf_row,
)
from powerlab.power import (
    PowerCache,
    ResourceLimitError,
    SequenceDist,
    all_sequence_logprobs,
    build_power_cache,
    exact_power_dist,
    odds_correction,
    odds_correction_table,
    power_argmax_set,
    power_mass_on_argmax,
    power_next_token,
    rank_reversal_scan,
    renyi_entropy,
    suffix_logprobs,
    suffix_renyi_entropy,
    temp_next_token,
    tv_distance,
)
from powerlab.rewards import (
    DerivativeCheck,
    NormalizationStats,
    RewardCurve,
    SyntheticRewardSpec,
    covariance_gain_sweep,
    covariance_under_power,
    hash_fraction,
    integrated_covariance,
    random_table_reward,
    reward_curve,
    reward_derivative_check,
    reward_expectation,
    synthetic_reward,
    synthetic_reward_fn,
    synthetic_reward_spec,
)
from powerlab.rng import keyed_rng, make_rng, spawn_rngs
from powerlab.samplers import (
    MHConfig,
    MHSample,
    ParticleSet,
    ProposalKind,
    SamplerTables,
    SupportViolationError,
    ess_exact,
    ess_monte_carlo,
    incremental_weight,
    mh_power_sample,
    one_step_proposal,
    power_inf_sample,
    sis_run,
)

__version__ = "0.1.0"
