"""Reward expectations and their response to the power exponent.

The derivative of an expected reward along the power family equals the
covariance, under the powered distribution, between that reward and the
model's own log probability. This module evaluates such expectations
and covariances exactly by enumeration, checks the derivative against
central differences, and builds the hash-based synthetic rewards whose
alignment with the log probability is swept by one mixing parameter.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.special import logsumexp

from powerlab.distill import RewardFn
from powerlab.model import ARModel, PromptId, Sequence, seq_logprob
from powerlab.power import all_sequence_logprobs
from powerlab.rng import keyed_rng
from powerlab.tables import ResultTable

__all__ = [
    "hash_fraction",
    "NormalizationStats",
    "SyntheticRewardSpec",
    "synthetic_reward_spec",
    "synthetic_reward",
    "synthetic_reward_fn",
    "random_table_reward",
    "reward_expectation",
    "covariance_under_power",
    "DerivativeCheck",
    "reward_derivative_check",
    "RewardCurve",
    "reward_curve",
    "integrated_covariance",
    "covariance_gain_sweep",
]


def hash_fraction(seq) -> float:
    """Map a token tuple to [0, 1) via SHA-256.

    The digest input is the decimal token ids joined by commas, UTF-8
    encoded; the value is the first 8 digest bytes read big-endian over
    2^64. Deterministic across platforms and runs.
    """
    tokens = seq.tokens if isinstance(seq, Sequence) else tuple(seq)
    payload = ",".join(str(int(t)) for t in tokens).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def _hash_bits(tokens: tuple[int, ...]) -> int:
    payload = ",".join(str(int(t)) for t in tokens).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


@dataclass(frozen=True)
class NormalizationStats:
    """Exact base-distribution moments used to z-score reward parts."""

    mean_self: float
    std_self: float
    mean_hash: float
    std_hash: float


@dataclass(frozen=True)
class SyntheticRewardSpec:
    """Mixture reward: lam z_self + sqrt(1 - lam^2) (z_hash + noise).

    ``z_self`` standardizes the total log probability, ``z_hash`` the
    hash fraction, both with exact base moments. The noise is Gaussian
    with scale ``sigma``, keyed by (seed, hash bits) so the reward is a
    fixed deterministic function of the sequence.
    """

    lam: float
    sigma: float
    seed: int
    stats: NormalizationStats

    def __post_init__(self):
        if not -1.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [-1, 1], got {self.lam}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        if self.stats.std_self <= 0.0 or self.stats.std_hash <= 0.0:
            raise ValueError("z-scoring needs strictly positive stds")


def _support_moments(values: np.ndarray, probs: np.ndarray) -> tuple[float, float]:
    mean = float(np.dot(probs, values))
    var = float(np.dot(probs, (values - mean) ** 2))
    return mean, math.sqrt(var)


def _enumerated_base(model: ARModel, prompt_id: PromptId):
    logp = all_sequence_logprobs(model, prompt_id)
    mask = logp > -np.inf
    probs = np.exp(logp[mask])
    return logp, mask, probs


def _token_tuples(model: ARModel, indices: np.ndarray) -> list[tuple[int, ...]]:
    out = []
    sizes = model.vocab_sizes
    for idx in indices:
        idx = int(idx)
        toks = []
        for v in reversed(sizes):
            toks.append(idx % v)
            idx //= v
        out.append(tuple(reversed(toks)))
    return out


def synthetic_reward_spec(
    model: ARModel,
    prompt_id: PromptId,
    lam: float,
    sigma: float = 0.5,
    seed: int = 0,
) -> SyntheticRewardSpec:
    """Build a mixture reward spec with exact base moments for z-scoring."""
    logp, mask, probs = _enumerated_base(model, prompt_id)
    mean_self, std_self = _support_moments(logp[mask], probs)
    hashes = np.array(
        [hash_fraction(toks) for toks in _token_tuples(model, np.flatnonzero(mask))]
    )
    mean_hash, std_hash = _support_moments(hashes, probs)
    if std_self <= 0.0:
        raise ValueError("base log probability is constant; z-score undefined")
    if std_hash <= 0.0:
        raise ValueError("hash reward is constant; z-score undefined")
    stats = NormalizationStats(mean_self, std_self, mean_hash, std_hash)
    return SyntheticRewardSpec(float(lam), float(sigma), int(seed), stats)


def _noise(spec: SyntheticRewardSpec, tokens: tuple[int, ...]) -> float:
    if spec.sigma == 0.0:
        return 0.0
    rng = keyed_rng(spec.seed, _hash_bits(tokens))
    return spec.sigma * float(rng.standard_normal())


def synthetic_reward(spec: SyntheticRewardSpec, seq: Sequence, model: ARModel) -> float:
    """Evaluate the mixture reward on one sequence.

    At ``lam = 1`` this is exactly the standardized log probability; the
    hash part and its noise are skipped so no rounding enters.
    """
    z_self = (seq_logprob(model, seq) - spec.stats.mean_self) / spec.stats.std_self
    coef = math.sqrt(max(0.0, 1.0 - spec.lam * spec.lam))
    if coef == 0.0:
        return spec.lam * z_self
    z_hash = (hash_fraction(seq) - spec.stats.mean_hash) / spec.stats.std_hash
    return spec.lam * z_self + coef * (z_hash + _noise(spec, seq.tokens))


def synthetic_reward_fn(spec: SyntheticRewardSpec, model: ARModel) -> RewardFn:
    def reward(prompt_id: PromptId, seq: Sequence) -> float:
        return synthetic_reward(spec, seq, model)

    return reward


def random_table_reward(
    model: ARModel, rng: np.random.Generator, scale: float = 1.0
) -> RewardFn:
    """Gaussian reward table over all sequences, fixed by the generator."""
    tables: dict[PromptId, np.ndarray] = {}
    n = model.n_sequences()
    for pid in model.prompt_ids:
        tables[pid] = scale * rng.standard_normal(n)
    sizes = model.vocab_sizes

    def reward(prompt_id: PromptId, seq: Sequence) -> float:
        idx = 0
        for tok, v in zip(seq.tokens, sizes):
            idx = idx * v + tok
        return float(tables[prompt_id][idx])

    return reward


def _reward_vector(
    model: ARModel, reward: RewardFn, prompt_id: PromptId
) -> tuple[np.ndarray, np.ndarray]:
    """(base log probs, reward values) on the support, aligned."""
    logp, mask, _ = _enumerated_base(model, prompt_id)
    values = np.zeros(logp.shape)
    for idx, toks in zip(np.flatnonzero(mask), _token_tuples(model, np.flatnonzero(mask))):
        values[idx] = reward(prompt_id, Sequence(prompt_id, toks))
    return logp[mask], values[mask]


def _power_weights(logp: np.ndarray, alpha: float) -> np.ndarray:
    scaled = alpha * logp
    return np.exp(scaled - logsumexp(scaled))


def _expectation(logp: np.ndarray, values: np.ndarray, alpha: float) -> float:
    return float(np.dot(_power_weights(logp, alpha), values))


def _covariance(
    logp: np.ndarray, f: np.ndarray, g: np.ndarray, alpha: float
) -> float:
    w = _power_weights(logp, alpha)
    mf = float(np.dot(w, f))
    mg = float(np.dot(w, g))
    return float(np.dot(w, (f - mf) * (g - mg)))


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not math.isfinite(alpha) or alpha <= 0.0:
        raise ValueError(f"alpha must be positive and finite, got {alpha}")
    return alpha


def reward_expectation(
    model: ARModel, alpha: float, reward: RewardFn, prompt_id: PromptId
) -> float:
    """Expected reward under the powered distribution, by enumeration."""
    alpha = _check_alpha(alpha)
    logp, values = _reward_vector(model, reward, prompt_id)
    return _expectation(logp, values, alpha)


def covariance_under_power(
    model: ARModel,
    alpha: float,
    f: RewardFn,
    g: RewardFn,
    prompt_id: PromptId,
) -> float:
    """Covariance of two rewards under the powered distribution."""
    alpha = _check_alpha(alpha)
    logp, fv = _reward_vector(model, f, prompt_id)
    _, gv = _reward_vector(model, g, prompt_id)
    return _covariance(logp, fv, gv, alpha)


@dataclass(frozen=True)
class DerivativeCheck:
    """Covariance identity versus a central finite difference."""

    cov_value: float
    fd_estimate: float
    rel_err: float


def reward_derivative_check(
    model: ARModel,
    alpha: float,
    reward: RewardFn,
    prompt_id: PromptId,
    h: float = 1e-4,
) -> DerivativeCheck:
    """Compare d/dalpha E[reward] with Cov(reward, log pi) at ``alpha``.

    The derivative of the expected reward along the power family is the
    covariance with the model's own log probability; the finite
    difference is the independent cross-check.
    """
    alpha = _check_alpha(alpha)
    if h <= 0.0 or alpha - h <= 0.0:
        raise ValueError(f"h must be positive with alpha - h > 0, got h={h}")
    logp, values = _reward_vector(model, reward, prompt_id)
    cov = _covariance(logp, values, logp, alpha)
    upper = _expectation(logp, values, alpha + h)
    lower = _expectation(logp, values, alpha - h)
    fd = (upper - lower) / (2.0 * h)
    rel_err = abs(cov - fd) / max(abs(cov), 1e-8)
    return DerivativeCheck(cov, fd, rel_err)


@dataclass(frozen=True)
class RewardCurve:
    """Expected reward along a grid of powers, with local diagnostics."""

    alphas: tuple[float, ...]
    values: tuple[float, ...]
    covariances: tuple[float, ...]
    fd_estimates: tuple[float, ...]


def reward_curve(
    model: ARModel,
    reward: RewardFn,
    prompt_id: PromptId,
    alphas,
    h: float = 1e-4,
) -> RewardCurve:
    logp, values = _reward_vector(model, reward, prompt_id)
    out_a, out_v, out_c, out_fd = [], [], [], []
    for alpha in alphas:
        alpha = _check_alpha(alpha)
        out_a.append(alpha)
        out_v.append(_expectation(logp, values, alpha))
        out_c.append(_covariance(logp, values, logp, alpha))
        upper = _expectation(logp, values, alpha + h)
        lower = _expectation(logp, values, alpha - h)
        out_fd.append((upper - lower) / (2.0 * h))
    return RewardCurve(tuple(out_a), tuple(out_v), tuple(out_c), tuple(out_fd))


def integrated_covariance(
    model: ARModel,
    reward: RewardFn,
    prompt_id: PromptId,
    alpha_lo: float,
    alpha_hi: float,
    rel_tol: float = 1e-6,
) -> float:
    """Adaptive quadrature of Cov(reward, log pi) over a power interval."""
    _check_alpha(alpha_lo)
    _check_alpha(alpha_hi)
    logp, values = _reward_vector(model, reward, prompt_id)
    result, _ = quad(
        lambda a: _covariance(logp, values, logp, a),
        alpha_lo,
        alpha_hi,
        epsabs=1e-12,
        epsrel=rel_tol,
    )
    return float(result)


def covariance_gain_sweep(
    model: ARModel,
    alpha: float,
    lambdas,
    prompt_id: PromptId,
    sigma: float = 0.5,
    seed: int = 0,
) -> ResultTable:
    """Sweep the reward mixture and relate gains to integrated covariance.

    For each lambda the table records the covariance with the log
    probability at the base model, the covariance integrated from 1 to
    ``alpha``, and the actual change in expected reward between the two
    powers.
    """
    alpha = _check_alpha(alpha)
    table = ResultTable(("lambda", "cov_at_1", "integrated_cov", "gain", "alpha"))
    logp_all, mask, probs = _enumerated_base(model, prompt_id)
    logp = logp_all[mask]
    mean_self, std_self = _support_moments(logp, probs)
    if std_self <= 0.0:
        raise ValueError("base log probability is constant; z-score undefined")
    token_tuples = _token_tuples(model, np.flatnonzero(mask))
    hashes = np.array([hash_fraction(toks) for toks in token_tuples])
    mean_hash, std_hash = _support_moments(hashes, probs)
    if std_hash <= 0.0:
        raise ValueError("hash reward is constant; z-score undefined")
    z_self = (logp - mean_self) / std_self
    z_hash = (hashes - mean_hash) / std_hash
    stats = NormalizationStats(mean_self, std_self, mean_hash, std_hash)
    noise = np.array(
        [
            _noise(SyntheticRewardSpec(0.0, sigma, int(seed), stats), toks)
            for toks in token_tuples
        ]
    )
    for lam in lambdas:
        lam = float(lam)
        if not -1.0 <= lam <= 1.0:
            raise ValueError(f"lam must be in [-1, 1], got {lam}")
        coef = math.sqrt(max(0.0, 1.0 - lam * lam))
        if coef == 0.0:
            r = lam * z_self
        else:
            r = lam * z_self + coef * (z_hash + noise)
        cov1 = _covariance(logp, r, logp, 1.0)
        integrated, _ = quad(
            lambda a: _covariance(logp, r, logp, a),
            1.0,
            alpha,
            epsabs=1e-12,
            epsrel=1e-6,
        )
        gain = _expectation(logp, r, alpha) - _expectation(logp, r, 1.0)
        table.append(lam, cov1, float(integrated), gain, alpha)
    return table
