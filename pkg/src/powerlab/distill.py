"""KL-regularized tilting and offline power self-distillation.

The expected-reward-minus-KL objective is maximized in closed form by
tilting the base model with exp(reward / beta). When the reward is the
model's own log probability the tilt is exactly the powered distribution
with exponent 1 + 1/beta; the decomposition check here verifies that
identity term by term. Distillation draws completions from the powered
teacher, fits a tabular student by counting, and measures how sharply
the student concentrates on the maximizer set as the power grows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import logsumexp

from powerlab.model import (
    ARModel,
    ProbRow,
    PromptDist,
    PromptId,
    Sequence,
    model_from_rows,
    sample_sequence,
    seq_logprob,
    seq_logprob_per_token,
)
from powerlab.power import (
    SequenceDist,
    all_sequence_logprobs,
    exact_power_dist,
    power_argmax_set,
)
from powerlab.samplers import MHConfig, mh_power_sample

__all__ = [
    "RewardFn",
    "FlaggedValue",
    "kl_divergence",
    "kl_rl_objective",
    "tilted_policy",
    "rl_kl_decomposition_check",
    "self_reward_fn",
    "random_policy",
    "ExactPowerSampler",
    "teacher_sample",
    "DistillDataset",
    "collect_distill_dataset",
    "TabularStudent",
    "fit_tabular_mle",
    "sharpening_prob",
    "hellinger_sq",
    "best_of_n_self_reward",
]

RewardFn = Callable[[PromptId, Sequence], float]

MODE_TAGS = {"exact": "exact-enumeration", "mh": "mh"}


class FlaggedValue(NamedTuple):
    """A scalar plus a flag marking a support violation."""

    value: float
    support_violation: bool


def kl_divergence(p: SequenceDist, q: SequenceDist, prompt_id: PromptId) -> FlaggedValue:
    """KL(p || q) over full sequences for one prompt.

    Returns ``+inf`` with the flag set when p puts mass outside q's
    support.
    """
    lp = p.log_probs[prompt_id]
    lq = q.log_probs[prompt_id]
    if lp.shape != lq.shape:
        raise ValueError("distributions have different sequence spaces")
    mask = lp > -np.inf
    if np.any(lq[mask] == -np.inf):
        return FlaggedValue(math.inf, True)
    diff = lp[mask] - lq[mask]
    return FlaggedValue(float(np.dot(np.exp(lp[mask]), diff)), False)


def _eval_rewards(
    dist: SequenceDist, reward: RewardFn, prompt_id: PromptId
) -> tuple[np.ndarray, np.ndarray]:
    """Reward values on the support of ``dist``; returns (mask, values)."""
    lp = dist.log_probs[prompt_id]
    mask = lp > -np.inf
    values = np.zeros(lp.shape)
    for idx in np.flatnonzero(mask):
        seq = Sequence(prompt_id, dist.tokens_of(int(idx)))
        values[idx] = reward(prompt_id, seq)
    return mask, values


def kl_rl_objective(
    q: SequenceDist,
    model: ARModel,
    reward: RewardFn,
    beta: float,
    mu: PromptDist,
) -> FlaggedValue:
    """Expected reward minus beta-weighted KL to the base, averaged over prompts.

    Returns ``-inf`` with the flag set when q leaves the base support for
    some prompt with positive weight.
    """
    if not math.isfinite(beta) or beta <= 0.0:
        raise ValueError(f"beta must be positive and finite, got {beta}")
    base = exact_power_dist(model, 1.0)
    total = 0.0
    for pid, weight in zip(mu.prompt_ids, mu.weights):
        if weight == 0.0:
            continue
        kl = kl_divergence(q, base, pid)
        if kl.support_violation:
            return FlaggedValue(-math.inf, True)
        lq = q.log_probs[pid]
        mask, values = _eval_rewards(q, reward, pid)
        expected = float(np.dot(np.exp(lq[mask]), values[mask]))
        total += float(weight) * (expected - beta * kl.value)
    return FlaggedValue(total, False)


def tilted_policy(model: ARModel, reward: RewardFn, beta: float) -> SequenceDist:
    """Closed-form maximizer of the KL-regularized objective.

    Each base-support sequence is reweighted by exp(reward / beta) and
    renormalized per prompt.
    """
    if not math.isfinite(beta) or beta <= 0.0:
        raise ValueError(f"beta must be positive and finite, got {beta}")
    base = exact_power_dist(model, 1.0)
    log_probs = {}
    for pid in model.prompt_ids:
        lp = base.log_probs[pid].copy()
        mask = lp > -np.inf
        for idx in np.flatnonzero(mask):
            seq = Sequence(pid, base.tokens_of(int(idx)))
            r = reward(pid, seq)
            if not math.isfinite(r):
                raise ValueError(f"reward is not finite on the support: {r}")
            lp[idx] += r / beta
        log_probs[pid] = lp - float(logsumexp(lp))
    return SequenceDist(model.vocab_sizes, model.prompt_ids, log_probs)


def self_reward_fn(model: ARModel) -> RewardFn:
    """The model's own total log probability as a reward."""

    def reward(prompt_id: PromptId, seq: Sequence) -> float:
        return seq_logprob(model, seq)

    return reward


def rl_kl_decomposition_check(
    q: SequenceDist, model: ARModel, beta: float, prompt_id: PromptId
) -> float:
    """Residual of the objective identity under the self reward.

    For in-support q the quantity
    ``E_q[log pi] - beta KL(q || pi) + beta KL(q || pow) - beta log Z``
    is identically zero, where pow is the powered distribution with
    exponent 1 + 1/beta and Z its normalizer. Returns the signed float
    residual.
    """
    if not math.isfinite(beta) or beta <= 0.0:
        raise ValueError(f"beta must be positive and finite, got {beta}")
    alpha = 1.0 + 1.0 / beta
    base = exact_power_dist(model, 1.0)
    powered = exact_power_dist(model, alpha)
    kl_base = kl_divergence(q, base, prompt_id)
    kl_pow = kl_divergence(q, powered, prompt_id)
    if kl_base.support_violation or kl_pow.support_violation:
        raise ValueError("q leaves the base support; the identity needs in-support q")
    lq = q.log_probs[prompt_id]
    mask = lq > -np.inf
    base_lp = base.log_probs[prompt_id]
    expected_self = float(np.dot(np.exp(lq[mask]), base_lp[mask]))
    log_z = float(logsumexp(alpha * all_sequence_logprobs(model, prompt_id)))
    return expected_self - beta * kl_base.value + beta * kl_pow.value - beta * log_z


def random_policy(model: ARModel, rng: np.random.Generator) -> ARModel:
    """Random tabular policy on the base support, for optimality probes.

    Rows are Dirichlet(1) draws over the positive entries of the matching
    base row, so the policy never leaves the base support.
    """
    rows = {}
    for (pid, prefix), row in model.rows.items():
        support = row.probs > 0.0
        k = int(support.sum())
        probs = np.zeros(row.size)
        if k == 1:
            probs[support] = 1.0
        else:
            probs[support] = rng.dirichlet(np.ones(k))
        rows[(pid, prefix)] = ProbRow.from_probs(probs)
    return model_from_rows(model.vocab_sizes, model.prompt_ids, rows)


class ExactPowerSampler:
    """Inverse-CDF sampler over the enumerated powered distribution."""

    def __init__(self, model: ARModel, alpha: float, seq_cap: int = 1_000_000):
        self.model = model
        self.alpha = float(alpha)
        self.dist = exact_power_dist(model, alpha, seq_cap=seq_cap)

    def sample(self, prompt_id: PromptId, rng: np.random.Generator) -> Sequence:
        return self.dist.sample(prompt_id, rng)


def teacher_sample(
    model: ARModel,
    alpha: float,
    mode: str,
    prompt_id: PromptId,
    rng: np.random.Generator,
    mh_config: MHConfig | None = None,
    sampler: ExactPowerSampler | None = None,
) -> Sequence:
    """One completion from the powered teacher.

    ``mode`` is ``"exact"`` (enumeration plus inverse CDF) or ``"mh"``
    (one kept sample from an independent chain). Pass ``sampler`` to
    reuse an enumeration across many draws.
    """
    if mode not in MODE_TAGS:
        raise ValueError(f"mode must be one of {sorted(MODE_TAGS)}, got {mode!r}")
    if mode == "exact":
        if sampler is None:
            sampler = ExactPowerSampler(model, alpha)
        elif sampler.alpha != float(alpha) or sampler.model is not model:
            raise ValueError("sampler was built for a different model or alpha")
        return sampler.sample(prompt_id, rng)
    cfg = mh_config if mh_config is not None else MHConfig(alpha=alpha)
    if cfg.alpha != float(alpha):
        raise ValueError("mh_config.alpha does not match alpha")
    return mh_power_sample(model, cfg, prompt_id, rng).sequence


@dataclass
class DistillDataset:
    """Prompt/completion pairs drawn from a powered teacher."""

    records: list[tuple[PromptId, tuple[int, ...]]]
    teacher_alpha: float
    mode: str
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in MODE_TAGS.values():
            raise ValueError(f"unknown provenance tag {self.mode!r}")

    def __len__(self) -> int:
        return len(self.records)

    def save(self, path: str | Path) -> None:
        """Write one JSON object per line; byte-stable for a fixed dataset."""
        lines = []
        for pid, tokens in self.records:
            lines.append(
                json.dumps(
                    {
                        "prompt_id": pid,
                        "tokens": list(tokens),
                        "teacher_alpha": self.teacher_alpha,
                        "mode": self.mode,
                        "seed": self.seed,
                    },
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
        Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path, model: ARModel) -> "DistillDataset":
        """Read a dataset and validate it against a model's shape."""
        records = []
        alpha = None
        mode = None
        seed = None
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                pid = obj["prompt_id"]
                tokens = tuple(int(t) for t in obj["tokens"])
                seq = Sequence(pid, tokens)
                try:
                    model.validate_sequence(seq)
                except ValueError as exc:
                    raise ValueError(f"line {line_no}: {exc}") from exc
                if alpha is None:
                    alpha = float(obj["teacher_alpha"])
                    mode = obj["mode"]
                    seed = obj["seed"]
                elif (
                    float(obj["teacher_alpha"]) != alpha
                    or obj["mode"] != mode
                    or obj["seed"] != seed
                ):
                    raise ValueError(f"line {line_no}: inconsistent dataset metadata")
                records.append((pid, tokens))
        if alpha is None:
            raise ValueError("dataset file is empty")
        return cls(records, alpha, mode, seed)


def collect_distill_dataset(
    model: ARModel,
    alpha: float,
    mu: PromptDist,
    n: int,
    mode: str,
    rng: np.random.Generator,
    seed: int | None = None,
    mh_config: MHConfig | None = None,
) -> DistillDataset:
    """Draw ``n`` prompt/completion pairs from the powered teacher.

    Prompts are sampled from ``mu`` record by record; completions come
    from :func:`teacher_sample`. ``seed`` is metadata recorded with the
    dataset, not a replacement for the explicit generator.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if mode not in MODE_TAGS:
        raise ValueError(f"mode must be one of {sorted(MODE_TAGS)}, got {mode!r}")
    for pid in mu.prompt_ids:
        if pid not in model.prompt_ids:
            raise ValueError(f"prompt {pid!r} not in the model")
    sampler = ExactPowerSampler(model, alpha) if mode == "exact" else None
    records = []
    for _ in range(n):
        pid = mu.sample(rng)
        seq = teacher_sample(
            model, alpha, mode, pid, rng, mh_config=mh_config, sampler=sampler
        )
        records.append((pid, seq.tokens))
    return DistillDataset(records, float(alpha), MODE_TAGS[mode], seed)


@dataclass
class TabularStudent:
    """Count-based conditional frequencies with base-row fallback.

    Visited prefixes get the (optionally smoothed) empirical row;
    unvisited prefixes keep the base model's row unchanged.
    """

    base: ARModel
    counts: dict[tuple[PromptId, tuple[int, ...]], np.ndarray]
    epsilon: float

    def row(self, prompt_id: PromptId, prefix: tuple[int, ...]) -> ProbRow:
        c = self.counts.get((prompt_id, prefix))
        if c is None:
            return self.base.row(prompt_id, prefix)
        total = float(c.sum())
        if self.epsilon > 0.0:
            v = c.size
            return ProbRow.from_probs((c + self.epsilon) / (total + self.epsilon * v))
        return ProbRow.from_probs(c / total)

    def as_model(self) -> ARModel:
        rows = {
            key: self.row(key[0], key[1]) for key in self.base.rows.keys()
        }
        return model_from_rows(self.base.vocab_sizes, self.base.prompt_ids, rows)


def fit_tabular_mle(
    dataset: DistillDataset, model: ARModel, epsilon: float = 0.0
) -> TabularStudent:
    """Maximum-likelihood tabular student from teacher draws.

    With ``epsilon = 0`` the visited rows are exact count ratios, which
    maximize the dataset likelihood over all tabular models by
    construction. Positive ``epsilon`` adds that much pseudocount to
    every entry of visited rows.
    """
    if epsilon < 0.0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    if len(dataset.records) == 0:
        raise ValueError("dataset is empty")
    counts: dict[tuple[PromptId, tuple[int, ...]], np.ndarray] = {}
    for pid, tokens in dataset.records:
        model.validate_sequence(Sequence(pid, tokens))
        prefix: tuple[int, ...] = ()
        for t, tok in enumerate(tokens):
            key = (pid, prefix)
            arr = counts.get(key)
            if arr is None:
                arr = np.zeros(model.vocab_sizes[t])
                counts[key] = arr
            arr[tok] += 1.0
            prefix = prefix + (tok,)
    return TabularStudent(model, counts, float(epsilon))


def _as_sequence_dist(policy, model: ARModel) -> SequenceDist:
    if isinstance(policy, SequenceDist):
        return policy
    if isinstance(policy, TabularStudent):
        policy = policy.as_model()
    if isinstance(policy, ARModel):
        return exact_power_dist(policy, 1.0)
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def sharpening_prob(
    policy,
    model: ARModel,
    mu: PromptDist,
    delta: float,
    tol: float = 1e-12,
) -> float:
    """Probability over prompts that the policy misses (1 - delta) mass
    on the base model's maximizer set.

    ``policy`` may be a :class:`SequenceDist`, an :class:`ARModel`, or a
    :class:`TabularStudent`.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    dist = _as_sequence_dist(policy, model)
    total = 0.0
    for pid, weight in zip(mu.prompt_ids, mu.weights):
        if weight == 0.0:
            continue
        argmax = power_argmax_set(model, pid, tol=tol)
        mass = sum(dist.prob(pid, seq.tokens) for seq in argmax)
        if mass <= 1.0 - delta:
            total += float(weight)
    return total


def hellinger_sq(p, q) -> float:
    """Squared Hellinger distance between two probability vectors."""
    p = p.probs if isinstance(p, ProbRow) else np.asarray(p, dtype=np.float64)
    q = q.probs if isinstance(q, ProbRow) else np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("shapes differ")
    if np.any(p < 0.0) or np.any(q < 0.0):
        raise ValueError("probabilities must be nonnegative")
    diff = np.sqrt(p) - np.sqrt(q)
    return float(np.dot(diff, diff))


def best_of_n_self_reward(
    model: ARModel,
    scorer: ARModel,
    prompt_id: PromptId,
    n: int,
    rng: np.random.Generator,
) -> Sequence:
    """Draw ``n`` completions and keep the scorer's favorite.

    The score is the scorer's length-normalized log probability; ties go
    to the earliest draw.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    best_seq = None
    best_score = -math.inf
    for _ in range(n):
        seq = sample_sequence(model, prompt_id, rng)
        score = seq_logprob_per_token(scorer, seq)
        if score > best_score:
            best_seq = seq
            best_score = score
    assert best_seq is not None
    return best_seq
