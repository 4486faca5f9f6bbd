"""Exact sequence-level power distributions.

Raising a sequence distribution to a power alpha and renormalizing does
not factor token by token. The correct next-token conditional couples
the powered token probability with the total powered mass of everything
that can follow it. This module computes those suffix masses by a
backward pass over the prefix tree and exposes exact conditionals,
normalizers, full enumerations, argmax sets, and the entropy-based
correction that separates the power conditional from naive per-token
tempering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np
from scipy.special import logsumexp

from powerlab.model import ARModel, ProbRow, PromptId, Sequence

__all__ = [
    "ResourceLimitError",
    "PowerCache",
    "build_power_cache",
    "temp_next_token",
    "power_next_token",
    "renyi_entropy",
    "suffix_logprobs",
    "suffix_renyi_entropy",
    "odds_correction",
    "odds_correction_table",
    "OddsComparison",
    "rank_reversal_scan",
    "SequenceDist",
    "all_sequence_logprobs",
    "exact_power_dist",
    "power_argmax_set",
    "power_mass_on_argmax",
    "tv_distance",
]

DEFAULT_NODE_CAP = 10_000_000
DEFAULT_SEQ_CAP = 1_000_000


class ResourceLimitError(RuntimeError):
    """Raised when an exact computation would exceed its size budget."""


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not math.isfinite(alpha) or alpha <= 0.0:
        raise ValueError(f"alpha must be positive and finite, got {alpha}")
    return alpha


@dataclass(frozen=True)
class PowerCache:
    """Backward suffix masses for one (model, alpha) pair.

    ``log_suffix_mass[(pid, prefix)]`` is the log of the total powered
    probability of all completions after ``prefix``, measured relative to
    the prefix (the prefix's own probability is not included). Full-length
    prefixes have mass 1 by convention and are not stored.
    """

    alpha: float
    horizon: int
    log_suffix_mass: dict[tuple[PromptId, tuple[int, ...]], float]
    log_z: dict[PromptId, float]

    def log_mass(self, prompt_id: PromptId, prefix: tuple[int, ...]) -> float:
        if len(prefix) == self.horizon:
            return 0.0
        return self.log_suffix_mass[(prompt_id, prefix)]


def build_power_cache(
    model: ARModel, alpha: float, node_cap: int = DEFAULT_NODE_CAP
) -> PowerCache:
    """Backward pass computing powered suffix masses for every prefix.

    Raises :class:`ResourceLimitError` when the prefix tree exceeds
    ``node_cap`` nodes per prompt.
    """
    alpha = _check_alpha(alpha)
    n_nodes = model.n_prefix_nodes()
    if n_nodes > node_cap:
        raise ResourceLimitError(
            f"prefix tree has {n_nodes} nodes per prompt, cap is {node_cap}"
        )
    horizon = model.horizon
    masses: dict[tuple[PromptId, tuple[int, ...]], float] = {}
    log_z: dict[PromptId, float] = {}
    for pid in model.prompt_ids:
        # child_masses holds level t+1 values in enumeration order.
        child = np.zeros(1)
        for level in range(horizon - 1, -1, -1):
            prefixes = list(model.iter_prefixes(level))
            rows = np.stack([model.row(pid, p).log_probs for p in prefixes])
            v = model.vocab_sizes[level]
            if level == horizon - 1:
                powered = alpha * rows
            else:
                powered = alpha * rows + child.reshape(len(prefixes), v)
            with np.errstate(invalid="ignore"):
                level_mass = logsumexp(powered, axis=1)
            for prefix, value in zip(prefixes, level_mass):
                masses[(pid, prefix)] = float(value)
            child = level_mass
        log_z[pid] = masses[(pid, ())]
    return PowerCache(alpha, horizon, masses, log_z)


def temp_next_token(
    model: ARModel, alpha: float, prompt_id: PromptId, prefix: tuple[int, ...]
) -> ProbRow:
    """Per-token tempered row: p(s)^alpha renormalized, suffixes ignored."""
    alpha = _check_alpha(alpha)
    row = model.row(prompt_id, prefix)
    if alpha == 1.0:
        return row
    return ProbRow.from_log_unnormalized(alpha * row.log_probs)


def power_next_token(
    cache: PowerCache, model: ARModel, prompt_id: PromptId, prefix: tuple[int, ...]
) -> ProbRow:
    """Exact next-token conditional of the powered sequence distribution.

    Couples the powered token probability with the powered mass of the
    suffixes behind each candidate token. At the last step the suffix
    masses are all 1 and the row reduces to plain tempering.
    """
    if len(prefix) >= model.horizon:
        raise ValueError("prefix must be shorter than the horizon")
    row = model.row(prompt_id, prefix)
    child_mass = np.array(
        [cache.log_mass(prompt_id, prefix + (s,)) for s in range(row.size)]
    )
    return ProbRow.from_log_unnormalized(cache.alpha * row.log_probs + child_mass)


def _renyi_from_logprobs(log_probs: np.ndarray, alpha: float) -> float:
    h = float(logsumexp(alpha * log_probs)) / (1.0 - alpha)
    # The true value is nonnegative; clear float dust at the zero boundary.
    if -1e-9 < h < 0.0:
        h = 0.0
    return h


def renyi_entropy(row, alpha: float) -> float:
    """Renyi entropy of order alpha of a normalized row; undefined at 1."""
    alpha = _check_alpha(alpha)
    if alpha == 1.0:
        raise ValueError("renyi_entropy is undefined at alpha = 1")
    if isinstance(row, ProbRow):
        log_probs = row.log_probs
    else:
        probs = np.asarray(row, dtype=np.float64)
        if np.any(probs < 0.0) or abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ValueError("row must be a normalized probability vector")
        with np.errstate(divide="ignore"):
            log_probs = np.where(
                probs > 0.0, np.log(np.where(probs > 0.0, probs, 1.0)), -np.inf
            )
    return _renyi_from_logprobs(log_probs, alpha)


def _suffix_shape(model: ARModel, start: int) -> int:
    n = 1
    for v in model.vocab_sizes[start:]:
        n *= v
    return n


def suffix_logprobs(
    model: ARModel,
    prompt_id: PromptId,
    prefix: tuple[int, ...],
    seq_cap: int = DEFAULT_SEQ_CAP,
) -> np.ndarray:
    """Log probabilities of all completions after ``prefix``, in order.

    This enumerates the suffix block directly from the base rows and is
    deliberately independent of :class:`PowerCache`.
    """
    start = len(prefix)
    if start > model.horizon:
        raise ValueError("prefix longer than horizon")
    n = _suffix_shape(model, start)
    if n > seq_cap:
        raise ResourceLimitError(f"suffix block has {n} sequences, cap is {seq_cap}")
    level = np.zeros(1)
    prefixes = [prefix]
    for t in range(start, model.horizon):
        rows = np.stack([model.row(prompt_id, p).log_probs for p in prefixes])
        level = (level[:, None] + rows).ravel()
        if t < model.horizon - 1:
            v = model.vocab_sizes[t]
            prefixes = [p + (s,) for p in prefixes for s in range(v)]
    return level


def suffix_renyi_entropy(
    model: ARModel, prompt_id: PromptId, prefix: tuple[int, ...], alpha: float
) -> float:
    """Renyi entropy of the full suffix distribution behind ``prefix``."""
    alpha = _check_alpha(alpha)
    if alpha == 1.0:
        raise ValueError("suffix_renyi_entropy is undefined at alpha = 1")
    logq = suffix_logprobs(model, prompt_id, prefix)
    return _renyi_from_logprobs(logq, alpha)


def odds_correction(
    model: ARModel,
    cache: PowerCache,
    prompt_id: PromptId,
    prefix: tuple[int, ...],
    token_a: int,
    token_b: int,
) -> tuple[float, float]:
    """How the power conditional shifts the odds of a over b vs tempering.

    Returns ``(closed_form, renyi_predicted)``. The first is the log odds
    of the power conditional minus the log odds of the tempered row, read
    off the normalized rows. The second is the same quantity predicted
    from suffix Renyi entropies, ``(1 - alpha)(H_alpha(a) - H_alpha(b))``,
    computed by direct suffix enumeration. The two agree to float
    precision; tests pin the tolerance.
    """
    base = model.row(prompt_id, prefix)
    for tok in (token_a, token_b):
        if not 0 <= tok < base.size:
            raise ValueError(f"token {tok} out of range")
        if base.probs[tok] <= 0.0:
            raise ValueError(f"token {tok} has zero base probability")
    alpha = cache.alpha
    pow_row = power_next_token(cache, model, prompt_id, prefix).log_probs
    temp_row = temp_next_token(model, alpha, prompt_id, prefix).log_probs
    closed = float(
        (pow_row[token_a] - pow_row[token_b]) - (temp_row[token_a] - temp_row[token_b])
    )
    h_a = suffix_renyi_entropy(model, prompt_id, prefix + (token_a,), alpha)
    h_b = suffix_renyi_entropy(model, prompt_id, prefix + (token_b,), alpha)
    predicted = (1.0 - alpha) * (h_a - h_b)
    return closed, predicted


def odds_correction_table(
    model: ARModel,
    cache: PowerCache,
    prompt_id: PromptId,
    prefix: tuple[int, ...] = (),
) -> list[tuple[int, int, float, float]]:
    """(a, b, closed_form, renyi_predicted) for all unordered pairs a < b.

    Vectorized companion of :func:`odds_correction`; restricted to tokens
    with positive base probability.
    """
    base = model.row(prompt_id, prefix)
    alpha = cache.alpha
    pow_row = power_next_token(cache, model, prompt_id, prefix).log_probs
    temp_row = temp_next_token(model, alpha, prompt_id, prefix).log_probs
    entropies = np.array(
        [
            suffix_renyi_entropy(model, prompt_id, prefix + (s,), alpha)
            if base.probs[s] > 0.0
            else np.nan
            for s in range(base.size)
        ]
    )
    out = []
    for a in range(base.size):
        if base.probs[a] <= 0.0:
            continue
        for b in range(a + 1, base.size):
            if base.probs[b] <= 0.0:
                continue
            closed = float((pow_row[a] - pow_row[b]) - (temp_row[a] - temp_row[b]))
            predicted = float((1.0 - alpha) * (entropies[a] - entropies[b]))
            out.append((a, b, closed, predicted))
    return out


class OddsComparison(NamedTuple):
    """One token pair at a prefix, oriented so tempering favors token_a."""

    token_a: int
    token_b: int
    temp_log_odds: float
    pow_log_odds: float
    correction: float
    is_reversal: bool


def rank_reversal_scan(
    model: ARModel,
    cache: PowerCache,
    prompt_id: PromptId,
    prefix: tuple[int, ...] = (),
) -> list[OddsComparison]:
    """Compare tempered and power next-token preferences for all pairs.

    Each unordered pair with positive base probability is oriented so the
    tempered log odds are nonnegative; a reversal is a strict sign flip
    between the tempered and the power log odds. Non-reversed pairs are
    kept as controls.
    """
    base = model.row(prompt_id, prefix)
    alpha = cache.alpha
    pow_row = power_next_token(cache, model, prompt_id, prefix).log_probs
    temp_row = temp_next_token(model, alpha, prompt_id, prefix).log_probs
    out = []
    for a in range(base.size):
        if base.probs[a] <= 0.0:
            continue
        for b in range(a + 1, base.size):
            if base.probs[b] <= 0.0:
                continue
            temp_odds = float(temp_row[a] - temp_row[b])
            pow_odds = float(pow_row[a] - pow_row[b])
            first, second = a, b
            if temp_odds < 0.0:
                first, second = b, a
                temp_odds, pow_odds = -temp_odds, -pow_odds
            reversal = (temp_odds > 0.0 and pow_odds < 0.0) or (
                temp_odds == 0.0 and pow_odds != 0.0
            )
            out.append(
                OddsComparison(
                    first, second, temp_odds, pow_odds, pow_odds - temp_odds, reversal
                )
            )
    return out


@dataclass
class SequenceDist:
    """Explicit distribution over all full-length sequences of a shape.

    Probabilities are stored as one log array per prompt, indexed in the
    mixed-radix enumeration order of token tuples (first token most
    significant).
    """

    vocab_sizes: tuple[int, ...]
    prompt_ids: tuple[PromptId, ...]
    log_probs: dict[PromptId, np.ndarray]
    _cums: dict[PromptId, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = self.n_sequences()
        for pid in self.prompt_ids:
            arr = self.log_probs[pid]
            if arr.shape != (n,):
                raise ValueError(f"log prob array for prompt {pid!r} has wrong shape")
            total = float(logsumexp(arr))
            if abs(total) > 1e-9:
                raise ValueError(f"distribution for prompt {pid!r} is not normalized")

    def n_sequences(self) -> int:
        n = 1
        for v in self.vocab_sizes:
            n *= v
        return n

    def index_of(self, tokens: Iterable[int]) -> int:
        idx = 0
        tokens = tuple(tokens)
        if len(tokens) != len(self.vocab_sizes):
            raise ValueError("token tuple does not match horizon")
        for tok, v in zip(tokens, self.vocab_sizes):
            if not 0 <= tok < v:
                raise ValueError(f"token {tok} out of range")
            idx = idx * v + tok
        return idx

    def tokens_of(self, index: int) -> tuple[int, ...]:
        out = []
        for v in reversed(self.vocab_sizes):
            out.append(index % v)
            index //= v
        return tuple(reversed(out))

    def logprob(self, prompt_id: PromptId, tokens: Iterable[int]) -> float:
        return float(self.log_probs[prompt_id][self.index_of(tokens)])

    def prob(self, prompt_id: PromptId, tokens: Iterable[int]) -> float:
        return float(math.exp(self.logprob(prompt_id, tokens)))

    def probs(self, prompt_id: PromptId) -> np.ndarray:
        return np.exp(self.log_probs[prompt_id])

    def _cum(self, prompt_id: PromptId) -> np.ndarray:
        cum = self._cums.get(prompt_id)
        if cum is None:
            cum = np.cumsum(self.probs(prompt_id))
            cum[-1] = 1.0
            self._cums[prompt_id] = cum
        return cum

    def sample(self, prompt_id: PromptId, rng: np.random.Generator) -> Sequence:
        cum = self._cum(prompt_id)
        idx = int(np.searchsorted(cum, rng.random(), side="right"))
        return Sequence(prompt_id, self.tokens_of(idx))

    def sample_batch(
        self, prompt_id: PromptId, n: int, rng: np.random.Generator
    ) -> list[Sequence]:
        cum = self._cum(prompt_id)
        draws = np.searchsorted(cum, rng.random(n), side="right")
        return [Sequence(prompt_id, self.tokens_of(int(i))) for i in draws]


def all_sequence_logprobs(
    model: ARModel, prompt_id: PromptId, seq_cap: int = DEFAULT_SEQ_CAP
) -> np.ndarray:
    """Base log probability of every sequence, in enumeration order."""
    return suffix_logprobs(model, prompt_id, (), seq_cap=seq_cap)


def exact_power_dist(
    model: ARModel, alpha: float, seq_cap: int = DEFAULT_SEQ_CAP
) -> SequenceDist:
    """Enumerate the normalized powered distribution for every prompt."""
    alpha = _check_alpha(alpha)
    n = model.n_sequences()
    if n > seq_cap:
        raise ResourceLimitError(f"model has {n} sequences, cap is {seq_cap}")
    log_probs = {}
    for pid in model.prompt_ids:
        logp = all_sequence_logprobs(model, pid, seq_cap=seq_cap)
        powered = alpha * logp
        log_probs[pid] = powered - float(logsumexp(powered))
    return SequenceDist(model.vocab_sizes, model.prompt_ids, log_probs)


def power_argmax_set(
    model: ARModel, prompt_id: PromptId, tol: float = 1e-12
) -> list[Sequence]:
    """All sequences whose log probability is within ``tol`` of the best.

    The maximizer set of the powered distribution does not depend on the
    power, so it is computed once from the base log probabilities by a
    max-product backward pass and a slack-carrying forward trace.
    """
    if tol < 0.0:
        raise ValueError(f"tol must be nonnegative, got {tol}")
    horizon = model.horizon
    # best[prefix] = best achievable log prob of a completion after prefix.
    best: dict[tuple[int, ...], float] = {}
    levels = [list(model.iter_prefixes(t)) for t in range(horizon)]
    for level in range(horizon - 1, -1, -1):
        for prefix in levels[level]:
            logp = model.row(prompt_id, prefix).log_probs
            if level == horizon - 1:
                value = float(np.max(logp))
            else:
                value = float(
                    np.max(logp + np.array([best[prefix + (s,)] for s in range(len(logp))]))
                )
            best[prefix] = value
    results: list[Sequence] = []

    def walk(prefix: tuple[int, ...], deficit: float) -> None:
        if len(prefix) == horizon:
            results.append(Sequence(prompt_id, prefix))
            return
        logp = model.row(prompt_id, prefix).log_probs
        here = best[prefix]
        for s in range(len(logp)):
            child_best = best[prefix + (s,)] if len(prefix) + 1 < horizon else 0.0
            step_loss = here - (float(logp[s]) + child_best)
            if deficit + step_loss <= tol:
                walk(prefix + (s,), deficit + step_loss)

    walk((), 0.0)
    results.sort(key=lambda s: s.tokens)
    return results


def power_mass_on_argmax(
    model: ARModel, alpha: float, prompt_id: PromptId, tol: float = 1e-12
) -> float:
    """Total powered probability carried by the maximizer set."""
    dist = exact_power_dist(model, alpha)
    argmax = power_argmax_set(model, prompt_id, tol=tol)
    return float(sum(dist.prob(prompt_id, seq.tokens) for seq in argmax))


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation distance between two probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("shapes differ")
    return 0.5 * float(np.abs(p - q).sum())
