"""Samplers targeting powered sequence distributions.

Two families live here. The Metropolis-Hastings sampler grows a
sequence block by block, proposing suffix resamples from a tempered
version of the base model and accepting with the powered-target ratio;
its greedy limit accepts any proposal that strictly increases the base
probability. The sequential importance sampler reweights one-step
proposals against the exact power conditionals and carries the
incremental weights whose product telescopes to the full sequence
importance ratio. ESS diagnostics come in a closed-form and a
Monte-Carlo flavor so each can check the other.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from powerlab.model import ARModel, ProbRow, PromptId, Sequence
from powerlab.power import (
    PowerCache,
    ResourceLimitError,
    power_next_token,
    temp_next_token,
)

__all__ = [
    "SupportViolationError",
    "MHConfig",
    "MHSample",
    "TraceRow",
    "SamplerTables",
    "mh_power_sample",
    "power_inf_sample",
    "ProposalKind",
    "one_step_proposal",
    "incremental_weight",
    "ess_exact",
    "ess_monte_carlo",
    "ParticleSet",
    "sis_run",
]

TABLE_NODE_CAP = 10_000_000


class SupportViolationError(ValueError):
    """Proposal puts zero mass where the target needs support."""


@dataclass(frozen=True)
class MHConfig:
    """Knobs for blockwise Metropolis-Hastings power sampling.

    ``proposal_temp`` is the temperature of the tempered base proposal;
    when omitted it defaults to ``1 / alpha``. ``block_size`` defaults to
    the full horizon and must divide it.
    """

    alpha: float = 4.0
    block_size: int | None = None
    n_mcmc: int = 10
    proposal_temp: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")
        if self.block_size is not None and self.block_size < 1:
            raise ValueError(f"block_size must be positive, got {self.block_size}")
        if self.n_mcmc < 0:
            raise ValueError(f"n_mcmc must be nonnegative, got {self.n_mcmc}")
        if self.proposal_temp is not None and (
            not math.isfinite(self.proposal_temp) or self.proposal_temp <= 0.0
        ):
            raise ValueError(
                f"proposal_temp must be positive and finite, got {self.proposal_temp}"
            )

    def resolved_block(self, horizon: int) -> int:
        block = self.block_size if self.block_size is not None else horizon
        if horizon % block != 0:
            raise ValueError(
                f"block_size {block} does not divide horizon {horizon}"
            )
        return block

    def resolved_temp(self) -> float:
        return self.proposal_temp if self.proposal_temp is not None else 1.0 / self.alpha


class TraceRow(NamedTuple):
    """One inner iteration: what was proposed and what the state became."""

    block: int
    iteration: int
    proposal_logprob_alpha: float
    accepted: bool
    current_logprob: float


@dataclass
class MHSample:
    """Kept sample plus acceptance bookkeeping for one chain."""

    sequence: Sequence
    n_proposals: int
    n_accepted: int
    trace: list[TraceRow] | None = None

    @property
    def acceptance_rate(self) -> float:
        if self.n_proposals == 0:
            return 0.0
        return self.n_accepted / self.n_proposals


class SamplerTables:
    """Flat per-prefix lookup tables for fast chain iteration.

    Prefixes are addressed by their mixed-radix enumeration code, so the
    chain loop runs on plain lists and floats. One instance can be shared
    by any number of chains over the same model, prompt, and proposal
    exponent.
    """

    def __init__(self, model: ARModel, prompt_id: PromptId, proposal_exponent: float):
        if not math.isfinite(proposal_exponent) or proposal_exponent <= 0.0:
            raise ValueError(
                f"proposal_exponent must be positive and finite, got {proposal_exponent}"
            )
        if model.n_prefix_nodes() > TABLE_NODE_CAP:
            raise ResourceLimitError(
                f"prefix tree has {model.n_prefix_nodes()} nodes, cap is {TABLE_NODE_CAP}"
            )
        self.model = model
        self.prompt_id = prompt_id
        self.proposal_exponent = float(proposal_exponent)
        self.vocab_sizes = model.vocab_sizes
        self.base_logp: list[list[tuple[float, ...]]] = []
        self.prop_logp: list[list[tuple[float, ...]]] = []
        self.prop_cum: list[list[tuple[float, ...]]] = []
        for level in range(model.horizon):
            base_level, prop_level, cum_level = [], [], []
            for prefix in model.iter_prefixes(level):
                row = model.row(prompt_id, prefix)
                if self.proposal_exponent == 1.0:
                    prop = row
                else:
                    prop = ProbRow.from_log_unnormalized(
                        self.proposal_exponent * row.log_probs
                    )
                base_level.append(tuple(row.log_probs.tolist()))
                prop_level.append(tuple(prop.log_probs.tolist()))
                cum_level.append(tuple(prop.cum_probs.tolist()))
            self.base_logp.append(base_level)
            self.prop_logp.append(prop_level)
            self.prop_cum.append(cum_level)


class _Uniforms:
    """Blocked uniform draws; keeps per-call generator overhead low."""

    __slots__ = ("_rng", "_buf", "_i", "_block")

    def __init__(self, rng: np.random.Generator, block: int = 256):
        self._rng = rng
        self._buf = rng.random(block).tolist()
        self._i = 0
        self._block = block

    def next(self) -> float:
        i = self._i
        if i == self._block:
            self._buf = self._rng.random(self._block).tolist()
            i = 0
        self._i = i + 1
        return self._buf[i]


def _run_chain(
    model: ARModel,
    cfg: MHConfig,
    prompt_id: PromptId,
    rng: np.random.Generator,
    tables: SamplerTables | None,
    record_trace: bool,
    greedy: bool,
) -> MHSample:
    horizon = model.horizon
    block = cfg.resolved_block(horizon)
    exponent = 1.0 / cfg.resolved_temp()
    if tables is None:
        tables = SamplerTables(model, prompt_id, exponent)
    else:
        if tables.prompt_id != prompt_id or tables.proposal_exponent != exponent:
            raise ValueError("tables were built for a different prompt or proposal")
    alpha = cfg.alpha
    vocab = tables.vocab_sizes
    base_tab = tables.base_logp
    prop_tab = tables.prop_logp
    cum_tab = tables.prop_cum
    uni = _Uniforms(rng)

    tokens: list[int] = []
    base_lp: list[float] = []
    prop_lp: list[float] = []
    codes: list[int] = [0]
    trace: list[TraceRow] | None = [] if record_trace else None
    n_accepted = 0
    n_proposals = 0

    n_blocks = horizon // block
    for k in range(n_blocks):
        length = (k + 1) * block
        while len(tokens) < length:
            t = len(tokens)
            code = codes[t]
            tok = bisect_right(cum_tab[t][code], uni.next())
            tokens.append(tok)
            base_lp.append(base_tab[t][code][tok])
            prop_lp.append(prop_tab[t][code][tok])
            codes.append(code * vocab[t] + tok)
        current = math.fsum(base_lp)
        for it in range(cfg.n_mcmc):
            n_proposals += 1
            m = 1 + int(uni.next() * length)
            start = m - 1
            code = codes[start]
            new_tokens: list[int] = []
            new_base: list[float] = []
            new_prop: list[float] = []
            new_codes: list[int] = []
            for t in range(start, length):
                tok = bisect_right(cum_tab[t][code], uni.next())
                new_tokens.append(tok)
                new_base.append(base_tab[t][code][tok])
                new_prop.append(prop_tab[t][code][tok])
                code = code * vocab[t] + tok
                new_codes.append(code)
            new_base_sum = sum(new_base)
            old_base_sum = sum(base_lp[start:length])
            delta = new_base_sum - old_base_sum
            if greedy:
                accepted = delta > 0.0
            else:
                log_ratio = alpha * delta + (sum(prop_lp[start:length]) - sum(new_prop))
                if log_ratio == -math.inf:
                    accepted = False
                elif log_ratio >= 0.0:
                    uni.next()  # keep draw count independent of the ratio
                    accepted = True
                else:
                    u = uni.next()
                    accepted = u == 0.0 or math.log(u) <= log_ratio
            if accepted:
                n_accepted += 1
                tokens[start:length] = new_tokens
                base_lp[start:length] = new_base
                prop_lp[start:length] = new_prop
                codes[start + 1 : length + 1] = new_codes
                current = current + delta
            if trace is not None:
                proposal_total = current if accepted else current + delta
                scale = 1.0 if greedy else alpha
                trace.append(
                    TraceRow(k, it, scale * proposal_total, accepted, current)
                )
    return MHSample(
        Sequence(prompt_id, tuple(tokens)), n_proposals, n_accepted, trace
    )


def mh_power_sample(
    model: ARModel,
    cfg: MHConfig,
    prompt_id: PromptId,
    rng: np.random.Generator,
    record_trace: bool = False,
    tables: SamplerTables | None = None,
) -> MHSample:
    """Blockwise Metropolis-Hastings targeting the powered distribution.

    Each block first extends the state autoregressively with the tempered
    proposal, then runs ``n_mcmc`` suffix-resample iterations. The resample
    position is uniform over the full current extent, so earlier blocks
    stay revisable. With ``alpha = 1`` and ``proposal_temp = 1`` every
    proposal is accepted exactly.

    Args:
        model: base autoregressive model.
        cfg: sampler configuration.
        prompt_id: prompt to condition on.
        rng: explicit generator; identical seeds give identical chains.
        record_trace: keep per-iteration records (costs memory).
        tables: optional precomputed :class:`SamplerTables` shared across
            chains; must match the prompt and proposal exponent.

    Returns:
        The kept sample with acceptance counts and an optional trace.
    """
    return _run_chain(model, cfg, prompt_id, rng, tables, record_trace, greedy=False)


def power_inf_sample(
    model: ARModel,
    cfg: MHConfig,
    prompt_id: PromptId,
    rng: np.random.Generator,
    record_trace: bool = False,
    tables: SamplerTables | None = None,
) -> MHSample:
    """Greedy limit of the power sampler: accept only strict improvements.

    Uses the same blockwise proposal mechanics as :func:`mh_power_sample`
    but accepts a proposal exactly when it strictly increases the base
    log probability of the current extent, so the trace's log probability
    is non-decreasing within each block. ``cfg.alpha`` only shapes the
    default proposal temperature here.
    """
    return _run_chain(model, cfg, prompt_id, rng, tables, record_trace, greedy=True)


class ProposalKind(str, Enum):
    """One-step proposal families for importance sampling."""

    BASE = "base"
    TEMPERATURE = "temperature"
    UNIFORM = "uniform"
    ORACLE = "oracle"


def one_step_proposal(
    kind: ProposalKind,
    model: ARModel,
    prompt_id: PromptId,
    prefix: tuple[int, ...],
    alpha: float | None = None,
    cache: PowerCache | None = None,
) -> ProbRow:
    """Next-token proposal row of the requested family at a prefix."""
    kind = ProposalKind(kind)
    if kind is ProposalKind.BASE:
        return model.row(prompt_id, prefix)
    if kind is ProposalKind.TEMPERATURE:
        if alpha is None:
            raise ValueError("temperature proposal requires alpha")
        return temp_next_token(model, alpha, prompt_id, prefix)
    if kind is ProposalKind.UNIFORM:
        v = model.vocab_sizes[len(prefix)]
        return ProbRow.from_probs(np.full(v, 1.0 / v))
    if cache is None:
        raise ValueError("oracle proposal requires a power cache")
    return power_next_token(cache, model, prompt_id, prefix)


def incremental_weight(target_row: ProbRow, proposal_row: ProbRow, token: int) -> float:
    """One-step importance weight f(token) / q(token)."""
    if target_row.size != proposal_row.size:
        raise ValueError("target and proposal rows have different sizes")
    if not 0 <= token < target_row.size:
        raise ValueError(f"token {token} out of range")
    f = float(target_row.probs[token])
    q = float(proposal_row.probs[token])
    if q <= 0.0:
        raise SupportViolationError(
            f"proposal mass is zero at token {token} (target mass {f})"
        )
    return f / q


def _check_support(target_row: ProbRow, proposal_row: ProbRow) -> None:
    if target_row.size != proposal_row.size:
        raise ValueError("target and proposal rows have different sizes")
    bad = (proposal_row.probs <= 0.0) & (target_row.probs > 0.0)
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise SupportViolationError(
            f"proposal mass is zero at token {idx} where the target is positive"
        )


def ess_exact(target_row: ProbRow, proposal_row: ProbRow) -> tuple[float, float]:
    """Closed-form weight variance diagnostics for one step.

    Returns ``(cv2, ess_frac)`` where ``cv2`` is the squared coefficient
    of variation of ``W = f/q`` under the proposal and ``ess_frac`` is
    ``1 / (1 + cv2)``. Computed with a centered second moment so a
    proposal equal to the target yields exactly zero variance.
    """
    _check_support(target_row, proposal_row)
    support = proposal_row.probs > 0.0
    q = proposal_row.probs[support]
    w = target_row.probs[support] / q
    mean = float(np.dot(q, w))
    var = float(np.dot(q, (w - mean) ** 2))
    cv2 = var / (mean * mean)
    return cv2, 1.0 / (1.0 + cv2)


def ess_monte_carlo(
    target_row: ProbRow,
    proposal_row: ProbRow,
    n: int,
    reps: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Empirical ESS fraction from self-normalized importance weights.

    Each rep draws ``n`` tokens from the proposal and evaluates
    ``(sum w)^2 / (n sum w^2)``. Returns the mean and the sample standard
    deviation over reps (0 when ``reps == 1``).
    """
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    if reps < 1:
        raise ValueError(f"reps must be positive, got {reps}")
    _check_support(target_row, proposal_row)
    cum = proposal_row.cum_probs
    vals = np.empty(reps)
    for r in range(reps):
        idx = np.searchsorted(cum, rng.random(n), side="right")
        w = target_row.probs[idx] / proposal_row.probs[idx]
        s = float(w.sum())
        s2 = float(np.dot(w, w))
        vals[r] = (s * s) / (s2 * n) if s2 > 0.0 else 0.0
    mean = float(vals.mean())
    std = float(vals.std(ddof=1)) if reps > 1 else 0.0
    return mean, std


@dataclass
class ParticleSet:
    """Trajectories and weights from one sequential importance run."""

    prompt_id: PromptId
    alpha: float
    tokens: np.ndarray
    log_increments: np.ndarray
    log_weights: np.ndarray
    log_proposal: np.ndarray

    @property
    def n_particles(self) -> int:
        return int(self.tokens.shape[0])

    def sequences(self) -> list[Sequence]:
        return [Sequence(self.prompt_id, tuple(int(t) for t in row)) for row in self.tokens]

    def ess_frac(self) -> float:
        """Self-normalized ESS divided by the particle count."""
        lw = self.log_weights
        finite = lw[np.isfinite(lw)]
        if finite.size == 0:
            return 0.0
        total = float(logsumexp(finite))
        total2 = float(logsumexp(2.0 * finite))
        return math.exp(2.0 * total - total2) / self.n_particles

    def self_normalized_mean(self, values: np.ndarray) -> float:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.log_weights.shape:
            raise ValueError("values must align with particles")
        lw = self.log_weights
        norm = float(logsumexp(lw))
        if not math.isfinite(norm):
            raise ValueError("all particle weights are zero")
        return float(np.dot(np.exp(lw - norm), values))


def sis_run(
    model: ARModel,
    cache: PowerCache,
    kind: ProposalKind,
    n_particles: int,
    prompt_id: PromptId,
    rng: np.random.Generator,
    proposal_alpha: float | None = None,
) -> ParticleSet:
    """Sequential importance sampling against the powered target.

    Every particle walks the horizon drawing tokens from the one-step
    proposal and multiplying in the weight f/q, where f is the exact
    power conditional from ``cache``. With the oracle proposal all
    increments are exactly 1. ``proposal_alpha`` only affects the
    temperature family and defaults to the cache's alpha.

    Returns a :class:`ParticleSet`; its final log weight equals the full
    sequence ratio log(power(y) / q(y)) up to float rounding.
    """
    if n_particles < 1:
        raise ValueError(f"n_particles must be positive, got {n_particles}")
    kind = ProposalKind(kind)
    if proposal_alpha is None:
        proposal_alpha = cache.alpha
    horizon = model.horizon
    n = n_particles
    tokens = np.zeros((n, horizon), dtype=np.int64)
    increments = np.zeros((n, horizon))
    running = np.zeros(n)
    log_q = np.zeros(n)
    prefixes: list[tuple[int, ...]] = [()] * n
    target_rows: dict[tuple[int, ...], ProbRow] = {}
    prop_rows: dict[tuple[int, ...], tuple[ProbRow, np.ndarray]] = {}
    for t in range(horizon):
        draws = rng.random(n)
        for i in range(n):
            pre = prefixes[i]
            target = target_rows.get(pre)
            if target is None:
                target = power_next_token(cache, model, prompt_id, pre)
                target_rows[pre] = target
            entry = prop_rows.get(pre)
            if entry is None:
                prow = one_step_proposal(
                    kind, model, prompt_id, pre, alpha=proposal_alpha, cache=cache
                )
                _check_support(target, prow)
                entry = (prow, prow.cum_probs)
                prop_rows[pre] = entry
            prow, cum = entry
            tok = int(np.searchsorted(cum, draws[i], side="right"))
            f = float(target.probs[tok])
            q = float(prow.probs[tok])
            w = f / q
            logw = math.log(w) if w > 0.0 else -math.inf
            increments[i, t] = logw
            running[i] += logw
            log_q[i] += float(prow.log_probs[tok])
            tokens[i, t] = tok
            prefixes[i] = pre + (tok,)
    return ParticleSet(prompt_id, cache.alpha, tokens, increments, running, log_q)
