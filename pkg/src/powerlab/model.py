"""Finite-horizon autoregressive models over integer token ids.

A model is a complete table of per-prefix next-token rows, which keeps
every distribution in this package enumerable and exactly evaluable.
Vocabulary sizes may differ per step; that is how the two-step
Zipf/power-law synthetic is expressed without padding. All probability
arithmetic that can underflow is done in log space.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "ProbRow",
    "Sequence",
    "ARModel",
    "PromptDist",
    "zipf_row",
    "powerlaw_suffix_row",
    "suffix_exponent",
    "build_synthetic_two_step",
    "random_tabular_model",
    "model_from_rows",
    "seq_logprob",
    "seq_logprob_per_token",
    "sample_sequence",
    "save_model",
    "load_model",
]

PromptId = int | str

ROW_SUM_TOL = 1e-12


class ProbRow:
    """One next-token distribution, stored in linear and log form.

    Rows are immutable. ``log_probs`` is exactly ``-inf`` where the
    linear probability is zero, and agrees with ``log(probs)`` to float
    precision elsewhere.
    """

    __slots__ = ("probs", "log_probs", "_cum")

    def __init__(self, probs: np.ndarray, log_probs: np.ndarray):
        probs = np.array(probs, dtype=np.float64, copy=True)
        log_probs = np.array(log_probs, dtype=np.float64, copy=True)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probs must be a nonempty 1-d array")
        if probs.shape != log_probs.shape:
            raise ValueError("probs and log_probs must have the same shape")
        if np.any(probs < 0.0) or not np.all(np.isfinite(probs)):
            raise ValueError("probs must be finite and nonnegative")
        total = float(probs.sum())
        if abs(total - 1.0) > ROW_SUM_TOL:
            raise ValueError(f"row sums to {total!r}, expected 1 within {ROW_SUM_TOL}")
        probs.setflags(write=False)
        log_probs.setflags(write=False)
        self.probs = probs
        self.log_probs = log_probs
        self._cum = None

    @classmethod
    def from_probs(cls, probs) -> "ProbRow":
        probs = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            log_probs = np.where(probs > 0.0, np.log(np.where(probs > 0.0, probs, 1.0)), -np.inf)
        return cls(probs, log_probs)

    @classmethod
    def from_log_unnormalized(cls, log_weights) -> "ProbRow":
        """Normalize unnormalized log weights into a row.

        Entries equal to ``-inf`` stay exact zeros. All-``-inf`` input is
        rejected because it has no normalization.
        """
        log_weights = np.asarray(log_weights, dtype=np.float64)
        if log_weights.ndim != 1 or log_weights.size == 0:
            raise ValueError("log_weights must be a nonempty 1-d array")
        if np.any(np.isnan(log_weights)) or np.any(log_weights == np.inf):
            raise ValueError("log_weights must be in [-inf, inf)")
        norm = float(logsumexp(log_weights))
        if not math.isfinite(norm):
            raise ValueError("log_weights have zero total mass")
        log_probs = log_weights - norm
        probs = np.exp(log_probs)
        # One linear cleanup pass keeps the row sum at 1 to float precision
        # even for long rows; the log side is shifted consistently.
        total = float(probs.sum())
        probs = probs / total
        log_probs = log_probs - math.log(total)
        return cls(probs, log_probs)

    @property
    def size(self) -> int:
        return int(self.probs.size)

    @property
    def cum_probs(self) -> np.ndarray:
        if self._cum is None:
            cum = np.cumsum(self.probs)
            cum[-1] = 1.0
            cum.setflags(write=False)
            self._cum = cum
        return self._cum

    def sample(self, rng: np.random.Generator) -> int:
        """Draw one token id by inverse CDF."""
        return int(np.searchsorted(self.cum_probs, rng.random(), side="right"))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProbRow):
            return NotImplemented
        return np.array_equal(self.probs, other.probs) and np.array_equal(
            self.log_probs, other.log_probs
        )

    def __repr__(self) -> str:
        return f"ProbRow(size={self.size})"


@dataclass(frozen=True)
class Sequence:
    """A full-length completion for one prompt."""

    prompt_id: PromptId
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class ARModel:
    """Complete tabular autoregressive model.

    ``rows`` maps ``(prompt_id, prefix)`` to the next-token row for every
    prefix of length < horizon, for every prompt. Builders in this module
    verify completeness; use :func:`model_from_rows` for hand-made tables.
    """

    vocab_sizes: tuple[int, ...]
    prompt_ids: tuple[PromptId, ...]
    rows: Mapping[tuple[PromptId, tuple[int, ...]], ProbRow]

    @property
    def horizon(self) -> int:
        return len(self.vocab_sizes)

    def row(self, prompt_id: PromptId, prefix: tuple[int, ...]) -> ProbRow:
        return self.rows[(prompt_id, prefix)]

    def n_prefix_nodes(self) -> int:
        """Number of stored rows per prompt."""
        total = 0
        width = 1
        for v in self.vocab_sizes:
            total += width
            width *= v
        return total

    def n_sequences(self) -> int:
        n = 1
        for v in self.vocab_sizes:
            n *= v
        return n

    def iter_prefixes(self, level: int) -> Iterator[tuple[int, ...]]:
        """All prefixes of the given length, in enumeration order."""
        if level == 0:
            yield ()
            return
        yield from itertools.product(*[range(v) for v in self.vocab_sizes[:level]])

    def validate_sequence(self, seq: Sequence) -> None:
        if seq.prompt_id not in self.prompt_ids:
            raise ValueError(f"unknown prompt id {seq.prompt_id!r}")
        if len(seq.tokens) != self.horizon:
            raise ValueError(
                f"sequence length {len(seq.tokens)} does not match horizon {self.horizon}"
            )
        for t, tok in enumerate(seq.tokens):
            if not 0 <= tok < self.vocab_sizes[t]:
                raise ValueError(f"token {tok} out of range at step {t}")


def model_from_rows(
    vocab_sizes,
    prompt_ids,
    rows: Mapping[tuple[PromptId, tuple[int, ...]], ProbRow],
) -> ARModel:
    """Assemble and fully validate a tabular model."""
    vocab_sizes = tuple(int(v) for v in vocab_sizes)
    prompt_ids = tuple(prompt_ids)
    if not vocab_sizes or any(v < 1 for v in vocab_sizes):
        raise ValueError(f"vocab sizes must be positive, got {vocab_sizes}")
    if not prompt_ids:
        raise ValueError("at least one prompt id is required")
    if len(set(prompt_ids)) != len(prompt_ids):
        raise ValueError("prompt ids must be unique")
    model = ARModel(vocab_sizes, prompt_ids, dict(rows))
    expected = model.n_prefix_nodes() * len(prompt_ids)
    if len(model.rows) != expected:
        raise ValueError(
            f"expected {expected} rows for a complete table, got {len(model.rows)}"
        )
    for pid in prompt_ids:
        for level in range(len(vocab_sizes)):
            for prefix in model.iter_prefixes(level):
                row = model.rows.get((pid, prefix))
                if row is None:
                    raise ValueError(f"missing row for prompt {pid!r}, prefix {prefix}")
                if row.size != vocab_sizes[level]:
                    raise ValueError(
                        f"row at prompt {pid!r}, prefix {prefix} has size "
                        f"{row.size}, expected {vocab_sizes[level]}"
                    )
    return model


def zipf_row(size: int, exponent: float) -> ProbRow:
    """Row with p(i) proportional to (i + 1)^-exponent, i = 0..size-1."""
    if size < 1:
        raise ValueError(f"size must be positive, got {size}")
    if not math.isfinite(exponent):
        raise ValueError(f"exponent must be finite, got {exponent}")
    ranks = np.arange(1, size + 1, dtype=np.float64)
    return ProbRow.from_log_unnormalized(-exponent * np.log(ranks))


def powerlaw_suffix_row(size: int, exponent: float) -> ProbRow:
    """Row with p(z - 1) proportional to z^-exponent over z = 1..size."""
    if size < 1:
        raise ValueError(f"size must be positive, got {size}")
    if not math.isfinite(exponent):
        raise ValueError(f"exponent must be finite, got {exponent}")
    ranks = np.arange(1, size + 1, dtype=np.float64)
    return ProbRow.from_log_unnormalized(-exponent * np.log(ranks))


def suffix_exponent(i: int, vocab_size: int) -> float:
    """Decay exponent for the suffix row behind first-step token ``i``.

    A sinusoid plus a slight linear trend, kept inside [0.45, 1.65] by
    construction: 1.05 + 0.55 sin(6 pi i / V) + 0.05 (2 i / (V - 1) - 1).
    """
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be at least 2, got {vocab_size}")
    if not 0 <= i < vocab_size:
        raise ValueError(f"token index {i} out of range for vocab size {vocab_size}")
    wave = 0.55 * math.sin(6.0 * math.pi * i / vocab_size)
    trend = 0.05 * (2.0 * i / (vocab_size - 1) - 1.0)
    return 1.05 + wave + trend


def build_synthetic_two_step(
    vocab_size: int,
    suffix_size: int,
    zipf_exponent: float = 1.05,
    prompt_id: PromptId = 0,
) -> ARModel:
    """Two-step model: Zipf first token, per-token power-law suffix rows."""
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be at least 2, got {vocab_size}")
    if suffix_size < 1:
        raise ValueError(f"suffix_size must be positive, got {suffix_size}")
    rows: dict[tuple[PromptId, tuple[int, ...]], ProbRow] = {}
    rows[(prompt_id, ())] = zipf_row(vocab_size, zipf_exponent)
    for i in range(vocab_size):
        rows[(prompt_id, (i,))] = powerlaw_suffix_row(
            suffix_size, suffix_exponent(i, vocab_size)
        )
    return model_from_rows((vocab_size, suffix_size), (prompt_id,), rows)


def random_tabular_model(
    vocab_sizes,
    rng: np.random.Generator,
    prompt_ids: tuple[PromptId, ...] = (0,),
    concentration: float = 1.0,
) -> ARModel:
    """Full-support model with Dirichlet rows, deterministic given the rng."""
    vocab_sizes = tuple(int(v) for v in vocab_sizes)
    if concentration <= 0.0:
        raise ValueError(f"concentration must be positive, got {concentration}")
    rows: dict[tuple[PromptId, tuple[int, ...]], ProbRow] = {}
    for pid in prompt_ids:
        for level, v in enumerate(vocab_sizes):
            for prefix in itertools.product(*[range(u) for u in vocab_sizes[:level]]):
                probs = rng.dirichlet(np.full(v, concentration))
                rows[(pid, prefix)] = ProbRow.from_probs(probs)
    return model_from_rows(vocab_sizes, prompt_ids, rows)


def seq_logprob(model: ARModel, seq: Sequence) -> float:
    """Total log probability of a full sequence; -inf off support."""
    model.validate_sequence(seq)
    total = 0.0
    prefix: tuple[int, ...] = ()
    for tok in seq.tokens:
        total += float(model.row(seq.prompt_id, prefix).log_probs[tok])
        prefix = prefix + (tok,)
    return total


def seq_logprob_per_token(model: ARModel, seq: Sequence) -> float:
    """Length-normalized log probability, the reporting convention."""
    return seq_logprob(model, seq) / model.horizon


def sample_sequence(model: ARModel, prompt_id: PromptId, rng: np.random.Generator) -> Sequence:
    """Ancestral draw from the base model."""
    if prompt_id not in model.prompt_ids:
        raise ValueError(f"unknown prompt id {prompt_id!r}")
    prefix: tuple[int, ...] = ()
    for _ in range(model.horizon):
        tok = model.row(prompt_id, prefix).sample(rng)
        prefix = prefix + (tok,)
    return Sequence(prompt_id, prefix)


@dataclass(frozen=True)
class PromptDist:
    """Finite prompt distribution used to average per-prompt quantities."""

    prompt_ids: tuple[PromptId, ...]
    weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 1 or weights.size != len(self.prompt_ids):
            raise ValueError("weights must align with prompt_ids")
        if np.any(weights < 0.0) or abs(float(weights.sum()) - 1.0) > ROW_SUM_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        if len(set(self.prompt_ids)) != len(self.prompt_ids):
            raise ValueError("prompt ids must be unique")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, prompt_ids) -> "PromptDist":
        prompt_ids = tuple(prompt_ids)
        n = len(prompt_ids)
        return cls(prompt_ids, np.full(n, 1.0 / n))

    def weight(self, prompt_id: PromptId) -> float:
        return float(self.weights[self.prompt_ids.index(prompt_id)])

    def sample(self, rng: np.random.Generator) -> PromptId:
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        return self.prompt_ids[int(np.searchsorted(cum, rng.random(), side="right"))]


def _rows_in_order(model: ARModel) -> Iterator[tuple[PromptId, tuple[int, ...], ProbRow]]:
    for pid in model.prompt_ids:
        for level in range(model.horizon):
            for prefix in model.iter_prefixes(level):
                yield pid, prefix, model.row(pid, prefix)


def save_model(model: ARModel, path: str | Path) -> None:
    """Write a model as one JSON document with full-precision floats."""
    doc = {
        "vocab_sizes": list(model.vocab_sizes),
        "horizon": model.horizon,
        "prompt_ids": list(model.prompt_ids),
        "rows": [
            {"prompt_id": pid, "prefix": list(prefix), "probs": row.probs.tolist()}
            for pid, prefix, row in _rows_in_order(model)
        ],
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    Path(path).write_bytes(text.encode("utf-8") + b"\n")


def load_model(path: str | Path) -> ARModel:
    """Read a model written by :func:`save_model` and revalidate it."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    vocab_sizes = tuple(int(v) for v in doc["vocab_sizes"])
    if int(doc["horizon"]) != len(vocab_sizes):
        raise ValueError("horizon does not match vocab_sizes")
    prompt_ids = tuple(doc["prompt_ids"])
    rows: dict[tuple[PromptId, tuple[int, ...]], ProbRow] = {}
    for entry in doc["rows"]:
        key = (entry["prompt_id"], tuple(int(t) for t in entry["prefix"]))
        if key in rows:
            raise ValueError(f"duplicate row for {key}")
        rows[key] = ProbRow.from_probs(np.asarray(entry["probs"], dtype=np.float64))
    return model_from_rows(vocab_sizes, prompt_ids, rows)
