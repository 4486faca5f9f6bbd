"""Experiment harness: validated configs in, deterministic artifacts out.

Every command is a pure function of its config and seed. Outputs are
CSV tables and line-delimited JSON, floats carry 17 significant digits,
and rerunning a command with the same inputs reproduces every file byte
for byte. Each command also evaluates its own pass/fail checks, written
to ``checks.jsonl``; a failed check is a validation failure, not a
crash.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, NamedTuple

import numpy as np
from scipy.stats import spearmanr

from powerlab.distill import (
    DistillDataset,
    collect_distill_dataset,
    fit_tabular_mle,
    self_reward_fn,
    sharpening_prob,
)
from powerlab.model import (
    ARModel,
    PromptDist,
    build_synthetic_two_step,
    load_model,
    random_tabular_model,
    save_model,
)
from powerlab.power import (
    SequenceDist,
    all_sequence_logprobs,
    build_power_cache,
    exact_power_dist,
    odds_correction_table,
    power_next_token,
    rank_reversal_scan,
    tv_distance,
)
from powerlab.rewards import (
    covariance_gain_sweep,
    random_table_reward,
    reward_curve,
    reward_derivative_check,
)
from powerlab.rng import make_rng, spawn_rngs
from powerlab.samplers import (
    MHConfig,
    ProposalKind,
    SamplerTables,
    ess_exact,
    ess_monte_carlo,
    mh_power_sample,
    one_step_proposal,
    power_inf_sample,
)
from powerlab.tables import ResultTable

__all__ = [
    "ConfigError",
    "CheckResult",
    "CommandReport",
    "EXPERIMENTS",
    "parse_config",
    "run_experiment",
]

TV_THRESHOLD = 0.05
IDENTITY_TOL = 1e-10
DERIVATIVE_TOL = 1e-4
ORACLE_CV2_TOL = 1e-20


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


@dataclass
class CommandReport:
    experiment: str
    out_dir: Path
    files: list[str] = field(default_factory=list)
    checks: list[CheckResult] = field(default_factory=list)
    stats: dict[str, Any] = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _reject_unknown(d: dict, allowed: set[str], ctx: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{ctx}: unknown keys {unknown}")


def _require(d: dict, key: str, ctx: str):
    if key not in d:
        raise ConfigError(f"{ctx}: missing required key {key!r}")
    return d[key]


def _as_number(value, ctx: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{ctx}: expected a number, got {value!r}")
    return float(value)


def _as_int(value, ctx: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{ctx}: expected an integer, got {value!r}")
    return value


def _positive_float(value, ctx: str) -> float:
    x = _as_number(value, ctx)
    if not math.isfinite(x) or x <= 0.0:
        raise ConfigError(f"{ctx}: must be positive and finite, got {value!r}")
    return x


def _positive_int(value, ctx: str) -> int:
    x = _as_int(value, ctx)
    if x < 1:
        raise ConfigError(f"{ctx}: must be a positive integer, got {value!r}")
    return x


def _seed(d: dict, default: int = 0) -> int:
    value = d.get("seed", default)
    x = _as_int(value, "seed")
    if x < 0:
        raise ConfigError(f"seed: must be nonnegative, got {value!r}")
    return x


def _alpha_list(value, ctx: str) -> tuple[float, ...]:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{ctx}: expected a nonempty list")
    return tuple(_positive_float(v, f"{ctx}[{i}]") for i, v in enumerate(value))


def build_model_from_spec(spec, ctx: str = "model") -> ARModel:
    """Build a model from its config block.

    Supported types: ``two_step`` (Zipf head plus power-law suffixes),
    ``random`` (seeded Dirichlet rows), ``file`` (a saved model).
    """
    if not isinstance(spec, dict):
        raise ConfigError(f"{ctx}: expected an object")
    kind = _require(spec, "type", ctx)
    if kind == "two_step":
        _reject_unknown(
            spec, {"type", "vocab_size", "suffix_size", "zipf_exponent"}, ctx
        )
        vocab = _positive_int(_require(spec, "vocab_size", ctx), f"{ctx}.vocab_size")
        suffix = _positive_int(_require(spec, "suffix_size", ctx), f"{ctx}.suffix_size")
        zipf = _as_number(spec.get("zipf_exponent", 1.05), f"{ctx}.zipf_exponent")
        if vocab < 2:
            raise ConfigError(f"{ctx}.vocab_size: must be at least 2, got {vocab}")
        return build_synthetic_two_step(vocab, suffix, zipf)
    if kind == "random":
        _reject_unknown(
            spec, {"type", "vocab_sizes", "seed", "n_prompts", "concentration"}, ctx
        )
        sizes = _require(spec, "vocab_sizes", ctx)
        if not isinstance(sizes, list) or not sizes:
            raise ConfigError(f"{ctx}.vocab_sizes: expected a nonempty list")
        vocab_sizes = tuple(
            _positive_int(v, f"{ctx}.vocab_sizes[{i}]") for i, v in enumerate(sizes)
        )
        seed = _as_int(_require(spec, "seed", ctx), f"{ctx}.seed")
        if seed < 0:
            raise ConfigError(f"{ctx}.seed: must be nonnegative")
        n_prompts = _positive_int(spec.get("n_prompts", 1), f"{ctx}.n_prompts")
        concentration = _positive_float(
            spec.get("concentration", 1.0), f"{ctx}.concentration"
        )
        return random_tabular_model(
            vocab_sizes,
            make_rng(seed),
            prompt_ids=tuple(range(n_prompts)),
            concentration=concentration,
        )
    if kind == "file":
        _reject_unknown(spec, {"type", "path"}, ctx)
        path = _require(spec, "path", ctx)
        if not isinstance(path, str):
            raise ConfigError(f"{ctx}.path: expected a string")
        try:
            return load_model(path)
        except FileNotFoundError as exc:
            raise ConfigError(f"{ctx}.path: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{ctx}.path: invalid model file: {exc}") from exc
    raise ConfigError(f"{ctx}.type: unknown model type {kind!r}")


def _write_checks(out_dir: Path, report: CommandReport) -> None:
    lines = []
    for check in report.checks:
        lines.append(
            json.dumps(
                {
                    "detail": check.detail,
                    "name": check.name,
                    "passed": check.passed,
                    "type": "check",
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    for key in sorted(report.stats):
        lines.append(
            json.dumps(
                {"name": key, "type": "stat", "value": report.stats[key]},
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    path = out_dir / "checks.jsonl"
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    report.files.append(path.name)


def _write_table(out_dir: Path, name: str, table: ResultTable, report: CommandReport) -> None:
    table.write(out_dir / name)
    report.files.append(name)


# ---------------------------------------------------------------- synth-odds


@dataclass(frozen=True)
class SynthOddsConfig:
    model_spec: dict
    alphas: tuple[float, ...]
    reversal_alpha: float

    @classmethod
    def from_dict(cls, d: dict) -> "SynthOddsConfig":
        _reject_unknown(
            d, {"experiment", "model", "alphas", "reversal_alpha", "seed", "out_dir"}, "config"
        )
        alphas = _alpha_list(_require(d, "alphas", "config"), "alphas")
        reversal_alpha = _positive_float(
            d.get("reversal_alpha", 4.0), "reversal_alpha"
        )
        return cls(_require(d, "model", "config"), alphas, reversal_alpha)


def run_synth_odds(cfg: SynthOddsConfig, out_dir: Path) -> CommandReport:
    report = CommandReport("synth-odds", out_dir)
    model = build_model_from_spec(cfg.model_spec)
    pid = model.prompt_ids[0]
    identity = ResultTable(
        ("alpha", "token_a", "token_b", "closed_form", "renyi_predicted", "abs_diff")
    )
    max_diff = 0.0
    for alpha in cfg.alphas:
        cache = build_power_cache(model, alpha)
        for a, b, closed, predicted in odds_correction_table(model, cache, pid):
            diff = abs(closed - predicted)
            max_diff = max(max_diff, diff)
            identity.append(alpha, a, b, closed, predicted, diff)
    _write_table(out_dir, "odds_identity.csv", identity, report)
    report.checks.append(
        CheckResult(
            "odds_identity_bound",
            max_diff <= IDENTITY_TOL,
            f"max |closed - predicted| = {max_diff:.3e}, tolerance {IDENTITY_TOL:.0e}",
        )
    )

    cache = build_power_cache(model, cfg.reversal_alpha)
    scan = rank_reversal_scan(model, cache, pid)
    corrections = {
        (a, b): closed for a, b, closed, _ in odds_correction_table(model, cache, pid)
    }
    reversals = ResultTable(
        (
            "alpha",
            "token_a",
            "token_b",
            "temp_log_odds",
            "pow_log_odds",
            "correction",
            "is_reversal",
        )
    )
    consistency = 0.0
    n_reversals = 0
    for row in scan:
        key = (min(row.token_a, row.token_b), max(row.token_a, row.token_b))
        closed = corrections[key]
        if row.token_a > row.token_b:
            closed = -closed
        consistency = max(
            consistency, abs(row.pow_log_odds - (row.temp_log_odds + closed))
        )
        n_reversals += int(row.is_reversal)
        reversals.append(
            cfg.reversal_alpha,
            row.token_a,
            row.token_b,
            row.temp_log_odds,
            row.pow_log_odds,
            row.correction,
            row.is_reversal,
        )
    _write_table(out_dir, "rank_reversals.csv", reversals, report)
    report.checks.append(
        CheckResult(
            "reversal_consistency",
            consistency <= IDENTITY_TOL,
            f"max |pow - (temp + correction)| = {consistency:.3e}",
        )
    )
    report.stats["n_pairs"] = len(scan)
    report.stats["n_reversals"] = n_reversals
    _write_checks(out_dir, report)
    return report


# ----------------------------------------------------------------- synth-sis

PROPOSAL_ORDER = (
    ProposalKind.BASE,
    ProposalKind.TEMPERATURE,
    ProposalKind.UNIFORM,
    ProposalKind.ORACLE,
)


@dataclass(frozen=True)
class SynthSisConfig:
    model_spec: dict
    alphas: tuple[float, ...]
    mc_alpha: float
    mc_n_grid: tuple[int, ...]
    mc_reps: int
    seed: int

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSisConfig":
        _reject_unknown(
            d, {"experiment", "model", "alphas", "mc", "seed", "out_dir"}, "config"
        )
        alphas = _alpha_list(_require(d, "alphas", "config"), "alphas")
        mc = _require(d, "mc", "config")
        if not isinstance(mc, dict):
            raise ConfigError("mc: expected an object")
        _reject_unknown(mc, {"alpha", "n_grid", "reps"}, "mc")
        mc_alpha = _positive_float(_require(mc, "alpha", "mc"), "mc.alpha")
        grid = _require(mc, "n_grid", "mc")
        if not isinstance(grid, list) or not grid:
            raise ConfigError("mc.n_grid: expected a nonempty list")
        n_grid = tuple(_positive_int(v, f"mc.n_grid[{i}]") for i, v in enumerate(grid))
        if any(n < 2 for n in n_grid):
            raise ConfigError("mc.n_grid: entries must be at least 2")
        reps = _positive_int(_require(mc, "reps", "mc"), "mc.reps")
        return cls(_require(d, "model", "config"), alphas, mc_alpha, n_grid, reps, _seed(d))


def run_synth_sis(cfg: SynthSisConfig, out_dir: Path) -> CommandReport:
    report = CommandReport("synth-sis", out_dir)
    model = build_model_from_spec(cfg.model_spec)
    pid = model.prompt_ids[0]

    exact = ResultTable(("proposal", "alpha", "cv2", "ess_frac"))
    oracle_ok = True
    temp_profile = []
    for alpha in cfg.alphas:
        cache = build_power_cache(model, alpha)
        target = power_next_token(cache, model, pid, ())
        for kind in PROPOSAL_ORDER:
            proposal = one_step_proposal(kind, model, pid, (), alpha=alpha, cache=cache)
            cv2, frac = ess_exact(target, proposal)
            exact.append(kind.value, alpha, cv2, frac)
            if kind is ProposalKind.ORACLE:
                oracle_ok = oracle_ok and cv2 <= ORACLE_CV2_TOL and frac == 1.0
            if kind is ProposalKind.TEMPERATURE:
                temp_profile.append(frac)
    _write_table(out_dir, "ess_exact.csv", exact, report)
    report.checks.append(
        CheckResult(
            "oracle_exact_unit",
            oracle_ok,
            f"oracle rows must have cv2 <= {ORACLE_CV2_TOL:.0e} and ess_frac == 1",
        )
    )
    non_increasing = all(
        later <= earlier + 1e-12 for earlier, later in zip(temp_profile, temp_profile[1:])
    )
    report.checks.append(
        CheckResult(
            "temperature_ess_non_increasing",
            non_increasing,
            "temperature-proposal ess_frac across the alpha grid: "
            + ", ".join(f"{v:.6f}" for v in temp_profile),
        )
    )

    cache = build_power_cache(model, cfg.mc_alpha)
    target = power_next_token(cache, model, pid, ())
    mc = ResultTable(
        ("proposal", "n", "mean_ess_frac", "std_ess_frac", "exact_ess_frac")
    )
    mc_ok = True
    rngs = spawn_rngs(cfg.seed, len(PROPOSAL_ORDER) * len(cfg.mc_n_grid))
    stream = iter(rngs)
    for kind in PROPOSAL_ORDER:
        proposal = one_step_proposal(
            kind, model, pid, (), alpha=cfg.mc_alpha, cache=cache
        )
        _, exact_frac = ess_exact(target, proposal)
        for n in cfg.mc_n_grid:
            mean, std = ess_monte_carlo(target, proposal, n, cfg.mc_reps, next(stream))
            mc.append(kind.value, n, mean, std, exact_frac)
            mc_ok = mc_ok and abs(mean - exact_frac) <= 3.0 * std + 1e-15
    _write_table(out_dir, "ess_monte_carlo.csv", mc, report)
    report.checks.append(
        CheckResult(
            "mc_within_three_std",
            mc_ok,
            "every Monte-Carlo mean within 3 std of the closed form",
        )
    )
    _write_checks(out_dir, report)
    return report


# ------------------------------------------------------------------- distill


@dataclass(frozen=True)
class DistillConfig:
    model_spec: dict
    alpha: float
    n_grid: tuple[int, ...]
    n_seeds: int
    seed: int
    delta: float
    epsilon: float
    mode: str
    sharpening_alphas: tuple[float, ...]
    save_datasets: bool

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        _reject_unknown(
            d,
            {
                "experiment",
                "model",
                "alpha",
                "n_grid",
                "n_seeds",
                "seed",
                "delta",
                "epsilon",
                "mode",
                "sharpening_alphas",
                "save_datasets",
                "out_dir",
            },
            "config",
        )
        alpha = _positive_float(_require(d, "alpha", "config"), "alpha")
        grid = _require(d, "n_grid", "config")
        if not isinstance(grid, list) or not grid:
            raise ConfigError("n_grid: expected a nonempty list")
        n_grid = tuple(_positive_int(v, f"n_grid[{i}]") for i, v in enumerate(grid))
        n_seeds = _positive_int(d.get("n_seeds", 3), "n_seeds")
        delta = _as_number(d.get("delta", 0.1), "delta")
        if not 0.0 < delta < 1.0:
            raise ConfigError(f"delta: must be in (0, 1), got {delta}")
        epsilon = _as_number(d.get("epsilon", 0.0), "epsilon")
        if epsilon < 0.0:
            raise ConfigError(f"epsilon: must be nonnegative, got {epsilon}")
        mode = d.get("mode", "exact")
        if mode not in ("exact", "mh"):
            raise ConfigError(f"mode: must be 'exact' or 'mh', got {mode!r}")
        sharpening = _alpha_list(
            d.get("sharpening_alphas", [1.0, 2.0, 4.0, 8.0, 16.0]), "sharpening_alphas"
        )
        save_datasets = d.get("save_datasets", True)
        if not isinstance(save_datasets, bool):
            raise ConfigError("save_datasets: expected a boolean")
        return cls(
            _require(d, "model", "config"),
            alpha,
            n_grid,
            n_seeds,
            _seed(d),
            delta,
            epsilon,
            mode,
            sharpening,
            save_datasets,
        )


def _mean_self_reward(dist: SequenceDist, model: ARModel, mu: PromptDist) -> float:
    """Length-normalized base log probability, averaged under ``dist``."""
    total = 0.0
    for pid, weight in zip(mu.prompt_ids, mu.weights):
        if weight == 0.0:
            continue
        base_lp = all_sequence_logprobs(model, pid)
        lp = dist.log_probs[pid]
        mask = lp > -np.inf
        total += float(weight) * float(np.dot(np.exp(lp[mask]), base_lp[mask]))
    return total / model.horizon


def _inversions(profile: list[float], tol: float = 0.0) -> int:
    return sum(
        1 for a, b in zip(profile, profile[1:]) if b > a + tol
    )


def run_distill(cfg: DistillConfig, out_dir: Path) -> CommandReport:
    report = CommandReport("distill", out_dir)
    model = build_model_from_spec(cfg.model_spec)
    mu = PromptDist.uniform(model.prompt_ids)
    power_dist = exact_power_dist(model, cfg.alpha)
    base_dist = exact_power_dist(model, 1.0)
    mean_base = _mean_self_reward(base_dist, model, mu)
    mean_power = _mean_self_reward(power_dist, model, mu)

    metrics = ResultTable(
        (
            "seed_index",
            "n",
            "tv_student_power",
            "sharpening_prob",
            "mean_rself_student",
            "mean_rself_base",
            "mean_rself_power",
        )
    )
    data_dir = out_dir / "data"
    if cfg.save_datasets:
        data_dir.mkdir(parents=True, exist_ok=True)
    tv_by_n: dict[int, list[float]] = {n: [] for n in cfg.n_grid}
    sharp_by_n: dict[int, list[float]] = {n: [] for n in cfg.n_grid}
    for seed_index in range(cfg.n_seeds):
        for j, n in enumerate(cfg.n_grid):
            rng_seed = np.random.SeedSequence(
                entropy=cfg.seed, spawn_key=(seed_index, j)
            )
            rng = np.random.Generator(np.random.Philox(rng_seed))
            dataset = collect_distill_dataset(
                model, cfg.alpha, mu, n, cfg.mode, rng, seed=cfg.seed
            )
            if cfg.save_datasets:
                name = f"data/dataset_s{seed_index}_n{n}.jsonl"
                dataset.save(out_dir / name)
                report.files.append(name)
                reloaded = DistillDataset.load(out_dir / name, model)
                if reloaded.records != dataset.records:
                    raise RuntimeError("dataset did not round-trip")
            student = fit_tabular_mle(dataset, model, epsilon=cfg.epsilon)
            student_dist = exact_power_dist(student.as_model(), 1.0)
            tv = max(
                tv_distance(student_dist.probs(pid), power_dist.probs(pid))
                for pid in model.prompt_ids
            )
            sharp = sharpening_prob(student_dist, model, mu, cfg.delta)
            tv_by_n[n].append(tv)
            sharp_by_n[n].append(sharp)
            metrics.append(
                seed_index,
                n,
                tv,
                sharp,
                _mean_self_reward(student_dist, model, mu),
                mean_base,
                mean_power,
            )
    _write_table(out_dir, "distill_metrics.csv", metrics, report)

    tv_profile = [float(np.mean(tv_by_n[n])) for n in cfg.n_grid]
    sharp_profile = [float(np.mean(sharp_by_n[n])) for n in cfg.n_grid]
    report.checks.append(
        CheckResult(
            "tv_profile_monotone",
            _inversions(tv_profile) <= 1,
            "mean TV to the powered target per n: "
            + ", ".join(f"{v:.4f}" for v in tv_profile),
        )
    )
    report.checks.append(
        CheckResult(
            "sharpening_profile_monotone",
            _inversions(sharp_profile) <= 1,
            "mean sharpening probability per n: "
            + ", ".join(f"{v:.4f}" for v in sharp_profile),
        )
    )

    sharp_alpha = ResultTable(("alpha", "sharpening_prob"))
    profile = []
    for alpha in cfg.sharpening_alphas:
        dist = exact_power_dist(model, alpha)
        value = sharpening_prob(dist, model, mu, cfg.delta)
        profile.append(value)
        sharp_alpha.append(alpha, value)
    _write_table(out_dir, "sharpening_alpha.csv", sharp_alpha, report)
    report.checks.append(
        CheckResult(
            "sharpening_alpha_non_increasing",
            _inversions(profile) == 0,
            "sharpening probability of the exact powered target per alpha: "
            + ", ".join(f"{v:.4f}" for v in profile),
        )
    )
    report.checks.append(
        CheckResult(
            "sharpening_alpha_reaches_zero",
            profile[-1] == 0.0,
            f"value at alpha={cfg.sharpening_alphas[-1]} is {profile[-1]}",
        )
    )
    _write_checks(out_dir, report)
    return report


# ----------------------------------------------------------------- cov-sweep


@dataclass(frozen=True)
class CovSweepConfig:
    model_spec: dict
    alpha: float
    lambdas: tuple[float, ...]
    sigma: float
    seed: int
    derivative_alphas: tuple[float, ...]
    derivative_n_rewards: int
    derivative_h: float

    @classmethod
    def from_dict(cls, d: dict) -> "CovSweepConfig":
        _reject_unknown(
            d,
            {"experiment", "model", "alpha", "lambdas", "sigma", "seed", "derivative", "out_dir"},
            "config",
        )
        alpha = _positive_float(_require(d, "alpha", "config"), "alpha")
        lams = _require(d, "lambdas", "config")
        if not isinstance(lams, list) or not lams:
            raise ConfigError("lambdas: expected a nonempty list")
        lambdas = []
        for i, lam in enumerate(lams):
            lam = _as_number(lam, f"lambdas[{i}]")
            if not -1.0 <= lam <= 1.0:
                raise ConfigError(f"lambdas[{i}]: must be in [-1, 1], got {lam}")
            lambdas.append(lam)
        sigma = _as_number(d.get("sigma", 0.5), "sigma")
        if sigma < 0.0:
            raise ConfigError(f"sigma: must be nonnegative, got {sigma}")
        deriv = d.get("derivative", {})
        if not isinstance(deriv, dict):
            raise ConfigError("derivative: expected an object")
        _reject_unknown(deriv, {"alphas", "n_rewards", "h"}, "derivative")
        d_alphas = _alpha_list(
            deriv.get("alphas", [1.0, 1.5, 2.0, 4.0]), "derivative.alphas"
        )
        n_rewards = _positive_int(deriv.get("n_rewards", 5), "derivative.n_rewards")
        h = _positive_float(deriv.get("h", 1e-4), "derivative.h")
        return cls(
            _require(d, "model", "config"),
            alpha,
            tuple(lambdas),
            sigma,
            _seed(d),
            d_alphas,
            n_rewards,
            h,
        )


def _sign_match(a: float, b: float, zero_tol: float = 1e-12) -> bool:
    if abs(a) <= zero_tol and abs(b) <= zero_tol:
        return True
    return (a > 0.0) == (b > 0.0) and (a < 0.0) == (b < 0.0)


def run_cov_sweep(cfg: CovSweepConfig, out_dir: Path) -> CommandReport:
    report = CommandReport("cov-sweep", out_dir)
    model = build_model_from_spec(cfg.model_spec)
    pid = model.prompt_ids[0]

    sweep = covariance_gain_sweep(
        model, cfg.alpha, cfg.lambdas, pid, sigma=cfg.sigma, seed=cfg.seed
    )
    _write_table(out_dir, "cov_sweep.csv", sweep, report)
    gains = sweep.column("gain")
    integrated = sweep.column("integrated_cov")
    signs_ok = all(_sign_match(g, ic) for g, ic in zip(gains, integrated))
    report.checks.append(
        CheckResult(
            "gain_sign_matches_integrated_cov",
            signs_ok,
            "sign(gain) == sign(integrated covariance) for every lambda",
        )
    )
    if len(gains) > 1:
        rho = float(spearmanr(gains, integrated).correlation)
    else:
        rho = 1.0
    report.checks.append(
        CheckResult(
            "gain_rank_correlation",
            rho > 0.9,
            f"Spearman rho between gain and integrated covariance = {rho:.4f}",
        )
    )

    deriv = ResultTable(("reward_index", "alpha", "cov_value", "fd_estimate", "rel_err"))
    worst = 0.0
    rngs = spawn_rngs(cfg.seed, cfg.derivative_n_rewards)
    for i in range(cfg.derivative_n_rewards):
        reward = random_table_reward(model, rngs[i])
        for alpha in cfg.derivative_alphas:
            check = reward_derivative_check(model, alpha, reward, pid, h=cfg.derivative_h)
            worst = max(worst, check.rel_err)
            deriv.append(i, alpha, check.cov_value, check.fd_estimate, check.rel_err)
    _write_table(out_dir, "derivative_check.csv", deriv, report)
    report.checks.append(
        CheckResult(
            "derivative_identity",
            worst <= DERIVATIVE_TOL,
            f"max relative error between covariance and finite difference = {worst:.3e}",
        )
    )

    curve = reward_curve(model, self_reward_fn(model), pid, cfg.derivative_alphas, h=cfg.derivative_h)
    self_table = ResultTable(("alpha", "expected_self_reward", "cov_value"))
    for alpha, value, cov in zip(curve.alphas, curve.values, curve.covariances):
        self_table.append(alpha, value, cov)
    _write_table(out_dir, "self_reward_curve.csv", self_table, report)
    monotone = all(
        b >= a for a, b in zip(curve.values, curve.values[1:])
    ) and all(c >= 0.0 for c in curve.covariances)
    report.checks.append(
        CheckResult(
            "self_reward_monotone",
            monotone,
            "expected self reward non-decreasing with nonnegative covariance",
        )
    )
    _write_checks(out_dir, report)
    return report


# --------------------------------------------------------------- mh-validate


@dataclass(frozen=True)
class MHValidateConfig:
    model_spec: dict
    alpha: float
    block_size: int | None
    n_mcmc_grid: tuple[int, ...]
    n_chains: int
    proposal_temp: float | None
    n_power_inf_chains: int
    power_inf_n_mcmc: int
    n_alpha1_chains: int
    seed: int

    @classmethod
    def from_dict(cls, d: dict) -> "MHValidateConfig":
        _reject_unknown(
            d,
            {
                "experiment",
                "model",
                "alpha",
                "block_size",
                "n_mcmc_grid",
                "n_chains",
                "proposal_temp",
                "n_power_inf_chains",
                "power_inf_n_mcmc",
                "n_alpha1_chains",
                "seed",
                "out_dir",
            },
            "config",
        )
        alpha = _positive_float(_require(d, "alpha", "config"), "alpha")
        block = d.get("block_size")
        if block is not None:
            block = _positive_int(block, "block_size")
        grid = _require(d, "n_mcmc_grid", "config")
        if not isinstance(grid, list) or not grid:
            raise ConfigError("n_mcmc_grid: expected a nonempty list")
        n_mcmc_grid = tuple(
            _positive_int(v, f"n_mcmc_grid[{i}]") for i, v in enumerate(grid)
        )
        n_chains = _positive_int(_require(d, "n_chains", "config"), "n_chains")
        temp = d.get("proposal_temp")
        if temp is not None:
            temp = _positive_float(temp, "proposal_temp")
        n_pi = _positive_int(d.get("n_power_inf_chains", 200), "n_power_inf_chains")
        pi_mcmc = _positive_int(d.get("power_inf_n_mcmc", 20), "power_inf_n_mcmc")
        n_a1 = _positive_int(d.get("n_alpha1_chains", 200), "n_alpha1_chains")
        return cls(
            _require(d, "model", "config"),
            alpha,
            block,
            n_mcmc_grid,
            n_chains,
            temp,
            n_pi,
            pi_mcmc,
            n_a1,
            _seed(d),
        )


def run_mh_validate(cfg: MHValidateConfig, out_dir: Path) -> CommandReport:
    report = CommandReport("mh-validate", out_dir)
    model = build_model_from_spec(cfg.model_spec)
    pid = model.prompt_ids[0]
    base_cfg = MHConfig(
        alpha=cfg.alpha, block_size=cfg.block_size, proposal_temp=cfg.proposal_temp
    )
    # Surface divisibility problems before spending time on chains.
    try:
        base_cfg.resolved_block(model.horizon)
    except ValueError as exc:
        raise ConfigError(f"block_size: {exc}") from exc
    exact = exact_power_dist(model, cfg.alpha)
    exact_probs = exact.probs(pid)
    tables = SamplerTables(model, pid, 1.0 / base_cfg.resolved_temp())

    tv_table = ResultTable(("n_mcmc", "n_chains", "tv"))
    tv_profile = []
    budget_seeds = np.random.SeedSequence(cfg.seed).spawn(len(cfg.n_mcmc_grid))
    for budget, budget_seed in zip(cfg.n_mcmc_grid, budget_seeds):
        run_cfg = MHConfig(
            alpha=cfg.alpha,
            block_size=cfg.block_size,
            n_mcmc=budget,
            proposal_temp=cfg.proposal_temp,
        )
        counts = np.zeros(exact_probs.size)
        for chain_seed in budget_seed.spawn(cfg.n_chains):
            rng = np.random.Generator(np.random.Philox(chain_seed))
            sample = mh_power_sample(model, run_cfg, pid, rng, tables=tables)
            counts[exact.index_of(sample.sequence.tokens)] += 1.0
        tv = tv_distance(counts / cfg.n_chains, exact_probs)
        tv_profile.append(tv)
        tv_table.append(budget, cfg.n_chains, tv)
    _write_table(out_dir, "mh_tv.csv", tv_table, report)
    report.checks.append(
        CheckResult(
            "tv_final_budget",
            tv_profile[-1] <= TV_THRESHOLD,
            f"TV at n_mcmc={cfg.n_mcmc_grid[-1]} is {tv_profile[-1]:.4f}, "
            f"threshold {TV_THRESHOLD}",
        )
    )
    report.checks.append(
        CheckResult(
            "tv_profile_monotone",
            _inversions(tv_profile) <= 1,
            "TV per budget: " + ", ".join(f"{v:.4f}" for v in tv_profile),
        )
    )

    greedy_cfg = MHConfig(
        alpha=cfg.alpha,
        block_size=cfg.block_size,
        n_mcmc=cfg.power_inf_n_mcmc,
        proposal_temp=cfg.proposal_temp,
    )
    trace_table = ResultTable(
        ("chain", "block", "iteration", "proposal_logprob", "accepted", "current_logprob")
    )
    violations = 0
    greedy_seeds = np.random.SeedSequence(cfg.seed, spawn_key=(1,)).spawn(
        cfg.n_power_inf_chains
    )
    for chain_idx, chain_seed in enumerate(greedy_seeds):
        rng = np.random.Generator(np.random.Philox(chain_seed))
        sample = power_inf_sample(model, greedy_cfg, pid, rng, record_trace=True)
        assert sample.trace is not None
        last_by_block: dict[int, float] = {}
        for row in sample.trace:
            prev = last_by_block.get(row.block)
            if prev is not None and row.current_logprob < prev:
                violations += 1
            last_by_block[row.block] = row.current_logprob
            trace_table.append(
                chain_idx,
                row.block,
                row.iteration,
                row.proposal_logprob_alpha,
                row.accepted,
                row.current_logprob,
            )
    _write_table(out_dir, "power_inf_trace.csv", trace_table, report)
    report.checks.append(
        CheckResult(
            "power_inf_monotone",
            violations == 0,
            f"{violations} within-block decreases across "
            f"{cfg.n_power_inf_chains} greedy chains",
        )
    )

    alpha1_cfg = MHConfig(
        alpha=1.0,
        block_size=cfg.block_size,
        n_mcmc=cfg.power_inf_n_mcmc,
        proposal_temp=1.0,
    )
    alpha1_tables = SamplerTables(model, pid, 1.0)
    accepted = 0
    proposed = 0
    for chain_seed in np.random.SeedSequence(cfg.seed, spawn_key=(2,)).spawn(
        cfg.n_alpha1_chains
    ):
        rng = np.random.Generator(np.random.Philox(chain_seed))
        sample = mh_power_sample(model, alpha1_cfg, pid, rng, tables=alpha1_tables)
        accepted += sample.n_accepted
        proposed += sample.n_proposals
    rate = accepted / proposed if proposed else 0.0
    report.checks.append(
        CheckResult(
            "alpha1_acceptance_rate",
            rate == 1.0,
            f"acceptance rate at alpha=1, temp=1 is {rate}",
        )
    )
    report.stats["n_chains"] = cfg.n_chains
    _write_checks(out_dir, report)
    return report


# ---------------------------------------------------------------- model-info


@dataclass(frozen=True)
class ModelInfoConfig:
    model_spec: dict
    alphas: tuple[float, ...]
    save_model_file: bool

    @classmethod
    def from_dict(cls, d: dict) -> "ModelInfoConfig":
        _reject_unknown(
            d, {"experiment", "model", "alphas", "save_model", "seed", "out_dir"}, "config"
        )
        alphas = _alpha_list(d.get("alphas", [2.0]), "alphas")
        save = d.get("save_model", False)
        if not isinstance(save, bool):
            raise ConfigError("save_model: expected a boolean")
        return cls(_require(d, "model", "config"), alphas, save)


def run_model_info(cfg: ModelInfoConfig, out_dir: Path) -> CommandReport:
    report = CommandReport("model-info", out_dir)
    model = build_model_from_spec(cfg.model_spec)
    log_z = {}
    for alpha in cfg.alphas:
        cache = build_power_cache(model, alpha)
        log_z[f"{alpha:.17g}"] = {
            str(pid): cache.log_z[pid] for pid in model.prompt_ids
        }
    info = {
        "horizon": model.horizon,
        "log_z_by_alpha": log_z,
        "n_prefix_nodes": model.n_prefix_nodes(),
        "n_sequences": model.n_sequences(),
        "prompt_ids": list(model.prompt_ids),
        "vocab_sizes": list(model.vocab_sizes),
    }
    path = out_dir / "model_info.jsonl"
    path.write_bytes(
        (json.dumps(info, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")
    )
    report.files.append(path.name)
    if cfg.save_model_file:
        save_model(model, out_dir / "model.json")
        report.files.append("model.json")
    report.stats["n_sequences"] = model.n_sequences()
    _write_checks(out_dir, report)
    return report


# ------------------------------------------------------------------ dispatch

EXPERIMENTS: dict[str, tuple[Callable[[dict], Any], Callable[[Any, Path], CommandReport]]] = {
    "synth-odds": (SynthOddsConfig.from_dict, run_synth_odds),
    "synth-sis": (SynthSisConfig.from_dict, run_synth_sis),
    "distill": (DistillConfig.from_dict, run_distill),
    "cov-sweep": (CovSweepConfig.from_dict, run_cov_sweep),
    "mh-validate": (MHValidateConfig.from_dict, run_mh_validate),
    "model-info": (ModelInfoConfig.from_dict, run_model_info),
}


def parse_config(doc: dict, expected_experiment: str | None = None):
    """Validate the top-level experiment discriminator and parse."""
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    experiment = _require(doc, "experiment", "config")
    if experiment not in EXPERIMENTS:
        raise ConfigError(
            f"experiment: unknown experiment {experiment!r}; "
            f"expected one of {sorted(EXPERIMENTS)}"
        )
    if expected_experiment is not None and experiment != expected_experiment:
        raise ConfigError(
            f"experiment: config declares {experiment!r} but the "
            f"{expected_experiment!r} command was invoked"
        )
    parser, _ = EXPERIMENTS[experiment]
    return experiment, parser(doc)


def run_experiment(
    doc: dict,
    out_dir: str | Path,
    expected_experiment: str | None = None,
    seed_override: int | None = None,
) -> CommandReport:
    """Parse, run, and persist one experiment; returns its report."""
    if seed_override is not None:
        if seed_override < 0:
            raise ConfigError(f"seed: must be nonnegative, got {seed_override}")
        doc = dict(doc)
        doc["seed"] = seed_override
    experiment, cfg = parse_config(doc, expected_experiment)
    _, runner = EXPERIMENTS[experiment]
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    return runner(cfg, out_path)
