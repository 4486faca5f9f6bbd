import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import chisquare

from powerlab import (
    DistillDataset,
    ExactPowerSampler,
    MHConfig,
    ProbRow,
    PromptDist,
    Sequence,
    SequenceDist,
    all_sequence_logprobs,
    best_of_n_self_reward,
    build_power_cache,
    collect_distill_dataset,
    exact_power_dist,
    fit_tabular_mle,
    hellinger_sq,
    kl_divergence,
    kl_rl_objective,
    make_rng,
    model_from_rows,
    random_policy,
    random_tabular_model,
    rl_kl_decomposition_check,
    sample_sequence,
    self_reward_fn,
    seq_logprob,
    seq_logprob_per_token,
    sharpening_prob,
    teacher_sample,
    tilted_policy,
    tv_distance,
)


def _point_mass_dist(model, tokens):
    dist = exact_power_dist(model, 1.0)
    lp = np.full_like(dist.log_probs[0], -np.inf)
    lp[dist.index_of(tokens)] = 0.0
    return SequenceDist(model.vocab_sizes, model.prompt_ids, {0: lp})


def test_kl_known_value(uniform_two):
    uniform = exact_power_dist(uniform_two, 1.0)
    half = _point_mass_dist(uniform_two, (0, 0))
    kl = kl_divergence(half, uniform, 0)
    assert not kl.support_violation
    assert kl.value == pytest.approx(math.log(4), abs=1e-14)
    same = kl_divergence(uniform, uniform, 0)
    assert same.value == pytest.approx(0.0, abs=1e-14)


def test_kl_support_violation_flag():
    rows = {
        (0, ()): ProbRow.from_probs(np.array([1.0, 0.0])),
        (0, (0,)): ProbRow.from_probs(np.array([0.5, 0.5])),
        (0, (1,)): ProbRow.from_probs(np.array([0.5, 0.5])),
    }
    model = model_from_rows((2, 2), (0,), rows)
    base = exact_power_dist(model, 1.0)
    off = _point_mass_dist(model, (1, 0))
    kl = kl_divergence(off, base, 0)
    assert kl.support_violation
    assert kl.value == math.inf


def test_kl_power_identity(tiny_random):
    # KL(pow || base) = (alpha - 1) E_pow[log pi] - log Z, by expansion
    alpha = 3.0
    base = exact_power_dist(tiny_random, 1.0)
    powered = exact_power_dist(tiny_random, alpha)
    logp = all_sequence_logprobs(tiny_random, 0)
    w = np.exp(alpha * logp - logsumexp(alpha * logp))
    expected = (alpha - 1.0) * float(np.dot(w, logp)) - float(
        logsumexp(alpha * logp)
    )
    assert kl_divergence(powered, base, 0).value == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("beta,alpha", [(1 / 3, 4.0), (0.5, 3.0), (1.0, 2.0)])
def test_tilted_self_reward_is_power_dist(tiny_random, beta, alpha):
    tilted = tilted_policy(tiny_random, self_reward_fn(tiny_random), beta)
    powered = exact_power_dist(tiny_random, alpha)
    np.testing.assert_allclose(
        tilted.log_probs[0], powered.log_probs[0], rtol=0, atol=1e-12
    )


def test_tilted_policy_validation(tiny_random):
    with pytest.raises(ValueError):
        tilted_policy(tiny_random, self_reward_fn(tiny_random), 0.0)

    def bad_reward(pid, seq):
        return math.inf

    with pytest.raises(ValueError, match="finite"):
        tilted_policy(tiny_random, bad_reward, 1.0)


def test_objective_at_optimum_is_beta_log_z(tiny_random):
    beta = 0.5
    alpha = 1.0 + 1.0 / beta
    mu = PromptDist.uniform((0,))
    powered = exact_power_dist(tiny_random, alpha)
    value = kl_rl_objective(powered, tiny_random, self_reward_fn(tiny_random), beta, mu)
    assert not value.support_violation
    cache = build_power_cache(tiny_random, alpha)
    assert value.value == pytest.approx(beta * cache.log_z[0], abs=1e-10)


def test_optimum_dominates_random_policies(tiny_random):
    beta = 0.5
    alpha = 3.0
    mu = PromptDist.uniform((0,))
    reward = self_reward_fn(tiny_random)
    powered = exact_power_dist(tiny_random, alpha)
    best = kl_rl_objective(powered, tiny_random, reward, beta, mu).value
    rng = make_rng(83)
    for _ in range(20):
        q = exact_power_dist(random_policy(tiny_random, rng), 1.0)
        value = kl_rl_objective(q, tiny_random, reward, beta, mu).value
        assert value <= best + 1e-12


def test_objective_support_violation_flag():
    rows = {
        (0, ()): ProbRow.from_probs(np.array([1.0, 0.0])),
        (0, (0,)): ProbRow.from_probs(np.array([0.5, 0.5])),
        (0, (1,)): ProbRow.from_probs(np.array([0.5, 0.5])),
    }
    model = model_from_rows((2, 2), (0,), rows)
    q = _point_mass_dist(model, (1, 1))
    value = kl_rl_objective(q, model, self_reward_fn(model), 1.0, PromptDist.uniform((0,)))
    assert value.support_violation
    assert value.value == -math.inf


@pytest.mark.parametrize("beta", [1 / 3, 1.0, 3.0])
def test_decomposition_residual_is_zero(tiny_random, beta):
    rng = make_rng(89)
    for _ in range(5):
        q = exact_power_dist(random_policy(tiny_random, rng), 1.0)
        residual = rl_kl_decomposition_check(q, tiny_random, beta, 0)
        assert abs(residual) <= 1e-9


def test_decomposition_rejects_off_support_q():
    rows = {
        (0, ()): ProbRow.from_probs(np.array([1.0, 0.0])),
        (0, (0,)): ProbRow.from_probs(np.array([0.5, 0.5])),
        (0, (1,)): ProbRow.from_probs(np.array([0.5, 0.5])),
    }
    model = model_from_rows((2, 2), (0,), rows)
    with pytest.raises(ValueError, match="support"):
        rl_kl_decomposition_check(_point_mass_dist(model, (1, 0)), model, 1.0, 0)


def test_self_reward_fn_matches_seq_logprob(tiny_random):
    reward = self_reward_fn(tiny_random)
    seq = Sequence(0, (1, 1, 2))
    assert reward(0, seq) == seq_logprob(tiny_random, seq)


def test_exact_teacher_matches_power_dist(tiny_random):
    alpha = 2.0
    sampler = ExactPowerSampler(tiny_random, alpha)
    dist = exact_power_dist(tiny_random, alpha)
    rng = make_rng(97)
    n = 100_000
    counts = np.zeros(18)
    for _ in range(n):
        seq = sampler.sample(0, rng)
        counts[dist.index_of(seq.tokens)] += 1
    result = chisquare(counts, n * dist.probs(0))
    assert result.pvalue > 1e-3


def test_teacher_sample_modes(tiny_random):
    seq = teacher_sample(tiny_random, 2.0, "exact", 0, make_rng(5))
    tiny_random.validate_sequence(seq)
    seq = teacher_sample(
        tiny_random, 2.0, "mh", 0, make_rng(5), mh_config=MHConfig(alpha=2.0, n_mcmc=5)
    )
    tiny_random.validate_sequence(seq)
    with pytest.raises(ValueError):
        teacher_sample(tiny_random, 2.0, "nope", 0, make_rng(5))
    with pytest.raises(ValueError, match="alpha"):
        teacher_sample(
            tiny_random, 2.0, "mh", 0, make_rng(5), mh_config=MHConfig(alpha=3.0)
        )
    with pytest.raises(ValueError):
        teacher_sample(
            tiny_random,
            2.0,
            "exact",
            0,
            make_rng(5),
            sampler=ExactPowerSampler(tiny_random, 4.0),
        )


def test_collect_dataset_and_metadata(tiny_random):
    mu = PromptDist.uniform((0,))
    ds = collect_distill_dataset(tiny_random, 4.0, mu, 25, "exact", make_rng(3), seed=77)
    assert len(ds) == 25
    assert ds.teacher_alpha == 4.0
    assert ds.mode == "exact-enumeration"
    assert ds.seed == 77
    for pid, tokens in ds.records:
        tiny_random.validate_sequence(Sequence(pid, tokens))


def test_dataset_save_is_byte_stable(tmp_path, tiny_random):
    mu = PromptDist.uniform((0,))
    ds = collect_distill_dataset(tiny_random, 4.0, mu, 10, "exact", make_rng(3), seed=1)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    ds.save(p1)
    ds.save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    loaded = DistillDataset.load(p1, tiny_random)
    assert loaded.records == ds.records
    assert loaded.teacher_alpha == ds.teacher_alpha
    assert loaded.mode == ds.mode
    assert loaded.seed == ds.seed


def test_dataset_load_validates_lines(tmp_path, tiny_random):
    mu = PromptDist.uniform((0,))
    ds = collect_distill_dataset(tiny_random, 4.0, mu, 5, "exact", make_rng(3))
    path = tmp_path / "ds.jsonl"
    ds.save(path)
    lines = path.read_text().splitlines()
    broken = lines[:2] + ['{"prompt_id":0,"tokens":[0,9,0],"teacher_alpha":4.0,"mode":"exact-enumeration","seed":null}']
    path.write_text("\n".join(broken) + "\n")
    with pytest.raises(ValueError, match="line 3"):
        DistillDataset.load(path, tiny_random)
    mixed = lines[:2] + [lines[2].replace('"teacher_alpha":4.0', '"teacher_alpha":2.0')]
    path.write_text("\n".join(mixed) + "\n")
    with pytest.raises(ValueError, match="inconsistent"):
        DistillDataset.load(path, tiny_random)


def test_mle_student_count_ratios(uniform_two):
    records = [(0, (0, 0)), (0, (0, 1)), (0, (0, 0)), (0, (1, 0))]
    ds = DistillDataset(records, 4.0, "exact-enumeration")
    student = fit_tabular_mle(ds, uniform_two)
    np.testing.assert_allclose(student.row(0, ()).probs, [0.75, 0.25], atol=1e-15)
    np.testing.assert_allclose(student.row(0, (0,)).probs, [2 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_allclose(student.row(0, (1,)).probs, [1.0, 0.0], atol=1e-15)


def test_mle_student_smoothing_and_fallback(uniform_two):
    records = [(0, (0, 0)), (0, (0, 1)), (0, (0, 0))]
    ds = DistillDataset(records, 4.0, "exact-enumeration")
    student = fit_tabular_mle(ds, uniform_two, epsilon=1.0)
    np.testing.assert_allclose(student.row(0, ()).probs, [0.8, 0.2], atol=1e-15)
    # prefix (1,) was never visited: the row object is the base row itself
    assert student.row(0, (1,)) is uniform_two.row(0, (1,))
    as_model = student.as_model()
    assert as_model.vocab_sizes == uniform_two.vocab_sizes


def test_mle_maximizes_dataset_likelihood(uniform_two):
    records = [(0, (0, 0)), (0, (0, 1)), (0, (0, 0)), (0, (1, 0))]
    ds = DistillDataset(records, 4.0, "exact-enumeration")
    student = fit_tabular_mle(ds, uniform_two).as_model()

    def dataset_ll(model):
        return sum(seq_logprob(model, Sequence(pid, toks)) for pid, toks in records)

    best = dataset_ll(student)
    rng = make_rng(7)
    for _ in range(25):
        other = random_policy(uniform_two, rng)
        assert dataset_ll(other) <= best + 1e-12


def test_fit_validates_input(uniform_two):
    ds = DistillDataset([], 4.0, "exact-enumeration")
    with pytest.raises(ValueError, match="empty"):
        fit_tabular_mle(ds, uniform_two)
    ds = DistillDataset([(0, (0, 5))], 4.0, "exact-enumeration")
    with pytest.raises(ValueError):
        fit_tabular_mle(ds, uniform_two)
    with pytest.raises(ValueError):
        fit_tabular_mle(
            DistillDataset([(0, (0, 0))], 4.0, "exact-enumeration"),
            uniform_two,
            epsilon=-1.0,
        )


def test_sharpening_prob_extremes(tiny_random):
    mu = PromptDist.uniform((0,))
    argmax_tokens = exact_power_dist(tiny_random, 64.0)
    best = argmax_tokens.tokens_of(int(np.argmax(argmax_tokens.log_probs[0])))
    point = _point_mass_dist(tiny_random, best)
    assert sharpening_prob(point, tiny_random, mu, 0.1) == 0.0
    lp = np.full(18, -math.log(18))
    uniform = SequenceDist((3, 2, 3), (0,), {0: lp})
    assert sharpening_prob(uniform, tiny_random, mu, 0.1) == 1.0
    with pytest.raises(ValueError):
        sharpening_prob(point, tiny_random, mu, 0.0)
    with pytest.raises(ValueError):
        sharpening_prob(point, tiny_random, mu, 1.0)


def test_sharpening_monotone_in_alpha(tiny_random):
    mu = PromptDist.uniform((0,))
    values = [
        sharpening_prob(exact_power_dist(tiny_random, a), tiny_random, mu, 0.1)
        for a in (1.0, 2.0, 4.0, 8.0, 16.0)
    ]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_sharpening_accepts_models(tiny_random):
    mu = PromptDist.uniform((0,))
    via_model = sharpening_prob(tiny_random, tiny_random, mu, 0.1)
    via_dist = sharpening_prob(exact_power_dist(tiny_random, 1.0), tiny_random, mu, 0.1)
    assert via_model == via_dist


def test_hellinger_known_values():
    assert hellinger_sq(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(
        2.0 - math.sqrt(2.0), abs=1e-14
    )
    assert hellinger_sq(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0
    with pytest.raises(ValueError):
        hellinger_sq(np.array([1.0]), np.array([0.5, 0.5]))


def test_best_of_n_keeps_scorer_argmax(tiny_random):
    scorer = tiny_random
    winner = best_of_n_self_reward(tiny_random, scorer, 0, 50, make_rng(71))
    rng = make_rng(71)
    draws = [sample_sequence(tiny_random, 0, rng) for _ in range(50)]
    scores = [seq_logprob_per_token(scorer, s) for s in draws]
    assert winner == draws[int(np.argmax(scores))]


def test_best_of_n_ties_go_to_first_draw(uniform_two):
    # a uniform scorer scores every sequence identically
    winner = best_of_n_self_reward(uniform_two, uniform_two, 0, 10, make_rng(73))
    first = sample_sequence(uniform_two, 0, make_rng(73))
    assert winner == first


def test_best_of_n_improves_mean_score(tiny_random):
    reward = self_reward_fn(tiny_random)
    single = np.mean(
        [reward(0, sample_sequence(tiny_random, 0, rng)) for rng in _rngs(101, 300)]
    )
    best16 = np.mean(
        [
            reward(0, best_of_n_self_reward(tiny_random, tiny_random, 0, 16, rng))
            for rng in _rngs(103, 60)
        ]
    )
    assert best16 > single


def _rngs(seed, n):
    from powerlab import spawn_rngs

    return spawn_rngs(seed, n)


def test_distill_end_to_end_tv_shrinks(tiny_random):
    mu = PromptDist.uniform((0,))
    power = exact_power_dist(tiny_random, 4.0)
    tvs = []
    for n in (200, 2000, 20000):
        ds = collect_distill_dataset(tiny_random, 4.0, mu, n, "exact", make_rng(5), seed=5)
        student = fit_tabular_mle(ds, tiny_random)
        sd = exact_power_dist(student.as_model(), 1.0)
        tvs.append(tv_distance(sd.probs(0), power.probs(0)))
    assert tvs[2] < tvs[0]
    assert tvs[2] < 0.05
