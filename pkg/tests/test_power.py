import math

import numpy as np
import pytest
from scipy.special import logsumexp

from powerlab import (
    ResourceLimitError,
    Sequence,
    SequenceDist,
    all_sequence_logprobs,
    build_power_cache,
    exact_power_dist,
    make_rng,
    odds_correction,
    odds_correction_table,
    power_argmax_set,
    power_mass_on_argmax,
    power_next_token,
    random_tabular_model,
    rank_reversal_scan,
    renyi_entropy,
    seq_logprob,
    suffix_logprobs,
    suffix_renyi_entropy,
    temp_next_token,
    tv_distance,
)


def test_log_z_uniform_two_step(uniform_two):
    # four sequences of probability 1/4 each: Z_2 = 4 (1/4)^2 = 1/4
    cache = build_power_cache(uniform_two, 2.0)
    assert cache.log_z[0] == pytest.approx(math.log(0.25), abs=1e-14)


def test_log_z_single_step(coin_model):
    cache = build_power_cache(coin_model, 2.0)
    assert cache.log_z[0] == pytest.approx(math.log(0.68), abs=1e-14)


def test_log_z_handmade(handmade_two):
    # sequence probs 0.375, 0.375, 0.225, 0.025 -> Z_2 = 0.3325
    cache = build_power_cache(handmade_two, 2.0)
    assert cache.log_z[0] == pytest.approx(math.log(0.3325), abs=1e-14)


def test_log_z_alpha_one_is_zero(tiny_random):
    cache = build_power_cache(tiny_random, 1.0)
    assert abs(cache.log_z[0]) <= 1e-12


def test_normalizer_matches_enumeration(tiny_random):
    # backward recursion against direct sequence enumeration
    for alpha in (0.5, 1.7, 3.0):
        cache = build_power_cache(tiny_random, alpha)
        logp = all_sequence_logprobs(tiny_random, 0)
        brute = float(logsumexp(alpha * logp))
        assert cache.log_z[0] == pytest.approx(brute, abs=1e-12)


def test_power_root_row_handmade(handmade_two):
    cache = build_power_cache(handmade_two, 2.0)
    row = power_next_token(cache, handmade_two, 0, ())
    np.testing.assert_allclose(row.probs, [225 / 266, 41 / 266], rtol=0, atol=1e-14)


def test_power_equals_temp_on_last_step(handmade_two):
    # no suffix left to integrate, so the two conditionals coincide bitwise
    cache = build_power_cache(handmade_two, 2.0)
    pow_row = power_next_token(cache, handmade_two, 0, (1,))
    temp_row = temp_next_token(handmade_two, 2.0, 0, (1,))
    assert np.array_equal(pow_row.probs, temp_row.probs)
    assert np.array_equal(pow_row.log_probs, temp_row.log_probs)
    np.testing.assert_allclose(pow_row.probs, [81 / 82, 1 / 82], rtol=0, atol=1e-14)


def test_temp_row_known_values(coin_model):
    row = temp_next_token(coin_model, 2.0, 0, ())
    np.testing.assert_allclose(row.probs, [16 / 17, 1 / 17], rtol=0, atol=1e-15)


def test_temp_alpha_one_returns_base_row(tiny_random):
    assert temp_next_token(tiny_random, 1.0, 0, ()) is tiny_random.row(0, ())


def test_power_alpha_one_equals_base(tiny_random):
    cache = build_power_cache(tiny_random, 1.0)
    row = power_next_token(cache, tiny_random, 0, (1,))
    np.testing.assert_allclose(row.probs, tiny_random.row(0, (1,)).probs, atol=1e-12)


def test_conditional_consistency_with_exact_dist(tiny_random):
    # next-token conditionals must be the marginals of the sequence dist
    alpha = 2.5
    cache = build_power_cache(tiny_random, alpha)
    dist = exact_power_dist(tiny_random, alpha)
    grid = dist.probs(0).reshape(3, 2, 3)

    root = power_next_token(cache, tiny_random, 0, ())
    np.testing.assert_allclose(grid.sum(axis=(1, 2)), root.probs, atol=1e-10)

    mid = power_next_token(cache, tiny_random, 0, (1,))
    joint = grid[1].sum(axis=1)
    np.testing.assert_allclose(joint / joint.sum(), mid.probs, atol=1e-10)


def test_chain_rule_recovers_sequence_probability(tiny_random):
    alpha = 3.0
    cache = build_power_cache(tiny_random, alpha)
    dist = exact_power_dist(tiny_random, alpha)
    for tokens in [(0, 0, 0), (2, 1, 2), (1, 0, 1)]:
        total = 0.0
        prefix = ()
        for tok in tokens:
            row = power_next_token(cache, tiny_random, 0, prefix)
            total += float(row.log_probs[tok])
            prefix = prefix + (tok,)
        assert total == pytest.approx(dist.logprob(0, tokens), abs=1e-10)


def test_renyi_entropy_known_values(coin_model):
    row = coin_model.row(0, ())
    assert renyi_entropy(row, 2.0) == pytest.approx(0.3856624808119846, abs=1e-14)
    assert renyi_entropy(row, 3.0) == pytest.approx(0.32696323370333186, abs=1e-14)
    uniform = np.full(4, 0.25)
    assert renyi_entropy(uniform, 2.0) == pytest.approx(math.log(4), abs=1e-14)
    assert renyi_entropy(uniform, 0.5) == pytest.approx(math.log(4), abs=1e-14)


def test_renyi_entropy_rejects_bad_alpha(coin_model):
    row = coin_model.row(0, ())
    with pytest.raises(ValueError):
        renyi_entropy(row, 1.0)
    with pytest.raises(ValueError):
        renyi_entropy(row, 0.0)


def test_suffix_renyi_entropy(two_step_small):
    # suffix after token 0 is [2/3, 1/3]: H_2 = -log(5/9)
    h = suffix_renyi_entropy(two_step_small, 0, (0,), 2.0)
    assert h == pytest.approx(math.log(9 / 5), abs=1e-14)


def test_odds_identity_small(two_step_small):
    for alpha in (1.5, 2.0, 4.0):
        cache = build_power_cache(two_step_small, alpha)
        for a in range(3):
            for b in range(a + 1, 3):
                closed, predicted = odds_correction(
                    two_step_small, cache, 0, (), a, b
                )
                assert closed == pytest.approx(predicted, abs=1e-12)


def test_odds_identity_against_marginal_oracle(two_step_small):
    # third route: power odds from first-token marginals of the exact dist
    alpha = 2.0
    cache = build_power_cache(two_step_small, alpha)
    dist = exact_power_dist(two_step_small, alpha)
    grid = dist.probs(0).reshape(3, 2)
    marg = grid.sum(axis=1)
    temp = temp_next_token(two_step_small, alpha, 0, ())
    for a in range(3):
        for b in range(a + 1, 3):
            closed, _ = odds_correction(two_step_small, cache, 0, (), a, b)
            pow_odds = math.log(marg[a]) - math.log(marg[b])
            temp_odds = float(temp.log_probs[a] - temp.log_probs[b])
            assert pow_odds - temp_odds == pytest.approx(closed, abs=1e-10)


def test_odds_correction_table_matches_pairwise(two_step_small):
    cache = build_power_cache(two_step_small, 3.0)
    table = odds_correction_table(two_step_small, cache, 0)
    assert len(table) == 3
    for a, b, closed, predicted in table:
        c2, p2 = odds_correction(two_step_small, cache, 0, (), a, b)
        assert closed == pytest.approx(c2, abs=1e-12)
        assert predicted == pytest.approx(p2, abs=1e-12)


def test_rank_reversal_scan_orientation(appendix_model):
    cache = build_power_cache(appendix_model, 4.0)
    scan = rank_reversal_scan(appendix_model, cache, 0)
    assert len(scan) == 64 * 63 // 2
    n_reversals = 0
    for row in scan:
        assert row.temp_log_odds >= 0.0
        flagged = (row.temp_log_odds > 0.0 and row.pow_log_odds < 0.0) or (
            row.temp_log_odds == 0.0 and row.pow_log_odds != 0.0
        )
        assert row.is_reversal == flagged
        assert row.correction == pytest.approx(
            row.pow_log_odds - row.temp_log_odds, abs=1e-12
        )
        n_reversals += int(row.is_reversal)
    # the heavy-tailed suffixes behind rare tokens flip hundreds of pairs
    assert n_reversals >= 1


def test_no_reversals_when_suffixes_identical(uniform_two):
    cache = build_power_cache(uniform_two, 4.0)
    scan = rank_reversal_scan(uniform_two, cache, 0)
    assert all(not row.is_reversal for row in scan)


def test_argmax_set_with_exact_tie(handmade_two):
    argmax = power_argmax_set(handmade_two, 0)
    assert {seq.tokens for seq in argmax} == {(0, 0), (0, 1)}
    # both maximizers carry 0.375^8; the rest is 0.225^8 + 0.025^8
    top, other = 0.375**8, 0.225**8 + 0.025**8
    expected = 2 * top / (2 * top + other)
    assert power_mass_on_argmax(handmade_two, 8.0, 0) == pytest.approx(
        expected, abs=1e-12
    )


def test_argmax_set_unique(tiny_random):
    argmax = power_argmax_set(tiny_random, 0)
    assert len(argmax) == 1
    logp = all_sequence_logprobs(tiny_random, 0)
    dist = exact_power_dist(tiny_random, 1.0)
    assert dist.index_of(argmax[0].tokens) == int(np.argmax(logp))


def test_power_mass_on_argmax_single_step(coin_model):
    assert power_mass_on_argmax(coin_model, 8.0, 0) == pytest.approx(
        0.9999847414437645, abs=1e-14
    )


def test_power_mass_on_argmax_monotone(tiny_random):
    masses = [power_mass_on_argmax(tiny_random, a, 0) for a in (1, 2, 4, 8, 16)]
    for lo, hi in zip(masses, masses[1:]):
        assert hi >= lo - 1e-12


def test_suffix_logprobs_independent_route(tiny_random):
    logp = suffix_logprobs(tiny_random, 0, (1,))
    assert logp.shape == (6,)
    expected = [
        seq_logprob(tiny_random, Sequence(0, (1, a, b)))
        - seq_logprob_prefix(tiny_random, (1,))
        for a in range(2)
        for b in range(3)
    ]
    np.testing.assert_allclose(logp, expected, atol=1e-12)


def seq_logprob_prefix(model, prefix):
    total = 0.0
    built = ()
    for tok in prefix:
        total += float(model.row(0, built).log_probs[tok])
        built = built + (tok,)
    return total


def test_resource_caps(tiny_random):
    with pytest.raises(ResourceLimitError):
        build_power_cache(tiny_random, 2.0, node_cap=3)
    with pytest.raises(ResourceLimitError):
        suffix_logprobs(tiny_random, 0, (), seq_cap=5)
    with pytest.raises(ResourceLimitError):
        exact_power_dist(tiny_random, 2.0, seq_cap=5)


def test_cache_log_mass_full_length_is_zero(tiny_random):
    cache = build_power_cache(tiny_random, 2.0)
    assert cache.log_mass(0, (0, 1, 2)) == 0.0


def test_sequence_dist_round_trip(tiny_random):
    dist = exact_power_dist(tiny_random, 2.0)
    for idx in (0, 7, 17):
        tokens = dist.tokens_of(idx)
        assert dist.index_of(tokens) == idx
    assert dist.prob(0, (0, 0, 0)) == pytest.approx(
        math.exp(dist.logprob(0, (0, 0, 0)))
    )
    assert dist.probs(0).sum() == pytest.approx(1.0, abs=1e-12)


def test_sequence_dist_validates_normalization():
    bad = {0: np.log(np.array([0.5, 0.2]))}
    with pytest.raises(ValueError):
        SequenceDist((2,), (0,), bad)


def test_sequence_dist_sampling(tiny_random):
    dist = exact_power_dist(tiny_random, 4.0)
    rng = make_rng(31)
    batch = dist.sample_batch(0, 20_000, rng)
    counts = np.zeros(18)
    for seq in batch:
        counts[dist.index_of(seq.tokens)] += 1
    assert tv_distance(counts / 20_000, dist.probs(0)) < 0.03


def test_tv_distance_known():
    assert tv_distance(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(0.5)
    assert tv_distance(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0
    with pytest.raises(ValueError):
        tv_distance(np.array([1.0]), np.array([0.5, 0.5]))


def test_power_cache_multi_prompt():
    model = random_tabular_model((2, 3), make_rng(13), prompt_ids=(0, 1))
    cache = build_power_cache(model, 2.0)
    for pid in (0, 1):
        brute = float(logsumexp(2.0 * all_sequence_logprobs(model, pid)))
        assert cache.log_z[pid] == pytest.approx(brute, abs=1e-12)
    assert cache.log_z[0] != cache.log_z[1]
