import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nasalbio.descriptors import DescriptorSet, extract_features
from nasalbio.gabor import GaborNormalStack
from nasalbio.matching import kfa_fit, kfa_project, mahalanobis_cosine, rank_metrics
from nasalbio.selection import (FitnessContext, GAConfig, NSGA2Selector, crowding_distance,
                                descriptor_columns, expand_mask, masked_r1, nondominated_ranks,
                                nsga2_select)
from nasalbio.synthetic import signal_noise_features

from oracles import brute_pareto_fronts, descriptor_positions

layouts = st.tuples(st.integers(1, 4), st.integers(2, 9), st.integers(2, 6))   # s_n, K, h_l


@pytest.fixture(scope="module")
def sn_data():
    return signal_noise_features(K=12, n_informative=6, n_subjects=15, signal=0.7, seed=3)


# ---------------------------------------------------------------- expansion

@given(layouts)
def test_all_ones_and_all_zeros(layout):
    s_n, K, h_l = layout
    ones = expand_mask(np.ones(K, bool), s_n, h_l, K)
    assert ones.all() and len(ones) == s_n * 3 * K * h_l
    assert not expand_mask(np.zeros(K, bool), s_n, h_l, K).any()


@given(layouts, st.data())
def test_one_hot_matches_walked_positions(layout, data):
    s_n, K, h_l = layout
    i = data.draw(st.integers(0, K - 1))
    Bn = np.zeros(K, bool)
    Bn[i] = True
    got = np.flatnonzero(expand_mask(Bn, s_n, h_l, K))
    ref = descriptor_positions(i, s_n, K, h_l)
    assert np.array_equal(got, ref) and len(got) == s_n * 3 * h_l
    assert np.array_equal(descriptor_columns(i, s_n, h_l, K), ref)


@given(layouts, st.data())
def test_expansion_is_monotone(layout, data):
    s_n, K, h_l = layout
    a = np.array(data.draw(st.lists(st.booleans(), min_size=K, max_size=K)))
    b = a | np.array(data.draw(st.lists(st.booleans(), min_size=K, max_size=K)))
    assert np.all(expand_mask(a, s_n, h_l, K) <= expand_mask(b, s_n, h_l, K))


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        expand_mask(np.ones(4, bool), 2, 3, 5)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_masking_commutes_with_assembly(seed):
    rng = np.random.default_rng(seed)
    s_n, K, h_l = int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(2, 9))
    ny, nx = 9, 11
    v = rng.uniform(-1, 1, size=(s_n, 3, ny, nx))
    stack = GaborNormalStack(np.zeros((s_n, ny, nx)), v, np.ones((ny, nx), bool),
                             np.ones((s_n, ny, nx), bool))
    regions = tuple(rng.choice(ny * nx, size=20, replace=False) for _ in range(K))
    Bn = rng.random(K) < 0.5
    full = extract_features(stack, DescriptorSet("p", regions, (ny, nx)), h_l)
    subset = tuple(r for r, keep in zip(regions, Bn) if keep)
    if not subset:
        return
    part = extract_features(stack, DescriptorSet("p", subset, (ny, nx)), h_l)
    assert np.array_equal(full.values[expand_mask(Bn, s_n, h_l, K)], part.values)


# ---------------------------------------------------------------- fitness

def test_all_ones_mask_equals_unmasked_r1(sn_data):
    d = sn_data
    m = kfa_fit(d.gallery, d.gallery_labels)
    s = mahalanobis_cosine(m.projected, kfa_project(m, d.probes), m.Sigma,
                           d.gallery_labels, d.probe_labels)
    plain = rank_metrics(s).r1
    ones = np.ones(12, bool)
    ctx = FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
    assert ctx.r1(ones) == plain
    assert masked_r1(ones, d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout) == plain


def test_cached_and_direct_fitness_agree(sn_data, rng):
    d = sn_data
    ctx = FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
    for _ in range(10):
        Bn = rng.random(12) < 0.5
        direct = masked_r1(Bn, d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
        assert ctx.r1(Bn) == pytest.approx(direct, abs=1.5 / len(d.probes))


def test_signal_mask_beats_noise_mask(sn_data):
    d = sn_data
    ctx = FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
    assert ctx.r1(d.informative) > ctx.r1(~d.informative)


def test_empty_mask_scores_zero(sn_data):
    d = sn_data
    ctx = FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
    assert ctx.r1(np.zeros(12, bool)) == 0.0
    assert masked_r1(np.zeros(12, bool), d.gallery, d.probes, d.gallery_labels,
                     d.probe_labels, d.layout) == 0.0


def test_fitness_is_deterministic(sn_data, rng):
    d = sn_data
    a = FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
    b = FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
    for _ in range(5):
        Bn = rng.random(12) < 0.5
        assert a.r1(Bn) == a.r1(Bn) == b.r1(Bn)


def test_layout_mismatch_rejected(sn_data):
    d = sn_data
    with pytest.raises(ValueError):
        FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, (1, 13, 4))


# ---------------------------------------------------------------- NSGA-II parts

@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=40))
@settings(max_examples=200)
def test_nondominated_ranks_match_brute_force(points):
    F = np.array(points, dtype=float)
    # library minimises, the oracle maximises
    assert np.array_equal(nondominated_ranks(F), brute_pareto_fronts(-F))


def test_crowding_boundaries_infinite():
    F = np.array([[0.0, 3.0], [1.0, 2.0], [2.0, 1.0], [3.0, 0.0]])
    d = crowding_distance(F)
    assert np.isinf(d[0]) and np.isinf(d[3])
    assert np.allclose(d[1:3], [2 * 2 / 3, 2 * 2 / 3])


@pytest.mark.parametrize("kw", [dict(pareto_fraction=1.5), dict(crossover_fraction=-0.1),
                                dict(crowding="hamming"), dict(population_multiplier=0)])
def test_bad_ga_config(kw):
    with pytest.raises(ValueError):
        GAConfig(**kw)


def test_single_descriptor_rejected():
    with pytest.raises(ValueError):
        NSGA2Selector(GAConfig(), lambda b: 0.0, 1)


def _small_run(ctx, seed, **kw):
    cfg = GAConfig(population_multiplier=4, max_generations=25, stall_generations=10,
                   migration_interval=5, rng_seed=seed, **kw)
    return nsga2_select(cfg, ctx)


def test_same_seed_same_result(sn_data):
    d = sn_data
    ctx = FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
    a, b = _small_run(ctx, 7), _small_run(ctx, 7)
    assert np.array_equal(a.Bn, b.Bn) and a.history == b.history


@pytest.mark.parametrize("crowding", ["objective", "genotype"])
def test_best_fitness_never_drops(sn_data, crowding):
    d = sn_data
    ctx = FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
    for seed in range(3):
        res = _small_run(ctx, seed, crowding=crowding)
        best = [h[1] for h in res.history]
        assert np.all(np.diff(best) >= 0)
        assert res.r1 == best[-1] == ctx.r1(res.Bn)
        assert [h[0] for h in res.history] == list(range(1, res.generations + 1))


def test_evaluation_budget_stops_run(sn_data):
    d = sn_data
    ctx = FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
    res = nsga2_select(GAConfig(population_multiplier=4, max_evaluations=100, rng_seed=1), ctx)
    assert res.stop_reason == "max_evaluations"
    assert res.evaluations >= 100 and res.generations < 10


def test_ga_prefers_signal_descriptors(sn_data):
    d = sn_data
    ctx = FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
    res = _small_run(ctx, 0)
    assert res.Bn[d.informative].mean() > res.Bn[~d.informative].mean()


@pytest.mark.slow
def test_selected_mask_generalises_better_than_random_of_same_size():
    wins = 0
    for seed in range(20):
        d = signal_noise_features(K=12, n_informative=6, n_subjects=15, signal=0.7, seed=100 + seed)
        ctx = FitnessContext(d.gallery, d.probes, d.gallery_labels, d.probe_labels, d.layout)
        held = FitnessContext(d.gallery, d.heldout, d.gallery_labels, d.heldout_labels, d.layout)
        Bn = _small_run(ctx, seed).Bn
        rand = np.zeros(12, dtype=bool)
        rand[np.random.default_rng(seed).choice(12, int(Bn.sum()), replace=False)] = True
        wins += held.r1(Bn) >= held.r1(rand)
    assert wins >= 18
