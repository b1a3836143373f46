import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smas import dwell as dw
from smas import statespace as ss

from conftest import random_params, three_state_truth
from oracles import first_passage, stationary_eig

U, UNK, DEAD = ss.UNSEEN, ss.UNKNOWN, ss.DEAD


def params_k(K, dwell, T=3, **kw):
    psi = np.zeros((K, K)) if K > 1 else np.ones((1, 1))
    if K == 2:
        psi = np.array([[0.0, 1.0], [1.0, 0.0]])
    if K == 3:
        psi = np.array([[0, 0.6, 0.4], [0.8, 0, 0.2], [0.5, 0.5, 0]])
    defaults = dict(phi=0.8, psi_star=psi, p=0.3, lam=0.2, dwell=tuple(dwell), n_occasions=T)
    defaults.update(kw)
    return ss.ModelParams(**defaults)


def test_plan_geometric_pair():
    plan = ss.build_aggregation([dw.Geometric(0.3), dw.Geometric(0.6)])
    assert plan.sizes == (1, 1) and plan.total == 4


def test_plan_finite_table():
    plan = ss.build_aggregation([dw.TabulatedPMF((0.2,) * 5)])
    assert plan.sizes == (5,) and plan.total == 7


def test_plan_three_state_truth():
    truth = three_state_truth()
    plan = ss.build_aggregation(truth.dwell, 1e-6)
    assert plan.sizes == (41, 18, 1)
    assert plan.total == 62
    for spec, a in zip(truth.dwell[:2], plan.sizes[:2]):
        assert spec.sf(a) <= 1e-6 < spec.sf(a - 1)
    assert plan.offsets == (0, 41, 59)
    assert plan.aggregate(1) == slice(41, 59)


def test_plan_overrides_and_errors():
    plan = ss.build_aggregation([dw.ShiftedPoisson(4), dw.Geometric(0.5)], overrides=[3, None])
    assert plan.sizes == (3, 1)
    with pytest.raises(ss.StateSpaceError):
        ss.build_aggregation([dw.Geometric(0.5)], overrides=[0])


def test_diag_block_geometric():
    P = params_k(1, [dw.Geometric(0.4)])
    plan = ss.build_aggregation(P.dwell)
    np.testing.assert_allclose(ss.diag_block(0, 0, P, plan), [[0.6]])


def test_diag_block_table():
    P = params_k(1, [dw.TabulatedPMF((0.5, 0.5))])
    plan = ss.build_aggregation(P.dwell)
    np.testing.assert_array_equal(ss.diag_block(0, 0, P, plan), [[0, 0.5], [0, 0]])


def test_diag_block_masked_by_seen_pair():
    P = params_k(2, [dw.Geometric(0.4), dw.Geometric(0.3)])
    plan = ss.build_aggregation(P.dwell)
    assert not ss.diag_block(1, 0, P, plan, (ss.seen(0), ss.seen(1))).any()


def test_offdiag_block_geometric():
    P = params_k(3, [dw.Geometric(0.4), dw.Geometric(0.4), dw.Geometric(0.4)])
    plan = ss.build_aggregation(P.dwell)
    np.testing.assert_allclose(ss.offdiag_block(0, 1, 0, P, plan), [[0.24]])
    assert not ss.offdiag_block(0, 1, 0, P, plan, (ss.seen(1), ss.seen(0))).any()


def test_offdiag_block_table():
    P = params_k(3, [dw.TabulatedPMF((0.5, 0.5)), dw.TabulatedPMF((0.3, 0.3, 0.4)), dw.Geometric(0.5)])
    plan = ss.build_aggregation(P.dwell)
    assert plan.sizes == (2, 3, 1)
    np.testing.assert_allclose(ss.offdiag_block(0, 1, 0, P, plan), [[0.3, 0, 0], [0.6, 0, 0]])
    with pytest.raises(ss.StateSpaceError):
        ss.offdiag_block(1, 1, 0, P, plan)


def test_single_state_geometric_matrix():
    # one state: leaving re-enters the same state, so the live entry is phi
    P = params_k(1, [dw.Geometric(0.4)], phi=0.7)
    plan = ss.build_aggregation(P.dwell)
    G = ss.build_tpm(0, U, U, P, plan)
    np.testing.assert_allclose(G, [[0.7, 0.3, 0], [0, 0, 1], [0, 0, 1]])


def test_seen_pair_leaves_single_live_block():
    truth = three_state_truth(T=4)
    plan = ss.build_aggregation(truth.dwell)
    n = plan.n_live
    for j, k in itertools.product(range(3), repeat=2):
        G = ss.build_tpm(0, ss.seen(j), ss.seen(k), truth, plan)
        mask = np.zeros((n, n), bool)
        mask[plan.aggregate(j), plan.aggregate(k)] = True
        assert not G[:n, :n][~mask].any()
        assert G[:n, :n][mask].any()
        assert not G[:n, n].any()


@pytest.mark.parametrize("K", [1, 2, 3])
def test_unmasked_rows_stochastic_and_masks_dominated(K):
    rng = np.random.default_rng(K)
    for _ in range(5):
        P = random_params(rng, K, 4)
        plan = ss.build_aggregation(P.dwell, overrides=[int(rng.integers(1, 5)) for _ in range(K)])
        full = ss.build_tpm(1, U, U, P, plan)
        np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-12)
        symbols = [U, UNK, DEAD] + [ss.seen(k) for k in range(K)]
        for a, b in itertools.product(symbols, repeat=2):
            if a == DEAD:
                continue
            masked = ss.build_tpm(1, a, b, P, plan)
            assert np.all(masked <= full + 1e-15)


def test_masking_matches_compatibility_sets():
    K = 3
    truth = three_state_truth(T=4)
    plan = ss.build_aggregation(truth.dwell, overrides=[2, 2, 1])
    symbols = [U, UNK] + [ss.seen(k) for k in range(K)]
    for a, b in itertools.product(symbols, symbols + [DEAD]):
        G = ss.build_tpm(0, a, b, truth, plan)
        for j, k in itertools.product(range(K), repeat=2):
            block = G[plan.aggregate(j), plan.aggregate(k)]
            allowed = ss.live_compatible(a, j) and ss.live_compatible(b, k)
            assert block.any() == allowed, (a, b, j, k)


def test_markov_reduction_entrywise():
    theta = [0.3, 0.5, 0.7]
    truth = three_state_truth(T=4, dwell=tuple(dw.Geometric(t) for t in theta))
    plan = ss.build_aggregation(truth.dwell)
    G = ss.build_tpm(1, U, U, truth, plan)
    for j, k in itertools.product(range(3), repeat=2):
        move = 1 - theta[j] if j == k else theta[j] * truth.psi_star[1, j, k]
        assert G[j, k] == pytest.approx(truth.phi[1, j] * move, abs=1e-15)


def test_obs_matrices():
    P = params_k(1, [dw.Geometric(0.4)], p=0.2, lam=0.2)
    plan = ss.build_aggregation(P.dwell)
    np.testing.assert_allclose(np.diag(ss.build_obs_matrix(0, U, P, plan)), [0.8, 0.8, 1.0])
    P2 = params_k(2, [dw.Geometric(0.4), dw.ShiftedPoisson(1.0)], p=[0.3, 0.1], alpha=[1.0, 0.9])
    plan2 = ss.AggregationPlan((1, 3))
    np.testing.assert_allclose(ss.obs_diagonal(0, ss.seen(1), P2, plan2), [0, 0.09, 0.09, 0.09, 0, 0])
    P3 = params_k(2, [dw.Geometric(0.4), dw.Geometric(0.3)])
    assert not ss.obs_diagonal(0, UNK, P3, ss.build_aggregation(P3.dwell)).any()


def test_obs_outcomes_sum_to_one():
    rng = np.random.default_rng(3)
    P = random_params(rng, 3, 4)
    plan = ss.build_aggregation(P.dwell, overrides=[2, 1, 3])
    total = sum(ss.obs_diagonal(2, x, P, plan) for x in [U, UNK, DEAD] + [ss.seen(k) for k in range(3)])
    n = plan.n_live
    np.testing.assert_allclose(total[:n], 1.0, atol=1e-15)
    assert total[n] == pytest.approx(1.0)


def test_stationary_symmetric_and_single_state():
    P = params_k(2, [dw.Geometric(0.3), dw.Geometric(0.3)])
    plan = ss.build_aggregation(P.dwell)
    np.testing.assert_allclose(ss.stationary_restricted(0, P, plan), [0.5, 0.5], atol=1e-14)
    P1 = params_k(1, [dw.ShiftedPoisson(3)])
    plan1 = ss.build_aggregation(P1.dwell)
    pi = ss.stationary_restricted(0, P1, plan1)
    assert pi.sum() == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(pi, ss.within_aggregate_weights(P1.dwell[0], plan1.sizes[0]), atol=1e-12)


def test_stationary_matches_eigenvector_and_residual():
    truth = three_state_truth()
    plan = ss.build_aggregation(truth.dwell)
    pi = ss.stationary_restricted(0, truth, plan)
    G = ss.restricted_matrix(0, truth, plan)
    assert np.max(np.abs(pi @ G - pi)) <= 1e-12
    np.testing.assert_allclose(pi, stationary_eig(G), atol=1e-10)


def test_stationary_degenerate_chain_raises():
    # two closed classes {1, 2} and {3, 4}
    psi = np.array([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], float)
    P = params_k(4, [dw.Geometric(0.3)] * 4, psi_star=psi)
    plan = ss.build_aggregation(P.dwell)
    with pytest.raises(ss.StationaryError):
        ss.stationary_restricted(0, P, plan)


@pytest.mark.parametrize("spec", [dw.ShiftedNegBinomial(4, 0.4), dw.ShiftedPoisson(4)])
def test_dwell_law_fidelity(spec):
    truth = three_state_truth(dwell=(spec, dw.Geometric(0.5), dw.Geometric(0.5)))
    plan = ss.build_aggregation(truth.dwell, 1e-6)
    a = plan.sizes[0]
    block = ss.diag_block(0, 0, truth, plan)
    hz = dw.hazard_table(spec, a).values
    f = first_passage(block, hz, a + 10)
    np.testing.assert_allclose(f[:a], spec.pmf(np.arange(1, a + 1)), atol=1e-12)
    ratios = f[a:] / f[a - 1:-1]
    np.testing.assert_allclose(ratios, 1 - hz[-1], rtol=1e-12)


def test_initial_modes():
    K = 2
    P = params_k(K, [dw.Geometric(0.3), dw.Geometric(0.6)])
    plan = ss.build_aggregation(P.dwell)
    v = ss.initial_distribution("conditional", ss.seen(1), 0, P, plan)
    np.testing.assert_array_equal(v, [0, 1, 0, 0])
    v = ss.initial_distribution("stationary", ss.seen(0), 0, P, plan)
    np.testing.assert_allclose(v, [1, 0, 0, 0])
    raw = ss.initial_distribution("stationary", ss.seen(0), 0, P, plan, renormalize=False)
    pi = ss.stationary_restricted(0, P, plan)
    np.testing.assert_allclose(raw[:1], pi[:1])
    full = ss.initial_distribution("stationary", UNK, 0, P, plan)
    np.testing.assert_allclose(full[:2], pi)
    with pytest.raises(ss.StateSpaceError):
        ss.initial_distribution("stationary", DEAD, 0, P, plan)


def test_initial_estimated_concatenation():
    specs = [dw.ShiftedPoisson(2.0), dw.ShiftedNegBinomial(2, 0.5)]
    P = params_k(2, specs, init_mode="estimated", init_extra=[0.95, 0.05])
    plan = ss.build_aggregation(P.dwell)
    w = [ss.within_aggregate_weights(s, a) for s, a in zip(specs, plan.sizes)]
    v = ss.initial_distribution("estimated", UNK, 0, P, plan)
    np.testing.assert_allclose(v[: plan.n_live], np.concatenate([0.95 * w[0], 0.05 * w[1]]))
    assert v.sum() == pytest.approx(1.0, abs=1e-14)
    v1 = ss.initial_distribution("estimated", ss.seen(1), 0, P, plan)
    np.testing.assert_allclose(v1[plan.aggregate(1)], 0.05 * w[1])


def test_within_aggregate_weights_match_single_state_stationary():
    for spec in (dw.ShiftedNegBinomial(4, 0.4), dw.TabulatedPMF((0.2, 0.3))):
        P = params_k(1, [spec])
        plan = ss.build_aggregation(P.dwell)
        np.testing.assert_allclose(ss.within_aggregate_weights(spec, plan.sizes[0]),
                                   ss.stationary_restricted(0, P, plan), atol=1e-12)


def test_param_validation():
    with pytest.raises(ss.StateSpaceError):
        params_k(2, [dw.Geometric(0.3)] * 2, phi=1.2)
    with pytest.raises(ss.StateSpaceError):
        ss.ModelParams(phi=0.8, psi_star=[[0, 0.5], [1, 0]], p=0.3, lam=0.2,
                       dwell=(dw.Geometric(0.3),) * 2, n_occasions=3)
    with pytest.raises(ss.StateSpaceError):
        params_k(1, [dw.Geometric(0.3)], T=1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3))
def test_restricted_chain_rows_sum_to_one(seed, K):
    rng = np.random.default_rng(seed)
    P = random_params(rng, K, 3)
    plan = ss.build_aggregation(P.dwell, overrides=[int(rng.integers(1, 6)) for _ in range(K)])
    G = ss.restricted_matrix(0, P, plan)
    np.testing.assert_allclose(G.sum(axis=1), 1.0, atol=1e-12)
