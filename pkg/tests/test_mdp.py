import numpy as np
import pytest
from hypothesis import given, strategies as st

from comma_ddpg import mdp

seeds = st.integers(0, 2**31)


def random_pm(seed, n=10, k=3, lam=0.9):
    rng = np.random.default_rng(seed)
    m = mdp.random_mdp(n, k, lam, rng)
    return m, mdp.PolicyMatrix.from_policy(m, mdp.random_policy(m, rng))


def test_mdp_validation():
    P = np.array([[[0.5, 0.6]]])
    with pytest.raises(ValueError):
        mdp.FiniteMdp(P, np.zeros((1, 1)), 0.9)
    with pytest.raises(ValueError):
        mdp.FiniteMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 1.0)
    with pytest.raises(ValueError):
        mdp.FiniteMdp(np.ones((1, 1, 1)), np.full((1, 1), np.inf), 0.5)


def test_mdp_json_round_trip(tmp_path):
    m, _ = random_pm(1)
    m.save(tmp_path / "m.json")
    m2 = mdp.FiniteMdp.load(tmp_path / "m.json")
    np.testing.assert_array_equal(m.P, m2.P)
    np.testing.assert_array_equal(m.R, m2.R)
    assert m.gamma == m2.gamma


@given(seeds)
def test_policy_matrix_rows_are_stochastic(seed):
    _, pm = random_pm(seed, n=7, k=4)
    assert np.all(pm.P_pi >= 0)
    np.testing.assert_allclose(pm.P_pi.sum(1), 1.0, atol=1e-12)


def test_bellman_zero_discount_returns_reward():
    _, pm = random_pm(2)
    v = np.random.default_rng(0).normal(size=10)
    np.testing.assert_array_equal(mdp.bellman_apply(pm, v, 0.0), pm.R_pi)
    with pytest.raises(ValueError):
        mdp.bellman_apply(pm, np.zeros(9), 0.5)


def test_two_state_chain_fixed_point():
    m, pi = mdp.two_state_chain()
    pm = mdp.PolicyMatrix.from_policy(m, pi)
    np.testing.assert_allclose(mdp.bellman_apply(pm, [10.0, 10.0], 0.9), [10.0, 10.0], atol=1e-14)
    r = mdp.value_iteration(m, pi, 0.9, tol=1e-10)
    np.testing.assert_allclose(r.V, [10.0, 10.0], atol=1e-9)


def test_zero_discount_converges_in_one_sweep():
    m, pm = random_pm(3)
    r = mdp.value_iteration(None, pm, 0.0, tol=1e-10)
    np.testing.assert_array_equal(r.V, pm.R_pi)
    assert r.iters <= 2  # second sweep only confirms the zero step


def test_value_iteration_rejects_bad_arguments():
    _, pm = random_pm(4)
    with pytest.raises(ValueError):
        mdp.value_iteration(None, pm, 1.0)
    with pytest.raises(ValueError):
        mdp.value_iteration(None, pm, 0.9, tol=0.0)


def test_matches_linear_solve():
    _, pm = random_pm(5)
    r = mdp.value_iteration(None, pm, 0.9, tol=1e-12)
    assert mdp.sup_dist(r.V, mdp.solve_linear(pm, 0.9)) <= 1e-8


@given(seeds, st.sampled_from([0.5, 0.9, 0.99]))
def test_observed_contraction_ratios(seed, lam):
    _, pm = random_pm(seed, lam=lam)
    r = mdp.value_iteration(None, pm, lam, rng=np.random.default_rng(seed))
    assert len(r.ratios) > 0
    assert np.max(r.ratios) <= lam + 1e-12


@given(seeds, st.floats(0.0, 0.999))
def test_bellman_operator_contracts_any_pair(seed, lam):
    _, pm = random_pm(seed, n=8)
    rng = np.random.default_rng(seed + 1)
    u, v = rng.uniform(-10, 10, 8), rng.uniform(-10, 10, 8)
    lhs = mdp.sup_dist(mdp.bellman_apply(pm, u, lam), mdp.bellman_apply(pm, v, lam))
    assert lhs <= lam * mdp.sup_dist(u, v) + 1e-12


@given(seeds)
def test_unique_fixed_point_from_many_starts(seed):
    _, pm = random_pm(seed, lam=0.9)
    tol = 1e-10
    # a last step below tol*(1-lam)/lam puts each iterate within tol of the fixed point
    step_tol = tol * (1 - 0.9) / 0.9
    rng = np.random.default_rng(seed)
    Vs = [mdp.value_iteration(None, pm, 0.9, step_tol, rng=rng).V for _ in range(10)]
    spread = max(mdp.sup_dist(a, b) for a in Vs for b in Vs)
    assert spread <= 10 * tol


@given(seeds, st.sampled_from([0.5, 0.9]))
def test_error_shrinks_geometrically(seed, lam):
    _, pm = random_pm(seed, lam=lam)
    r = mdp.value_iteration(None, pm, lam, 1e-10, rng=np.random.default_rng(seed), track_error=True)
    e0 = r.errors[0]
    for k, e in enumerate(r.errors):
        assert e <= lam ** k * e0 * (1 + 1e-9) + 1e-13


def test_q_v_transforms():
    m, _ = random_pm(6, n=5, k=3)
    V = np.random.default_rng(0).normal(size=5)
    np.testing.assert_array_equal(mdp.q_from_v(m, V, gamma=0.0), m.R)
    Q = mdp.q_from_v(m, V)
    acts = np.array([0, 2, 1, 1, 0])
    np.testing.assert_array_equal(mdp.v_from_q(Q, acts), Q[np.arange(5), acts])
    np.testing.assert_allclose(mdp.v_from_q(Q, mdp.one_hot_policy(acts, 3)), Q[np.arange(5), acts])
    with pytest.raises(ValueError):
        mdp.q_from_v(m, np.zeros(4))
    with pytest.raises(ValueError):
        mdp.v_from_q(Q, np.ones((5, 2)))


@given(seeds)
def test_greedy_policy_is_stable_under_improvement(seed):
    rng = np.random.default_rng(seed)
    m = mdp.random_mdp(6, 3, 0.8, rng)
    acts, V_star = mdp.greedy(mdp.optimal_q(m))
    pi_acts, V_pi = mdp.policy_iteration(m)
    np.testing.assert_allclose(V_star, V_pi, atol=1e-8)
    # improving on the greedy policy keeps its value
    Q = mdp.q_from_v(m, mdp.solve_linear(mdp.PolicyMatrix.from_policy(m, acts), m.gamma))
    np.testing.assert_allclose(Q.max(1), mdp.v_from_q(Q, acts), atol=1e-8)


def test_gershgorin_examples():
    d = mdp.gershgorin_bound(np.eye(4))
    assert d.radii.tolist() == [0.0] * 4 and d.bound == 1.0
    d = mdp.gershgorin_bound([[0.0, 1.0], [1.0, 0.0]])
    assert d.centers.tolist() == [0.0, 0.0] and d.radii.tolist() == [1.0, 1.0] and d.bound == 1.0
    ev = np.sort(mdp.eigvals_qr(np.array([[0.0, 1.0], [1.0, 0.0]])).real)
    np.testing.assert_allclose(ev, [-1.0, 1.0], atol=1e-12)
    with pytest.raises(ValueError):
        mdp.gershgorin_bound(np.ones((2, 3)))


@given(seeds, st.integers(1, 30), st.floats(0.0, 0.8))
def test_stochastic_spectrum_inside_unit_disc(seed, n, sparsity):
    P = mdp.random_stochastic(n, np.random.default_rng(seed), sparsity=sparsity)
    d = mdp.gershgorin_bound(P)
    assert d.bound <= 1.0 + 1e-12
    ev = mdp.eigvals_qr(P)
    assert np.max(np.abs(ev)) <= d.bound + 1e-9


@given(seeds, st.integers(1, 20))
def test_qr_eigenvalues_match_lapack(seed, n):
    A = np.random.default_rng(seed).normal(size=(n, n))
    assert mdp._match_distance(mdp.eigvals_qr(A), np.linalg.eigvals(A)) <= 1e-6


def test_qr_handles_rotation_and_triangular():
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    np.testing.assert_allclose(np.sort_complex(mdp.eigvals_qr(R)), [-1j, 1j], atol=1e-12)
    U = np.triu(np.arange(1.0, 17.0).reshape(4, 4))
    np.testing.assert_allclose(np.sort(mdp.eigvals_qr(U).real), [1, 6, 11, 16], atol=1e-10)


def test_certificate_report_text():
    rep = mdp.certify_contraction(n_mdps=5, lambdas=(0.9,), max_states=6, n_starts=3, seed=1)
    assert rep.passed
    text = rep.to_text()
    assert "PASS" in text and "FAIL" not in text
    rep.add("forced failure", False, 2.0, 1.0)
    assert not rep.passed and "FAIL" in rep.to_text()
