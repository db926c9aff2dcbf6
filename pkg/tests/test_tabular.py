import json

import numpy as np
import pytest

from csve import tabular as tab
from csve.errors import InputError


def chain_mdp(gamma=0.5):
    """Two-state deterministic chain s0 -> s1 -> s1 with reward 1 at s1."""
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 1.0
    p[1, 0, 1] = 1.0
    r = np.array([[0.0], [1.0]])
    return tab.TabularMdp(p, r, np.array([1.0, 0.0]), gamma, r_max=1.0)


def single_policy(num_states):
    return tab.PolicyTable(np.ones((num_states, 1)))


# ---------------------------------------------------------------------------
# Type invariants
# ---------------------------------------------------------------------------

def test_mdp_rejects_bad_rows():
    p = np.zeros((2, 1, 2))
    p[0, 0, 0] = 0.9  # row does not sum to 1
    p[1, 0, 1] = 1.0
    with pytest.raises(InputError):
        tab.TabularMdp(p, np.zeros((2, 1)), np.array([1.0, 0.0]), 0.9, 1.0)


def test_mdp_rejects_reward_above_rmax():
    p = np.ones((1, 1, 1))
    with pytest.raises(InputError):
        tab.TabularMdp(p, np.array([[2.0]]), np.array([1.0]), 0.9, r_max=1.0)


def test_mdp_rejects_bad_discount():
    p = np.ones((1, 1, 1))
    for gamma in (0.0, 1.0, 1.5):
        with pytest.raises(InputError):
            tab.TabularMdp(p, np.zeros((1, 1)), np.array([1.0]), gamma, 1.0)


def test_policy_rows_must_normalize():
    with pytest.raises(InputError):
        tab.PolicyTable(np.array([[0.5, 0.4]]))


def test_dataset_counts_are_validated():
    ds = tab.TabularDataset.from_transitions([(0, 0, 1.0, 1), (0, 0, 0.5, 0)], 2, 1)
    assert ds.count_sa[0, 0] == 2
    assert ds.count_s.tolist() == [2, 0]
    with pytest.raises(InputError):
        tab.TabularDataset(ds.states, ds.actions, ds.rewards, ds.next_states,
                           np.array([[1], [1]]), np.array([1, 1]))


def test_sampling_error_model_requires_dominating_combined_constant():
    with pytest.raises(InputError):
        tab.SamplingErrorModel(c_r=2.0, c_p=1.0, c_rt=1.0)


def test_arrays_are_frozen():
    mdp = chain_mdp()
    with pytest.raises(ValueError):
        mdp.transition[0, 0, 0] = 0.5


# ---------------------------------------------------------------------------
# exact_policy_evaluation
# ---------------------------------------------------------------------------

def test_single_state_geometric_series():
    mdp = tab.TabularMdp(np.ones((1, 1, 1)), np.array([[1.0]]), np.array([1.0]),
                         0.9, 1.0)
    v = tab.exact_policy_evaluation(mdp, single_policy(1))
    assert v.values[0] == pytest.approx(10.0, abs=1e-12)


def test_two_state_chain_closed_form():
    v = tab.exact_policy_evaluation(chain_mdp(0.5), single_policy(2))
    assert v.values[1] == pytest.approx(2.0, abs=1e-12)
    assert v.values[0] == pytest.approx(1.0, abs=1e-12)


def test_policy_evaluation_matches_iterative_oracle():
    rng = np.random.default_rng(7)
    mdp = tab.random_mdp(6, 3, 0.9, rng)
    policy = tab.random_policy(6, 3, rng)
    v = tab.exact_policy_evaluation(mdp, policy)

    # independent oracle: 10,000 sweeps of the Bellman recursion
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r_pi = np.sum(policy.probs * mdp.reward, axis=1)
    v_iter = np.zeros(6)
    for _ in range(10_000):
        v_iter = r_pi + mdp.discount * (p_pi @ v_iter)
    assert np.max(np.abs(v.values - v_iter)) < 1e-6


def test_bellman_consistency_on_random_mdps():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = int(rng.integers(2, 10))
        a = int(rng.integers(1, 5))
        mdp = tab.random_mdp(s, a, float(rng.uniform(0.2, 0.98)), rng)
        policy = tab.random_policy(s, a, rng)
        v = tab.exact_policy_evaluation(mdp, policy).values
        backup = np.sum(
            policy.probs * (mdp.reward + mdp.discount * (mdp.transition @ v)), axis=1)
        assert np.max(np.abs(v - backup)) <= 1e-9


# ---------------------------------------------------------------------------
# discounted_state_occupancy
# ---------------------------------------------------------------------------

def test_occupancy_single_state():
    mdp = tab.TabularMdp(np.ones((1, 1, 1)), np.array([[0.0]]), np.array([1.0]),
                         0.7, 1.0)
    d = tab.discounted_state_occupancy(mdp, single_policy(1))
    assert d.probs.tolist() == [1.0]
    assert d.kind == "discounted_occupancy"


def test_occupancy_two_state_chain():
    d = tab.discounted_state_occupancy(chain_mdp(0.5), single_policy(2))
    assert np.allclose(d.probs, [0.5, 0.5], atol=1e-12)


def test_occupancy_matches_monte_carlo():
    rng = np.random.default_rng(7)
    gamma = 0.5
    mdp = tab.random_mdp(6, 3, gamma, rng)
    policy = tab.random_policy(6, 3, rng)
    d = tab.discounted_state_occupancy(mdp, policy)

    # oracle: geometric-stopping sampling of the discounted visitation
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    cum_p = np.cumsum(p_pi, axis=1)
    mc = np.random.default_rng(123)
    n = 200_000
    lengths = mc.geometric(1.0 - gamma, size=n) - 1  # P(T = t) = (1-gamma) gamma^t
    states = mc.choice(6, size=n, p=mdp.initial_dist)
    for t in range(1, lengths.max() + 1):
        active = lengths >= t
        u = mc.random(active.sum())
        states[active] = (u[:, None] < cum_p[states[active]]).argmax(axis=1)
    counts = np.bincount(states, minlength=6) / n
    assert 0.5 * np.abs(counts - d.probs).sum() < 0.01


def test_occupancy_flow_equation():
    rng = np.random.default_rng(11)
    for _ in range(20):
        s = int(rng.integers(2, 12))
        mdp = tab.random_mdp(s, 2, float(rng.uniform(0.3, 0.97)), rng)
        policy = tab.random_policy(s, 2, rng)
        d = tab.discounted_state_occupancy(mdp, policy).probs
        p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
        flow = (1.0 - mdp.discount) * mdp.initial_dist + mdp.discount * (p_pi.T @ d)
        assert np.max(np.abs(d - flow)) <= 1e-9
        assert abs(d.sum() - 1.0) <= 1e-10


# ---------------------------------------------------------------------------
# empirical_mdp
# ---------------------------------------------------------------------------

def test_empirical_mdp_recovers_deterministic_mdp_from_enumeration():
    mdp = chain_mdp(0.5)
    rows = []
    for s in range(2):
        rows.append((s, 0, float(mdp.reward[s, 0]), int(mdp.transition[s, 0].argmax())))
    ds = tab.TabularDataset.from_transitions(rows, 2, 1)
    hat = tab.empirical_mdp(ds, mdp)
    assert np.array_equal(hat.transition, mdp.transition)
    assert np.array_equal(hat.reward, mdp.reward)


def test_empirical_mdp_single_transition():
    mdp = chain_mdp(0.5)
    ds = tab.TabularDataset.from_transitions([(0, 0, 0.3, 1)], 2, 1)
    hat = tab.empirical_mdp(ds, mdp)
    assert hat.reward[0, 0] == pytest.approx(0.3)
    assert hat.transition[0, 0, 1] == 1.0
    # unvisited pair falls back to uniform transitions and zero reward
    assert np.allclose(hat.transition[1, 0], [0.5, 0.5])
    assert hat.reward[1, 0] == 0.0


def test_empirical_transition_concentration():
    rng = np.random.default_rng(3)
    mdp = tab.random_mdp(6, 3, 0.9, rng)
    behavior = tab.random_policy(6, 3, rng)
    ds = tab.sample_dataset(mdp, behavior, 10_000, rng)
    hat = tab.empirical_mdp(ds, mdp)
    from csve.conservative import calibrate_sampling_error_model

    sem = calibrate_sampling_error_model(6, 0.9, 1.0, delta=0.05)
    visited = ds.count_sa > 0
    l1 = np.abs(hat.transition - mdp.transition).sum(axis=2)
    bound = sem.c_p / np.sqrt(np.maximum(ds.count_sa, 1))
    coverage = np.mean(l1[visited] <= bound[visited])
    assert coverage >= 0.95


# ---------------------------------------------------------------------------
# dataset_state_marginal / sampling_error_bound
# ---------------------------------------------------------------------------

def test_marginal_trivial_cases():
    ds = tab.TabularDataset.from_transitions([(0, 0, 0.0, 1)] * 3, 3, 1)
    d = tab.dataset_state_marginal(ds, 3)
    assert d.probs.tolist() == [1.0, 0.0, 0.0]
    assert d.kind == "empirical_marginal"

    rows = [(0, 0, 0.0, 1)] * 3 + [(1, 0, 0.0, 0)]
    d = tab.dataset_state_marginal(tab.TabularDataset.from_transitions(rows, 2, 1), 2)
    assert np.allclose(d.probs, [0.75, 0.25])


def test_marginal_rejects_empty_dataset():
    ds = tab.TabularDataset.from_transitions([], 2, 1)
    with pytest.raises(InputError):
        tab.dataset_state_marginal(ds, 2)


def test_marginal_support_equals_visited_states():
    rng = np.random.default_rng(5)
    mdp = tab.random_mdp(10, 2, 0.9, rng)
    ds = tab.sample_dataset(mdp, tab.random_policy(10, 2, rng), 30, rng)
    d = tab.dataset_state_marginal(ds, 10)
    assert set(d.support.tolist()) == set(np.flatnonzero(ds.count_s > 0).tolist())
    # independent recount straight from the transition list
    recount = np.bincount(ds.states, minlength=10)
    assert np.allclose(d.probs, recount / recount.sum())


def test_sampling_error_bound_zero_constant():
    mdp = chain_mdp(0.5)
    ds = tab.TabularDataset.from_transitions([(0, 0, 0.0, 1)], 2, 1)
    sem = tab.SamplingErrorModel(c_r=0.0, c_p=0.0, c_rt=0.0)
    assert tab.sampling_error_bound(ds, sem, mdp, single_policy(2), 0) == 0.0


def test_sampling_error_bound_deterministic_policy():
    mdp = chain_mdp(0.5)
    ds = tab.TabularDataset.from_transitions([(0, 0, 0.0, 1)] * 4, 2, 1)
    sem = tab.SamplingErrorModel(c_r=0.0, c_p=0.0, c_rt=1.0)
    # c * r_max / ((1 - gamma) * sqrt(4)) = 1 / (0.5 * 2)
    assert tab.sampling_error_bound(ds, sem, mdp, single_policy(2), 0) == pytest.approx(1.0)


def test_sampling_error_bound_mixed_policy_brute_force():
    p = np.zeros((1, 2, 1))
    p[:, :, 0] = 1.0
    mdp = tab.TabularMdp(p, np.zeros((1, 2)), np.array([1.0]), 0.9, 1.0)
    rows = [(0, 0, 0.0, 0)] + [(0, 1, 0.0, 0)] * 4
    ds = tab.TabularDataset.from_transitions(rows, 1, 2)
    sem = tab.SamplingErrorModel(c_r=0.0, c_p=0.0, c_rt=1.0)
    policy = tab.PolicyTable(np.array([[0.5, 0.5]]))
    got = tab.sampling_error_bound(ds, sem, mdp, policy, 0)
    brute = sum(policy.probs[0, a] * sem.c_rt * mdp.r_max
                / ((1 - mdp.discount) * np.sqrt(ds.count_sa[0, a]))
                for a in range(2))
    assert got == pytest.approx(brute, abs=1e-12)
    assert got == pytest.approx(7.5, abs=1e-12)


def test_unvisited_count_floor_is_used():
    mdp = chain_mdp(0.5)
    ds = tab.TabularDataset.from_transitions([(1, 0, 1.0, 1)], 2, 1)
    sem = tab.SamplingErrorModel(c_r=0.0, c_p=0.0, c_rt=1.0, unvisited_count_floor=0.01)
    got = tab.sampling_error_bound(ds, sem, mdp, single_policy(2), 0)
    assert got == pytest.approx(1.0 / (0.5 * np.sqrt(0.01)))


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------

def test_json_round_trip_is_bit_faithful():
    rng = np.random.default_rng(42)
    mdp = tab.random_mdp(5, 3, 0.937, rng)
    text = mdp.to_json()
    back = tab.TabularMdp.from_json(text)
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)
    assert np.array_equal(back.initial_dist, mdp.initial_dist)
    assert back.discount == mdp.discount and back.r_max == mdp.r_max
    # a document printed with 17 significant digits parses back identically
    doc = json.loads(text)
    reprinted = json.dumps(doc, default=float)
    again = tab.TabularMdp.from_json(reprinted)
    assert np.array_equal(again.transition, mdp.transition)
