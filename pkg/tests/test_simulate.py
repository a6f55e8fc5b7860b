import numpy as np
import pytest

from xlmdp.errors import PolicyCoverageError
from xlmdp.experiments import read_policy, solve, write_policy
from xlmdp.mdp import Policy, TabularMDP
from xlmdp.simulate import (
    batch_means_ci, compare_policies, draw_uniforms, rollout, stationary_average_reward,
)


def cycle3():
    # deterministic 0 -> 1 -> 2 -> 0 with action 1 holding the state
    P = np.zeros((3, 2, 3))
    for s in range(3):
        P[s, 0, (s + 1) % 3] = 1.0
        P[s, 1, s] = 1.0
    R = np.array([[1.0, 0.5], [2.0, 0.0], [3.0, 0.1]])
    return TabularMDP(P, R)


class TestRollout:
    def test_hand_unroll(self):
        mdp = cycle3()
        trace = rollout(mdp, Policy.deterministic([0, 0, 0], 2), 0, 5, discount=0.5)
        np.testing.assert_array_equal(trace.states, [0, 1, 2, 0, 1])
        np.testing.assert_array_equal(trace.rewards, [1.0, 2.0, 3.0, 1.0, 2.0])
        assert trace.average_reward == pytest.approx(9.0 / 5)
        assert trace.discounted_return == pytest.approx(1 + 1.0 + 0.75 + 0.125 + 0.125)

    def test_holding_action(self):
        trace = rollout(cycle3(), Policy.deterministic([0, 1, 0], 2), 0, 4)
        np.testing.assert_array_equal(trace.states, [0, 1, 1, 1])

    def test_same_seed_same_trace(self, reference_model, reference_solutions):
        mdp, pol = reference_model.mdp, reference_solutions["layered"].policy
        a = rollout(mdp, pol, reference_model.s0, 2000, seed=4)
        b = rollout(mdp, pol, reference_model.s0, 2000, seed=4)
        assert a.rewards.tobytes() == b.rewards.tobytes()
        np.testing.assert_array_equal(a.states, b.states)

    def test_average_is_mean_of_rewards(self, reference_model, reference_solutions):
        trace = rollout(reference_model.mdp, reference_solutions["centralized"].policy,
                        reference_model.s0, 1000, seed=1)
        assert trace.average_reward == np.mean(trace.rewards)

    def test_stochastic_policy_samples_support(self):
        mdp = cycle3()
        pol = Policy.stochastic(np.array([[0.5, 0.5]] * 3))
        trace = rollout(mdp, pol, 0, 400, seed=0)
        assert set(trace.actions) == {0, 1}

    def test_coverage(self, reference_model):
        with pytest.raises(PolicyCoverageError):
            rollout(reference_model.mdp, Policy.deterministic([0, 0], 1), 0, 10)

    def test_uniform_shape(self):
        u = draw_uniforms(3, 7, 0)
        assert u.shape == (7, 4) and u.min() >= 0 and u.max() < 1

    def test_csv(self, tmp_path):
        mdp = cycle3()
        trace = rollout(mdp, Policy.deterministic([0, 0, 0], 2), 0, 3)
        trace.to_csv(tmp_path / "t.csv", ["s"], lambda s: (s,), ["seed=0"])
        assert (tmp_path / "t.csv").read_text().splitlines() == [
            "# seed=0", "stage,s,action,reward", "0,0,0,1", "1,1,0,2", "2,2,0,3"]


class TestBatchMeans:
    def test_constant_series(self):
        assert batch_means_ci(np.ones(100)) == 0.0

    def test_too_short(self):
        assert batch_means_ci([1.0]) == float("inf")

    def test_hand_value(self):
        # two batches with means 0 and 1: t(0.975, 1) * std / sqrt(2)
        hw = batch_means_ci([0.0, 0.0, 1.0, 1.0], n_batches=2)
        assert hw == pytest.approx(12.706204736174698 * np.sqrt(0.5) / np.sqrt(2), rel=1e-9)

    def test_covers_iid_mean(self):
        rng = np.random.default_rng(0)
        hits = sum(abs(x.mean()) <= batch_means_ci(x) for x in rng.normal(size=(200, 2000)))
        assert 180 <= hits <= 200


class TestCompare:
    def test_identical_policies(self, reference_model, reference_solutions):
        pol = reference_solutions["layered"].policy
        c = compare_policies(reference_model.mdp, pol, pol, reference_model.s0, 3000, 0, 0.9)
        assert c.delta_r == 0.0 and c.half_width == 0.0
        assert not np.any(c.value_gap)

    def test_stationary_on_cycle(self):
        mdp = cycle3()
        avg, d = stationary_average_reward(mdp, Policy.deterministic([0, 0, 0], 2), 0)
        assert avg == pytest.approx(2.0, abs=1e-10)
        np.testing.assert_allclose(d, [1 / 3] * 3, atol=1e-10)

    def test_monte_carlo_approaches_stationary_gap(self, reference_model, reference_solutions):
        # single seeds wander, so the check is on the mean over seeds
        model = reference_model
        opt = reference_solutions["centralized"].policy
        simp = solve(model, "simplified2").policy
        exact = None
        means = []
        for K in (1_000, 10_000, 100_000):
            devs = []
            for seed in range(5):
                c = compare_policies(model.mdp, opt, simp, model.s0, K, seed, 0.9, with_stationary=exact is None)
                exact = c.stationary_gap if exact is None else exact
                devs.append(abs(c.delta_r - exact))
            means.append(np.mean(devs))
        assert means[0] >= means[1] >= means[2]


class TestPolicyFiles:
    def test_round_trip(self, reference_model, reference_solutions, tmp_path):
        pol = reference_solutions["layered"].policy
        write_policy(tmp_path / "p.csv", reference_model, pol, ["x=1"])
        back = read_policy(tmp_path / "p.csv", reference_model)
        np.testing.assert_array_equal(back.actions, pol.actions)

    def test_missing_rows(self, reference_model, reference_solutions, tmp_path):
        write_policy(tmp_path / "p.csv", reference_model, reference_solutions["layered"].policy, [])
        lines = (tmp_path / "p.csv").read_text().splitlines()
        (tmp_path / "q.csv").write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(PolicyCoverageError):
            read_policy(tmp_path / "q.csv", reference_model)

    def test_unknown_state(self, reference_model, reference_solutions, tmp_path):
        write_policy(tmp_path / "p.csv", reference_model, reference_solutions["layered"].policy, [])
        text = (tmp_path / "p.csv").read_text() + "99,0,0,0,0" + ",0" * 6 + "\n"
        (tmp_path / "q.csv").write_text(text)
        with pytest.raises(PolicyCoverageError):
            read_policy(tmp_path / "q.csv", reference_model)
