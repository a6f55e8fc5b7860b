"""Monte Carlo rollouts with common random numbers, and policy comparison."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import PolicyCoverageError
from .mdp import Policy, discounted_return, evaluate_policy, format_real, policy_kernel


@dataclass
class RolloutTrace:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    discount: float

    @property
    def average_reward(self):
        return float(np.mean(self.rewards)) if len(self.rewards) else 0.0

    @property
    def discounted_return(self):
        return discounted_return(self.rewards, self.discount)

    def to_csv(self, path, state_columns, describe, comments=()):
        with open(path, "w", newline="") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", *state_columns, "action", "reward"])
            for k, (s, a, r) in enumerate(zip(self.states, self.actions, self.rewards)):
                w.writerow([k, *describe(int(s)), int(a), format_real(r)])


def draw_uniforms(n_layers, stages, seed):
    """One column for action sampling plus one per layer transition."""
    return np.random.default_rng(seed).random((stages, n_layers + 1))


def rollout(mdp, policy: Policy, s0, stages, seed=0, discount=0.9, uniforms=None) -> RolloutTrace:
    """Simulate ``stages`` steps of ``policy`` on ``mdp`` from ``s0``.

    Every stage consumes one row of ``uniforms``: column 0 picks the action
    (stochastic policies only), the rest drive each layer's transition by
    inverse-CDF sampling, so two policies fed the same draws share their
    randomness layer by layer.
    """
    if policy.n_states != mdp.n_states:
        raise PolicyCoverageError(f"policy covers {policy.n_states} states, model has {mdp.n_states}")
    if uniforms is None:
        uniforms = draw_uniforms(mdp.n_layers, stages, seed)
    R = mdp.rewards()
    probs = None if policy.is_deterministic else np.cumsum(policy.probs(), axis=1)
    states = np.empty(stages, dtype=np.int64)
    actions = np.empty(stages, dtype=np.int64)
    rewards = np.empty(stages)
    s = int(s0)
    for k in range(stages):
        u = uniforms[k]
        if probs is None:
            a = int(policy.actions[s])
        else:
            a = min(int(np.searchsorted(probs[s], u[0], side="right")), mdp.n_actions - 1)
        states[k], actions[k], rewards[k] = s, a, R[s, a]
        s = _step(mdp, s, a, u[1:])
    return RolloutTrace(states, actions, rewards, discount)


def _step(mdp, s, a, u):
    if hasattr(mdp, "sample_next"):
        return mdp.sample_next(s, a, u)
    cdf = np.cumsum(mdp.transition_row(s, a))
    return min(int(np.searchsorted(cdf, u[-1], side="right")), len(cdf) - 1)


def batch_means_ci(x, n_batches=20, level=0.95):
    """Half-width of a batch-means confidence interval for ``mean(x)``."""
    x = np.asarray(x, dtype=float)
    n_batches = min(n_batches, len(x))
    if n_batches < 2:
        return float("inf")
    usable = len(x) - len(x) % n_batches
    means = x[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(stats.t.ppf(0.5 + level / 2, n_batches - 1) * means.std(ddof=1) / np.sqrt(n_batches))


def stationary_average_reward(mdp, policy, s0, tol=1e-13, max_steps=1_000_000):
    """Long-run average reward of ``policy`` started at ``s0``.

    Iterates the lazy chain ``d <- (d + d P) / 2``, which has the same
    stationary distribution and is aperiodic.
    """
    P, r = policy_kernel(mdp, policy)
    d = np.zeros(mdp.n_states)
    d[s0] = 1.0
    for _ in range(max_steps):
        nxt = 0.5 * (d + d @ P)
        if np.max(np.abs(nxt - d)) < tol:
            d = nxt
            break
        d = nxt
    return float(d @ r), d


@dataclass
class Comparison:
    """``delta_r`` is the mean per-stage reward of B minus that of A along
    common random numbers; ``value_gap`` is ``V(A) - V(B)`` per state."""

    delta_r: float
    half_width: float
    value_gap: np.ndarray
    average_a: float
    average_b: float
    stationary_gap: float | None = None


def compare_policies(mdp, policy_a, policy_b, s0, stages, seed, discount,
                     with_stationary=False) -> Comparison:
    u = draw_uniforms(mdp.n_layers, stages, seed)
    ta = rollout(mdp, policy_a, s0, stages, discount=discount, uniforms=u)
    tb = rollout(mdp, policy_b, s0, stages, discount=discount, uniforms=u)
    diff = tb.rewards - ta.rewards
    va = evaluate_policy(mdp, policy_a, discount).flat()
    vb = evaluate_policy(mdp, policy_b, discount).flat()
    gap = None
    if with_stationary:
        gap = stationary_average_reward(mdp, policy_b, s0)[0] - stationary_average_reward(mdp, policy_a, s0)[0]
    return Comparison(float(np.mean(diff)), batch_means_ci(diff), va - vb,
                      ta.average_reward, tb.average_reward, gap)
