"""Tabular actor-critic, centralized and layered.

The critic is a state-value table updated with the TD error; the actor
keeps a tendency per action and samples through a Gibbs softmax. In the
layered form every layer keeps its own actor over its own action slot
(the top layer over ``(a_L, Z)`` pairs from its frontier) and its own
critic over next-state prefixes; the per-layer TD errors telescope to the
centralized one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergedRunError
from .layers import internal_reward
from .layered import LayeredEngine, LayeredPolicy
from .mdp import JointAction, Policy, format_real


def gibbs_softmax(tendencies):
    rho = np.asarray(tendencies, dtype=float)
    z = np.exp(rho - np.max(rho))
    return z / z.sum()


def td_error_centralized(r, V, s, s_next, discount):
    return r + discount * V[s_next] - V[s]


def critic_update_centralized(V, s, delta, alpha):
    V[s] += alpha * delta
    return V


def actor_update_centralized(rho, s, action, delta, beta, prob=None):
    """Bump ``rho[s][action]`` by ``β δ (1 - ξ)``; ``ξ`` defaults to the
    current softmax probability of the action."""
    if prob is None:
        prob = gibbs_softmax(rho[s])[action]
    rho[s][action] += beta * delta * (1.0 - prob)
    return rho


# --------------------------------------------------------------------------
# layered pieces


@dataclass
class LayeredCritics:
    """``prefix[l-1]`` is the table over next-state prefixes of length ``l``
    (``l = 1..L-1``), ``full`` the joint-state table."""

    prefix: list
    full: np.ndarray

    @classmethod
    def zeros(cls, shape):
        return cls([np.zeros(shape[:l]) for l in range(1, len(shape))], np.zeros(shape))


@dataclass
class StageData:
    """One observed stage, with joint states as coordinate tuples."""

    state: tuple
    next_state: tuple
    top_reward: float              # R_in(s_L, Z) - λ_L c_L(s_L, a_L)
    lower_costs: tuple             # λ_l c_l(s_l, a_l) for l = 1..L-1


def layered_td_errors(stage: StageData, critics: LayeredCritics, discount):
    """Per-layer TD errors ``[δ_1, ..., δ_L]``.

    top:    u + γ V(s') - V_{L-1}(s'_{<L})
    middle: -λ_l c_l + V_l(s'_{<=l}) - V_{l-1}(s'_{<l})
    bottom: -λ_1 c_1 + V_1(s'_1) - V(s)
    """
    L = len(stage.state)
    s, sn = tuple(stage.state), tuple(stage.next_state)
    if L == 1:
        return [stage.top_reward + discount * critics.full[sn] - critics.full[s]]
    V = critics.prefix
    deltas = [0.0] * L
    deltas[L - 1] = stage.top_reward + discount * critics.full[sn] - V[L - 2][sn[:L - 1]]
    for l in range(2, L):
        deltas[l - 1] = -stage.lower_costs[l - 1] + V[l - 1][sn[:l]] - V[l - 2][sn[:l - 1]]
    deltas[0] = -stage.lower_costs[0] + V[0][sn[:1]] - critics.full[s]
    return deltas


def layered_critic_update(critics: LayeredCritics, stage: StageData, deltas, alpha, discount):
    """Prefix table ``l`` moves by ``α δ_{l+1}``; the joint table by the
    centralized TD error. ``alpha`` is a scalar or one step per table
    (prefix tables first, joint table last)."""
    L = len(stage.state)
    steps = np.broadcast_to(np.asarray(alpha, dtype=float), (L,))
    s, sn = tuple(stage.state), tuple(stage.next_state)
    full_delta = stage.top_reward - sum(stage.lower_costs) + discount * critics.full[sn] - critics.full[s]
    for l in range(1, L):
        critics.prefix[l - 1][sn[:l]] += steps[l - 1] * deltas[l]
    critics.full[s] += steps[L - 1] * full_delta
    return critics


def layered_actor_update(actors, slots, deltas, beta, probs=None):
    """``actors[l][slot]`` moves by ``β δ_l (1 - p)`` for each layer ``l``.

    ``actors[l]`` is the tendency vector of layer ``l`` at the current state,
    ``slots[l]`` the chosen entry and ``probs[l]`` its pre-update softmax
    probability (computed here when omitted).
    """
    for l, (rho, j, d) in enumerate(zip(actors, slots, deltas)):
        if d == 0.0:
            continue
        p = gibbs_softmax(rho)[j] if probs is None else probs[l]
        rho[j] += beta * d * (1.0 - p)
    return actors


# --------------------------------------------------------------------------
# runs


@dataclass
class LearningRun:
    seed: int
    mode: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    running_average: np.ndarray
    greedy_policy: Policy | None = None
    critic: np.ndarray | None = None
    tendencies: object = None

    @property
    def stages(self):
        return len(self.rewards)

    def tail_average(self, n):
        return float(np.mean(self.rewards[-n:]))

    def to_csv(self, path, state_columns, describe, every=1, comments=()):
        with open(path, "w", newline="") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", *state_columns, "action", "reward", "running_avg_reward"])
            for k in range(0, self.stages, every):
                w.writerow([k, *describe(int(self.states[k])), int(self.actions[k]),
                            format_real(self.rewards[k]), format_real(self.running_average[k])])


def running_average(rewards):
    rewards = np.asarray(rewards, dtype=float)
    return np.cumsum(rewards) / np.arange(1, len(rewards) + 1)


def _step_size(alpha, schedule, visits):
    return alpha / visits if schedule == "visit" else alpha


def _sample(probs, u):
    return min(int(np.searchsorted(np.cumsum(probs), u, side="right")), len(probs) - 1)


def run_learning(mdp, mode="centralized", alpha=0.5, beta=5.0, discount=0.9, stages=10_000,
                 seed=0, s0=0, alpha_schedule="constant", stack=None, engine=None) -> LearningRun:
    """Actor-critic on ``mdp``'s true dynamics for ``stages`` steps.

    ``mode="layered"`` also needs the ``stack`` the model was built from (or
    a prepared :class:`LayeredEngine`) for the per-layer action slots and
    reward pieces. Identical arguments give identical runs.
    """
    if mode not in ("centralized", "layered"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    L = mdp.n_layers
    draws = rng.random((stages, L + 1))
    if mode == "centralized":
        return _run_centralized(mdp, alpha, beta, discount, stages, seed, s0, alpha_schedule, draws)
    engine = engine or LayeredEngine(stack)
    return _run_layered(mdp, engine, alpha, beta, discount, stages, seed, s0, alpha_schedule, draws)


def _run_centralized(mdp, alpha, beta, discount, stages, seed, s0, schedule, draws):
    S, A = mdp.n_states, mdp.n_actions
    R = mdp.rewards()
    V = np.zeros(S)
    rho = np.zeros((S, A))
    visits = np.zeros(S, dtype=np.int64)
    states = np.empty(stages, dtype=np.int64)
    actions = np.empty(stages, dtype=np.int64)
    rewards = np.empty(stages)
    s = int(s0)
    for k in range(stages):
        p = gibbs_softmax(rho[s])
        a = _sample(p, draws[k, 0])
        s_next = _next(mdp, s, a, draws[k, 1:])
        r = R[s, a]
        delta = td_error_centralized(r, V, s, s_next, discount)
        visits[s] += 1
        critic_update_centralized(V, s, delta, _step_size(alpha, schedule, visits[s]))
        rho[s, a] += beta * delta * (1.0 - p[a])
        if not (np.isfinite(V[s]) and np.isfinite(rho[s, a])):
            raise DivergedRunError(k)
        states[k], actions[k], rewards[k] = s, a, r
        s = s_next
    greedy = Policy.deterministic(np.argmax(rho, axis=1), A)
    return LearningRun(seed, "centralized", states, actions, rewards, running_average(rewards),
                       greedy, V, rho)


def _next(mdp, s, a, u):
    if hasattr(mdp, "sample_next"):
        return mdp.sample_next(s, a, u)
    cdf = np.cumsum(mdp.transition_row(s, a))
    return min(int(np.searchsorted(cdf, u[-1], side="right")), len(cdf) - 1)


def _run_layered(mdp, engine: LayeredEngine, alpha, beta, discount, stages, seed, s0, schedule, draws):
    shape = engine.shape
    R = mdp.rewards()
    L = len(shape)
    S = len(engine.states)
    top = engine.top
    top_spec = top.spec_for(top)
    lower_specs = [agent.spec_for(agent) for agent in engine.lower_agents]
    fronts = top.frontiers
    A_top = top_spec.n_external

    # per-state top slot rewards u(s, a_L, Z), laid out a_L-major
    top_u = []
    for s, state in enumerate(engine.states):
        s_top = state[-1]
        r_in = np.array([internal_reward(top_spec, s_top, z) for z in fronts[s].elements])
        ext = top_spec.external_multiplier * top_spec.external_cost[s_top]
        top_u.append((r_in[None, :] - ext[:, None]).reshape(-1))
    lower_cost = [spec.external_multiplier * spec.external_cost for spec in lower_specs]

    critics = LayeredCritics.zeros(shape)
    rho_top = [np.zeros(len(u)) for u in top_u]
    rho_low = [np.zeros((S, spec.n_external)) for spec in lower_specs]
    visits_prefix = [np.zeros(shape[:l], dtype=np.int64) for l in range(1, L)]
    visits_full = np.zeros(shape, dtype=np.int64)

    states = np.empty(stages, dtype=np.int64)
    actions = np.empty(stages, dtype=np.int64)
    rewards = np.empty(stages)
    s = int(s0)
    # independent sub-streams for the lower layers' action draws
    low_draws = np.random.default_rng([seed, 1]).random((stages, max(L - 1, 1)))
    for k in range(stages):
        state = engine.states[s]
        p_top = gibbs_softmax(rho_top[s])
        j_top = _sample(p_top, draws[k, 0])
        a_top, j_z = divmod(j_top, len(fronts[s]))
        p_low, a_low = [], []
        for l in range(L - 1):
            p = gibbs_softmax(rho_low[l][s])
            p_low.append(p)
            a_low.append(_sample(p, low_draws[k, l]))
        ja = JointAction(tuple(a_low) + (a_top,), fronts[s].provenance[j_z])
        a = mdp.action_index(ja)
        s_next = _next(mdp, s, a, draws[k, 1:])
        nstate = engine.states[s_next]
        costs = tuple(float(lower_cost[l][state[l], a_low[l]]) for l in range(L - 1))
        stage = StageData(state, nstate, float(top_u[s][j_top]), costs)
        deltas = layered_td_errors(stage, critics, discount)
        steps = []
        for l in range(1, L):
            visits_prefix[l - 1][nstate[:l]] += 1
            steps.append(_step_size(alpha, schedule, visits_prefix[l - 1][nstate[:l]]))
        visits_full[state] += 1
        steps.append(_step_size(alpha, schedule, visits_full[state]))
        layered_critic_update(critics, stage, deltas, steps, discount)
        layered_actor_update(
            [rho_top[s]] + [rho_low[l][s] for l in range(L - 1)],
            [j_top] + a_low,
            [deltas[L - 1]] + deltas[:L - 1],
            beta,
            [p_top[j_top]] + [p_low[l][a_low[l]] for l in range(L - 1)],
        )
        r = R[s, a]
        if not (np.isfinite(critics.full[state]) and np.all(np.isfinite(deltas))):
            raise DivergedRunError(k)
        states[k], actions[k], rewards[k] = s, a, r
        s = s_next

    lower = np.stack([np.argmax(rho_low[l], axis=1) for l in range(L - 1)], axis=1) \
        if L > 1 else np.zeros((S, 0), dtype=np.int64)
    top_action, top_qos, prov = np.zeros(S, dtype=np.int64), [], []
    for s in range(S):
        a_top, j_z = divmod(int(np.argmax(rho_top[s])), len(fronts[s]))
        top_action[s] = a_top
        top_qos.append(fronts[s].elements[j_z])
        prov.append(fronts[s].provenance[j_z])
    lpol = LayeredPolicy(shape, lower, top_action, top_qos, prov)
    return LearningRun(seed, "layered", states, actions, rewards, running_average(rewards),
                       lpol.to_policy(mdp), critics.full.reshape(-1), (rho_top, rho_low))
