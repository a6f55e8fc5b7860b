"""Finite-state, finite-action discounted MDPs.

Two model classes share one duck-typed interface (``n_states``,
``n_actions``, ``state_shape``, ``rewards()``, ``expected(V)``,
``transition_row(s, a)``, ``joint_action(a)``):

* :class:`TabularMDP` holds a dense ``P[s, a, s']`` and ``R[s, a]``.
* :class:`FactoredMDP` holds a layered model whose kernel is a chain of
  per-layer conditionals, the lower ones driven by external actions only and
  the top one by the top external action and the whole internal profile.

The solvers here (policy evaluation, value iteration) know nothing about
layers; they are the reference the layered engine is checked against.
"""

from __future__ import annotations

import csv
import string
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidDiscountError, InvalidPolicyError, ModelContractError

ROW_TOL = 1e-12
KERNEL_TOL = 1e-10
DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_SWEEPS = 10_000


class JointAction(NamedTuple):
    """Per-layer external and internal action indices (layer 1 first)."""

    external: tuple[int, ...]
    internal: tuple[int, ...]


def check_discount(discount):
    if not 0.0 <= discount < 1.0:
        raise InvalidDiscountError(f"discount must lie in [0, 1), got {discount!r}")


def stopping_threshold(tolerance, discount):
    """Sup-norm residual below which the value error is at most ``tolerance``."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if discount == 0.0:
        return np.inf
    return tolerance * (1.0 - discount) / discount


def format_real(x):
    return format(float(x), ".17g")


def check_rows(array, tol, what):
    """Raise ModelContractError unless the last axis holds distributions."""
    array = np.asarray(array, dtype=float)
    if np.any(array < 0.0) or np.any(array > 1.0) or not np.all(np.isfinite(array)):
        raise ModelContractError(f"{what}: probabilities outside [0, 1]")
    sums = array.sum(axis=-1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ModelContractError(f"{what}: row {idx} sums to {sums[idx]!r}")


# --------------------------------------------------------------------------
# value tables and policies


@dataclass
class ValueTable:
    """Real values over a (partial or full) joint state grid.

    ``values`` is shaped by the per-coordinate state counts. ``prefix_length``
    records how many leading layers the table covers (``None`` means all).
    """

    values: np.ndarray
    prefix_length: int | None = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("value table contains non-finite entries")

    @property
    def shape(self):
        return self.values.shape

    def __getitem__(self, state):
        return float(self.values[tuple(state)])

    def flat(self):
        return self.values.reshape(-1)

    def max_abs_diff(self, other):
        other = other.values if isinstance(other, ValueTable) else np.asarray(other)
        return float(np.max(np.abs(self.values - other.reshape(self.values.shape))))

    def to_csv(self, path, columns=None, comments=()):
        columns = list(columns or [f"s{i + 1}" for i in range(self.values.ndim)])
        with open(path, "w", newline="") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns + ["value"])
            for idx in np.ndindex(*self.values.shape):
                writer.writerow([*idx, format_real(self.values[idx])])

    @classmethod
    def from_csv(cls, path, prefix_length=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(line for line in fh if not line.startswith("#")))
        header, body = rows[0], rows[1:]
        ndim = len(header) - 1
        coords = np.array([[int(x) for x in row[:ndim]] for row in body], dtype=int)
        shape = tuple(coords.max(axis=0) + 1) if len(body) else (0,) * ndim
        values = np.empty(shape)
        for row, c in zip(body, coords):
            values[tuple(c)] = float(row[ndim])
        return cls(values, prefix_length)


class Policy:
    """Stationary Markov policy over flat state and action indices.

    Deterministic policies store one action per state; stochastic ones a
    row-stochastic matrix ``probs[s, a]``.
    """

    def __init__(self, n_actions, actions=None, probs=None):
        if (actions is None) == (probs is None):
            raise ValueError("give exactly one of actions or probs")
        self.n_actions = int(n_actions)
        if actions is not None:
            self.actions = np.asarray(actions, dtype=np.int64).reshape(-1)
            if np.any(self.actions < 0) or np.any(self.actions >= self.n_actions):
                raise InvalidPolicyError("action index out of range")
            self._probs = None
        else:
            probs = np.asarray(probs, dtype=float)
            if probs.ndim != 2 or probs.shape[1] != self.n_actions:
                raise InvalidPolicyError("probs must be [n_states, n_actions]")
            if np.any(probs < 0) or not np.all(np.isfinite(probs)):
                raise InvalidPolicyError("negative or non-finite action probability")
            sums = probs.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > ROW_TOL):
                bad = int(np.argmax(np.abs(sums - 1.0)))
                raise InvalidPolicyError(f"row {bad} sums to {sums[bad]!r}")
            self.actions = None
            self._probs = probs

    @classmethod
    def deterministic(cls, actions, n_actions):
        return cls(n_actions, actions=actions)

    @classmethod
    def stochastic(cls, probs):
        probs = np.asarray(probs, dtype=float)
        return cls(probs.shape[1], probs=probs)

    @property
    def is_deterministic(self):
        return self.actions is not None

    @property
    def n_states(self):
        return len(self.actions) if self.is_deterministic else self._probs.shape[0]

    def probs(self):
        if self._probs is not None:
            return self._probs
        out = np.zeros((len(self.actions), self.n_actions))
        out[np.arange(len(self.actions)), self.actions] = 1.0
        return out

    def support(self, s):
        """(action, probability) pairs with positive mass at state ``s``."""
        if self.is_deterministic:
            return [(int(self.actions[s]), 1.0)]
        row = self._probs[s]
        return [(int(a), float(row[a])) for a in np.flatnonzero(row > 0)]

    def __eq__(self, other):
        if not isinstance(other, Policy) or self.n_actions != other.n_actions:
            return NotImplemented
        if self.is_deterministic and other.is_deterministic:
            return bool(np.array_equal(self.actions, other.actions))
        return bool(np.array_equal(self.probs(), other.probs()))


# --------------------------------------------------------------------------
# models


class TabularMDP:
    """Dense MDP: ``transitions[s, a, s']`` and ``rewards[s, a]``."""

    def __init__(self, transitions, rewards, state_shape=None):
        P = np.asarray(transitions, dtype=float)
        R = np.asarray(rewards, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise ValueError("expected P[S, A, S] and R[S, A]")
        check_rows(P, KERNEL_TOL, "transition kernel")
        self._P, self._R = P, R
        self.state_shape = tuple(state_shape) if state_shape else (P.shape[0],)
        if int(np.prod(self.state_shape)) != P.shape[0]:
            raise ValueError("state_shape does not match the kernel")

    n_layers = 1

    @property
    def n_states(self):
        return self._P.shape[0]

    @property
    def n_actions(self):
        return self._P.shape[1]

    def rewards(self):
        return self._R

    def expected(self, V):
        return self._P @ np.asarray(V, dtype=float).reshape(-1)

    def transition_row(self, s, a):
        return self._P[s, a]

    def joint_action(self, a):
        return JointAction((int(a),), (0,))

    def action_index(self, action):
        return int(action.external[0])


class RewardModel:
    """Stage reward ``R = g(s, b) - sum λ^b d_l(s_l, b_l) - sum λ^a c_l(s_l, a_l)``.

    ``gain`` is indexed ``[flat state, flat internal profile]``; per-layer cost
    arrays are ``[S_l, A_l]`` (external) and ``[S_l, B_l]`` (internal). The
    internal reward is the first two terms, the external reward the negated
    third, and :meth:`reward` subtracts in the same order so that
    ``internal_reward + external_reward`` reproduces it bit for bit.
    """

    def __init__(self, state_shape, gain, external_costs, internal_costs,
                 external_multipliers, internal_multipliers):
        self.state_shape = tuple(state_shape)
        self.gain = np.asarray(gain, dtype=float)
        self.external_costs = [np.asarray(c, dtype=float) for c in external_costs]
        self.internal_costs = [np.asarray(d, dtype=float) for d in internal_costs]
        self.external_multipliers = [float(x) for x in external_multipliers]
        self.internal_multipliers = [float(x) for x in internal_multipliers]
        self.n_external = tuple(c.shape[1] for c in self.external_costs)
        self.n_internal = tuple(d.shape[1] for d in self.internal_costs)
        L = len(self.state_shape)
        if not (len(self.external_costs) == len(self.internal_costs) == L):
            raise ValueError("one cost array per layer is required")
        if self.gain.shape != (int(np.prod(self.state_shape)), int(np.prod(self.n_internal))):
            raise ValueError("gain must be [n_states, n_internal_profiles]")

    def _coords(self, s):
        return np.unravel_index(s, self.state_shape) if np.isscalar(s) else tuple(s)

    def internal_cost_sum(self, s, b):
        coords = self._coords(s)
        total = self.internal_multipliers[0] * self.internal_costs[0][coords[0], b[0]]
        for l in range(1, len(coords)):
            total = total + self.internal_multipliers[l] * self.internal_costs[l][coords[l], b[l]]
        return float(total)

    def external_cost_sum(self, s, a):
        coords = self._coords(s)
        total = self.external_multipliers[0] * self.external_costs[0][coords[0], a[0]]
        for l in range(1, len(coords)):
            total = total + self.external_multipliers[l] * self.external_costs[l][coords[l], a[l]]
        return float(total)

    def _gain(self, s, b):
        coords = self._coords(s)
        flat_s = int(np.ravel_multi_index(tuple(int(c) for c in coords), self.state_shape))
        flat_b = int(np.ravel_multi_index(tuple(b), self.n_internal))
        return float(self.gain[flat_s, flat_b])

    def internal_reward(self, s, b):
        return self._gain(s, b) - self.internal_cost_sum(s, b)

    def external_reward(self, s, a):
        return -self.external_cost_sum(s, a)

    def reward(self, s, a, b):
        return self._gain(s, b) - self.internal_cost_sum(s, b) - self.external_cost_sum(s, a)

    def table(self):
        """Rewards as ``[flat state, flat external profile, flat internal profile]``."""
        L = len(self.state_shape)
        grid_s = np.indices(self.state_shape).reshape(L, -1)
        grid_a = np.indices(self.n_external).reshape(L, -1)
        grid_b = np.indices(self.n_internal).reshape(L, -1)
        int_sum = self.internal_multipliers[0] * self.internal_costs[0][grid_s[0][:, None], grid_b[0][None, :]]
        ext_sum = self.external_multipliers[0] * self.external_costs[0][grid_s[0][:, None], grid_a[0][None, :]]
        for l in range(1, L):
            int_sum = int_sum + self.internal_multipliers[l] * self.internal_costs[l][grid_s[l][:, None], grid_b[l][None, :]]
            ext_sum = ext_sum + self.external_multipliers[l] * self.external_costs[l][grid_s[l][:, None], grid_a[l][None, :]]
        return (self.gain - int_sum)[:, None, :] - ext_sum[:, :, None]


class FactoredMDP:
    """MDP whose kernel factors layer by layer.

    Parameters
    ----------
    state_shape : per-layer state counts ``(S_1, ..., S_L)``.
    lower_factors : for layer ``l < L`` (0-based ``i``) an array shaped
        ``state_shape[:i] + (S_i, A_i, S_i)``: ``p(s'_i | s'_{<i}, s_i, a_i)``.
        Leading next-state dimensions may have size 1 and are broadcast.
    top_kernels : ``[K, *state_shape[:-1], S_L]``; kernel ``k`` is
        ``p(s'_L | s'_{<L}, ...)`` for every (state, top external action,
        internal profile) that ``top_key`` maps to ``k``.
    top_key : ``[n_states, A_L, n_internal_profiles]`` integer array.
    reward_model : :class:`RewardModel`.

    Joint actions are flattened as ``ext_index * B + internal_index`` with
    both profiles raveled in layer order.
    """

    def __init__(self, state_shape, lower_factors, top_kernels, top_key, reward_model):
        self.state_shape = tuple(int(x) for x in state_shape)
        L = self.n_layers = len(self.state_shape)
        self.reward_model = reward_model
        self.n_external = reward_model.n_external
        self.n_internal = reward_model.n_internal
        self.n_ext_profiles = int(np.prod(self.n_external))
        self.n_int_profiles = int(np.prod(self.n_internal))
        if len(lower_factors) != L - 1:
            raise ValueError("need one factor per non-top layer")
        self._lower = []
        for i, F in enumerate(lower_factors):
            shape = self.state_shape[:i] + (self.state_shape[i], self.n_external[i], self.state_shape[i])
            F = np.broadcast_to(np.asarray(F, dtype=float), shape).copy()
            check_rows(F, ROW_TOL, f"layer {i + 1} transition factor")
            self._lower.append(F)
        top = np.asarray(top_kernels, dtype=float)
        K = top.shape[0]
        self._top = np.broadcast_to(top, (K,) + self.state_shape).copy()
        check_rows(self._top, ROW_TOL, "top-layer transition factor")
        self.top_key = np.asarray(top_key, dtype=np.int64)
        if self.top_key.shape != (self.n_states, self.n_external[-1], self.n_int_profiles):
            raise ValueError("top_key has the wrong shape")
        if self.top_key.min() < 0 or self.top_key.max() >= K:
            raise ValueError("top_key refers to a missing kernel")
        # flat position of (s_1, a_1, ..., s_{L-1}, a_{L-1}) in the contracted tensor
        coords = np.indices(self.state_shape).reshape(L, -1)
        dims, grids = [], []
        lower_ext = np.indices(self.n_external[:-1]).reshape(L - 1, -1) if L > 1 else np.zeros((0, 1), int)
        for i in range(L - 1):
            dims += [self.state_shape[i], self.n_external[i]]
            grids += [coords[i][:, None], lower_ext[i][None, :]]
        if grids:
            self._pos = np.ravel_multi_index(np.broadcast_arrays(*grids), dims)
        else:
            self._pos = np.zeros((self.n_states, 1), dtype=np.int64)
        self._rewards = None
        self._lower_cdf = [np.cumsum(F, axis=-1) for F in self._lower]
        self._top_cdf = np.cumsum(self._top, axis=-1)

    # -- sizes and index helpers

    @property
    def n_states(self):
        return int(np.prod(self.state_shape))

    @property
    def n_actions(self):
        return self.n_ext_profiles * self.n_int_profiles

    def state_coords(self, s):
        return tuple(int(c) for c in np.unravel_index(int(s), self.state_shape))

    def state_index(self, coords):
        return int(np.ravel_multi_index(tuple(coords), self.state_shape))

    def joint_action(self, a):
        ext, b = divmod(int(a), self.n_int_profiles)
        return JointAction(
            tuple(int(x) for x in np.unravel_index(ext, self.n_external)),
            tuple(int(x) for x in np.unravel_index(b, self.n_internal)),
        )

    def action_index(self, action):
        ext = int(np.ravel_multi_index(tuple(action.external), self.n_external))
        b = int(np.ravel_multi_index(tuple(action.internal), self.n_internal))
        return ext * self.n_int_profiles + b

    # -- factor queries

    def lower_factor(self, layer):
        """``p(s'_l | s'_{<l}, s_l, a_l)`` for 1-based ``layer < L``."""
        return self._lower[layer - 1]

    def top_kernel(self, s, a_top, b_flat):
        return self._top[self.top_key[s, a_top, b_flat]]

    # -- the solver interface

    def rewards(self):
        if self._rewards is None:
            self._rewards = self.reward_model.table().reshape(self.n_states, self.n_actions)
        return self._rewards

    def expected(self, V):
        """``E[V(s') | s, a]`` for every flat state and joint action."""
        L = self.n_layers
        V = np.asarray(V, dtype=float).reshape(self.state_shape)
        W = np.einsum("k...x,...x->k...", self._top, V)
        letters = iter(string.ascii_letters)
        prefix_pool = [next(letters) for _ in range(L)]
        rest_pool = [next(letters) for _ in range(2 * L)]
        for i in range(L - 2, -1, -1):
            pre = "".join(prefix_pool[:i])
            n_rest = W.ndim - 2 - i
            rest = "".join(rest_pool[:n_rest])
            W = np.einsum(f"{pre}YZX,K{pre}X{rest}->K{pre}YZ{rest}", self._lower[i], W)
        Wf = W.reshape(W.shape[0], -1)
        A_top = self.n_external[-1]
        E = Wf[self.top_key[:, None, :, :], self._pos[:, :, None, None]]
        return E.reshape(self.n_states, -1, A_top, self.n_int_profiles).reshape(self.n_states, self.n_actions)

    def transition_row(self, s, a):
        coords = self.state_coords(s)
        act = self.joint_action(a)
        dist = np.ones(())
        for i in range(self.n_layers - 1):
            F = self._lower[i][(Ellipsis, coords[i], act.external[i], slice(None))]
            dist = dist[..., None] * F
        b_flat = int(a) % self.n_int_profiles
        dist = dist[..., None] * self.top_kernel(s, act.external[-1], b_flat)
        return dist.reshape(-1)

    def sample_next(self, s, a, uniforms):
        """Next flat state by per-layer inverse-CDF sampling.

        ``uniforms`` holds one U(0, 1) draw per layer; sharing these draws
        between two policies gives common random numbers at every layer.
        """
        coords = self.state_coords(s)
        ext_flat, b_flat = divmod(int(a), self.n_int_profiles)
        ext = np.unravel_index(ext_flat, self.n_external)
        nxt = []
        for i in range(self.n_layers - 1):
            row = self._lower_cdf[i][tuple(nxt) + (coords[i], int(ext[i]))]
            nxt.append(min(int(np.searchsorted(row, uniforms[i], side="right")), len(row) - 1))
        k = self.top_key[s, int(ext[-1]), b_flat]
        row = self._top_cdf[(k, *nxt)]
        nxt.append(min(int(np.searchsorted(row, uniforms[-1], side="right")), len(row) - 1))
        return self.state_index(nxt)


# --------------------------------------------------------------------------
# solvers


@dataclass
class SolveResult:
    values: ValueTable
    policy: Policy | None
    converged: bool
    sweeps: int
    residuals: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)

    @property
    def last_residual(self):
        return self.residuals[-1] if self.residuals else float("nan")


def q_values(mdp, V, discount):
    return mdp.rewards() + discount * mdp.expected(V)


def value_iteration(mdp, discount=0.9, tolerance=DEFAULT_TOLERANCE,
                    max_sweeps=DEFAULT_MAX_SWEEPS, min_sweeps=1, initial=None):
    """Centralized value iteration over pure joint actions.

    Stops once the sup-norm change between sweeps drops below
    ``tolerance * (1 - γ) / γ``; the returned policy is greedy with respect
    to the final table, ties going to the lowest action index. If
    ``max_sweeps`` runs out first the result comes back with
    ``converged=False``.
    """
    check_discount(discount)
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be at least 1")
    threshold = stopping_threshold(tolerance, discount)
    V = np.zeros(mdp.n_states) if initial is None else np.asarray(initial, float).reshape(-1).copy()
    residuals, evaluations = [], []
    converged = False
    sweeps = 0
    while sweeps < max_sweeps:
        V_new = q_values(mdp, V, discount).max(axis=1)
        sweeps += 1
        residuals.append(float(np.max(np.abs(V_new - V))))
        evaluations.append(mdp.n_states * mdp.n_actions)
        V = V_new
        if residuals[-1] < threshold and sweeps >= min_sweeps:
            converged = True
            break
    greedy = np.argmax(q_values(mdp, V, discount), axis=1)
    return SolveResult(
        values=ValueTable(V.reshape(mdp.state_shape)),
        policy=Policy.deterministic(greedy, mdp.n_actions),
        converged=converged,
        sweeps=sweeps,
        residuals=residuals,
        evaluations=evaluations,
    )


def bellman_backup(mdp, V, s, discount):
    """``max_a R(s, a) + γ E[V(s')]`` at one flat state, with its argmax."""
    check_discount(discount)
    V = V.values if isinstance(V, ValueTable) else V
    if isinstance(mdp, TabularMDP):
        q = mdp.rewards()[s] + discount * (mdp._P[s] @ np.asarray(V, float).reshape(-1))
    else:
        q = mdp.rewards()[s] + discount * mdp.expected(V)[s]
    a = int(np.argmax(q))
    return float(q[a]), mdp.joint_action(a)


def policy_kernel(mdp, policy):
    """Transition matrix and reward vector of the chain induced by ``policy``."""
    if policy.n_states != mdp.n_states or policy.n_actions != mdp.n_actions:
        raise InvalidPolicyError("policy does not match the model's state/action sets")
    R = mdp.rewards()
    P = np.zeros((mdp.n_states, mdp.n_states))
    r = np.zeros(mdp.n_states)
    for s in range(mdp.n_states):
        for a, w in policy.support(s):
            P[s] += w * mdp.transition_row(s, a)
            r[s] += w * R[s, a]
    return P, r


def evaluate_policy(mdp, policy, discount, tolerance=DEFAULT_TOLERANCE,
                    method="direct", max_sweeps=1_000_000):
    """State values of a fixed policy.

    ``method="direct"`` solves ``(I - γ P_π) V = r_π``; ``"iterative"``
    applies the recursion until successive sweeps differ by less than
    ``tolerance * (1 - γ) / γ``.
    """
    check_discount(discount)
    threshold = stopping_threshold(tolerance, discount)
    P, r = policy_kernel(mdp, policy)
    if method == "direct":
        V = np.linalg.solve(np.eye(mdp.n_states) - discount * P, r)
    elif method == "iterative":
        V = np.zeros(mdp.n_states)
        for _ in range(max_sweeps):
            V_new = r + discount * (P @ V)
            done = np.max(np.abs(V_new - V)) < threshold
            V = V_new
            if done:
                break
    else:
        raise ValueError(f"unknown method {method!r}")
    return ValueTable(V.reshape(mdp.state_shape))


def discounted_return(rewards: Sequence[float], discount):
    """``sum_k γ^k r_k`` accumulated front to back."""
    total, weight = 0.0, 1.0
    for r in rewards:
        total += weight * r
        weight *= discount
    return total


@dataclass
class ContractionVerdict:
    ok: bool
    failed_sweep: int | None = None
    message: str = ""


def contraction_residuals(residuals, discount, slack=1e-10):
    """Check ``r_{n+1} <= γ r_n + slack`` along a residual history."""
    residuals = list(residuals)
    if len(residuals) < 3:
        raise ValueError("need at least three recorded sweeps")
    for n in range(1, len(residuals)):
        if residuals[n] > discount * residuals[n - 1] + slack:
            return ContractionVerdict(
                False, n + 1,
                f"sweep {n + 1}: residual {residuals[n]:.3e} > "
                f"{discount} * {residuals[n - 1]:.3e}",
            )
    return ContractionVerdict(True)
