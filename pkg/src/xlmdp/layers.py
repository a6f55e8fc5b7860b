"""Protocol-layer descriptions, QoS composition and frontier construction.

A stack is a list of :class:`LayerSpec`, layer 1 first. Every layer owns a
state set, external actions (which drive its own state) and internal actions
(which shape the service it hands upward). Lower layers carry a transition
factor ``p(s'_l | s'_{<l}, s_l, a_l)``; the top layer instead carries a gain
and a transition callback, both driven by the QoS triple it receives.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ModelContractError
from .mdp import FactoredMDP, RewardModel, ROW_TOL, check_rows
from .qos import Frontier, QosTriple, dominates, prune_to_frontier, weakly_dominates


@dataclass
class LayerSpec:
    """One protocol layer.

    ``service(s_l, b_l, lower)`` returns ``(loss, time)``; ``lower`` is the
    triple from the layer below, or ``None`` at layer 1. A missing service
    map passes loss and time through unchanged. The cost component is
    always accumulated as ``lower.cost + internal_multiplier * internal_cost``.

    For the top layer, ``gain(s_L, Z)`` is the application gain (the internal
    reward is ``gain - Z.cost``), ``top_transition(s_L, a_L, Z)`` returns
    ``p(s'_L | s'_{<L}, ...)`` broadcastable to ``[*S_{<L}, S_L]``, and the
    optional ``transition_key(s_L, a_L, Z)`` must map arguments with equal
    transition rows to equal hashable keys.
    """

    name: str
    n_states: int
    external_cost: np.ndarray
    internal_cost: np.ndarray
    external_multiplier: float = 1.0
    internal_multiplier: float = 1.0
    transition: np.ndarray | None = None
    service: Callable | None = None
    gain: Callable | None = None
    top_transition: Callable | None = None
    transition_key: Callable | None = None

    def __post_init__(self):
        self.external_cost = np.atleast_2d(np.asarray(self.external_cost, dtype=float))
        self.internal_cost = np.atleast_2d(np.asarray(self.internal_cost, dtype=float))
        if self.external_cost.shape[0] != self.n_states or self.internal_cost.shape[0] != self.n_states:
            raise ValueError(f"{self.name}: cost arrays must have one row per state")
        if self.transition is not None:
            self.transition = np.asarray(self.transition, dtype=float)
            check_rows(self.transition, ROW_TOL, f"{self.name} transition factor")

    @property
    def n_external(self):
        return self.external_cost.shape[1]

    @property
    def n_internal(self):
        return self.internal_cost.shape[1]

    @property
    def is_top(self):
        return self.gain is not None


def no_op_costs(n_states):
    """Cost array for a layer with a single zero-cost no-op action."""
    return np.zeros((n_states, 1))


def qos_compose(layer: LayerSpec, s_l, b_l, lower: QosTriple | None) -> QosTriple:
    """Service of ``layer`` at state ``s_l`` under internal action ``b_l``."""
    extra = layer.internal_multiplier * layer.internal_cost[s_l, b_l]
    if layer.service is None:
        if lower is None:
            raise ModelContractError(f"{layer.name}: a base layer needs a service map")
        loss, time = lower.loss, lower.time
    else:
        loss, time = layer.service(s_l, b_l, lower)
    cost = extra if lower is None else lower.cost + extra
    try:
        return QosTriple(float(loss), float(time), float(cost))
    except ModelContractError as exc:
        raise ModelContractError(f"{layer.name} service at s={s_l}, b={b_l}: {exc}") from None


def internal_reward(top: LayerSpec, s_top, z: QosTriple):
    return top.gain(s_top, z) - z.cost


class FrontierBuilder:
    """Memoized per-prefix frontiers for one stack.

    ``frontier(level, prefix)`` returns the optimal frontier of the service
    that layer ``level`` offers when the lower layers are in ``prefix``
    (length ``level``). With ``check_property`` set, every candidate pruned at
    one level is composed against a dominating survivor under every internal
    action of the next layer; a composed pair that loses its order raises
    :class:`ModelContractError`.
    """

    def __init__(self, stack: Sequence[LayerSpec], check_property=True):
        self.stack = list(stack)
        self.check_property = check_property
        self._cache = {}

    def frontier(self, level, prefix) -> Frontier:
        prefix = tuple(int(x) for x in prefix)
        if len(prefix) != level:
            raise ValueError("prefix length must equal the level")
        key = (level, prefix)
        if key not in self._cache:
            self._cache[key] = self._build(level, prefix)
        return self._cache[key]

    def _build(self, level, prefix):
        layer = self.stack[level - 1]
        s_l = prefix[-1]
        candidates = []
        if level == 1:
            for b in range(layer.n_internal):
                candidates.append((qos_compose(layer, s_l, b, None), (b,)))
        else:
            lower = self.frontier(level - 1, prefix[:-1])
            for z, prov in lower:
                for b in range(layer.n_internal):
                    candidates.append((qos_compose(layer, s_l, b, z), prov + (b,)))
        front = prune_to_frontier(candidates, prefix)
        if self.check_property and level < len(self.stack):
            self._check_preservation(level, front, candidates)
        return front

    def _check_preservation(self, level, front, candidates):
        upper = self.stack[level]
        if upper.service is None:
            return
        survivors = front.elements
        kept = set(front.provenance)
        for z, prov in candidates:
            if prov in kept:
                continue
            dom = next(w for w in survivors if weakly_dominates(w, z))
            for s_up in range(upper.n_states):
                for b in range(upper.n_internal):
                    cz = qos_compose(upper, s_up, b, z)
                    cw = qos_compose(upper, s_up, b, dom)
                    if not weakly_dominates(cw, cz):
                        raise ModelContractError(
                            f"{upper.name} breaks QoS preservation at s={s_up}, b={b}: "
                            f"{dom} >= {z} but {cw} vs {cz}")


def build_frontier(stack, level, states, check_property=True) -> Frontier:
    return FrontierBuilder(stack, check_property).frontier(level, states)


def all_profiles_qos(stack, prefix):
    """Every internal-action profile of ``stack[:len(prefix)]`` with its triple."""
    out = []
    ranges = [range(layer.n_internal) for layer in stack[:len(prefix)]]
    for profile in itertools.product(*ranges):
        z = None
        for layer, s_l, b in zip(stack, prefix, profile):
            z = qos_compose(layer, s_l, b, z)
        out.append((z, profile))
    return out


@dataclass
class EquivalenceVerdict:
    ok: bool
    frontier_max: float
    exhaustive_max: float
    witness: tuple | None = None


def frontier_equivalence_check(stack, s, builder: FrontierBuilder | None = None, tol=1e-12):
    """Compare the frontier maximum of the internal reward with the maximum
    over every internal-action profile at joint state ``s``."""
    top = stack[-1]
    s = tuple(int(x) for x in s)
    builder = builder or FrontierBuilder(stack, check_property=False)
    front = builder.frontier(len(stack), s)
    f_max = max(internal_reward(top, s[-1], z) for z in front.elements)
    best, witness = -np.inf, None
    for z, profile in all_profiles_qos(stack, s):
        r = internal_reward(top, s[-1], z)
        if r > best:
            best, witness = r, profile
    ok = abs(f_max - best) <= tol
    return EquivalenceVerdict(ok, f_max, best, None if ok else witness)


def reward_monotonicity_violations(stack, builder: FrontierBuilder | None = None):
    """Pairs of top-level triples where the dominating one earns less.

    Checks every ordered pair drawn from the candidate sets of all lower
    prefixes, at every top state.
    """
    top = stack[-1]
    builder = builder or FrontierBuilder(stack, check_property=False)
    lower_shape = tuple(layer.n_states for layer in stack[:-1])
    violations = []
    for prefix in np.ndindex(*lower_shape):
        zs = [z for z, _ in all_profiles_qos(stack[:-1], prefix)]
        zs = sorted(set(zs), key=lambda z: z.as_tuple())
        arr = np.array([z.as_tuple() for z in zs])
        le = np.all(arr[:, None, :] <= arr[None, :, :], axis=2)
        pairs = np.argwhere(le & ~np.eye(len(zs), dtype=bool))
        for s_top in range(top.n_states):
            for b in range(top.n_internal):
                comp = [qos_compose(top, s_top, b, z) for z in zs]
                r = np.array([internal_reward(top, s_top, z) for z in comp])
                bad = r[pairs[:, 0]] < r[pairs[:, 1]]
                for i, j in pairs[bad]:
                    violations.append((prefix, s_top, b, zs[i], zs[j]))
    return violations


def stack_shape(stack):
    return tuple(layer.n_states for layer in stack)


def _top_kernel(top, s_top, a_top, z, lower_shape):
    row = np.broadcast_to(np.asarray(top.top_transition(s_top, a_top, z), dtype=float),
                          lower_shape + (top.n_states,))
    return row


def stack_to_mdp(stack: Sequence[LayerSpec]) -> FactoredMDP:
    """Assemble the centralized model: every internal profile is kept, no
    frontier pruning, rewards and kernels built straight from the specs."""
    stack = list(stack)
    L = len(stack)
    top = stack[-1]
    shape = stack_shape(stack)
    lower_shape = shape[:-1]
    n_int = tuple(layer.n_internal for layer in stack)
    B = int(np.prod(n_int))
    S = int(np.prod(shape))

    # triples for every (lower prefix, lower profile), composed level by level
    qos = {(): {(): None}}
    for i, layer in enumerate(stack[:-1]):
        nxt = {}
        for prefix, table in qos.items():
            for s_l in range(layer.n_states):
                out = {}
                for prov, z in table.items():
                    for b in range(layer.n_internal):
                        out[prov + (b,)] = qos_compose(layer, s_l, b, z)
                nxt[prefix + (s_l,)] = out
        qos = nxt

    gain = np.empty((S, B))
    top_key = np.empty((S, top.n_external, B), dtype=np.int64)
    key_index, kernels = {}, []
    lower_profiles = list(itertools.product(*[range(n) for n in n_int[:-1]]))
    for s_flat, s in enumerate(np.ndindex(*shape)):
        s_top = s[-1]
        table = qos[s[:-1]]
        for j_low, prov in enumerate(lower_profiles):
            for b_top in range(top.n_internal):
                z = qos_compose(top, s_top, b_top, table[prov])
                b_flat = j_low * top.n_internal + b_top
                gain[s_flat, b_flat] = top.gain(s_top, z)
                for a in range(top.n_external):
                    key = (top.transition_key(s_top, a, z) if top.transition_key
                           else (s_top, a, z.as_tuple()))
                    k = key_index.get(key)
                    if k is None:
                        k = key_index[key] = len(kernels)
                        kernels.append(_top_kernel(top, s_top, a, z, lower_shape))
                    top_key[s_flat, a, b_flat] = k

    rewards = RewardModel(
        shape, gain,
        [layer.external_cost for layer in stack],
        [layer.internal_cost for layer in stack],
        [layer.external_multiplier for layer in stack],
        [layer.internal_multiplier for layer in stack],
    )
    lower = []
    for i, layer in enumerate(stack[:-1]):
        lower.append(layer.transition.reshape((1,) * (i - layer.transition.ndim + 3) + layer.transition.shape))
    return FactoredMDP(shape, lower, np.stack(kernels), top_key, rewards)
