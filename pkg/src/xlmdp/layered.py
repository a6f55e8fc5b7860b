"""Layered value iteration driven by upward frontiers and downward value messages.

Each layer runs its own sub-iteration and sees only its own spec. Lower
layers report their optimal QoS frontiers upward once (the frontiers do not
depend on the sweep). Each sweep then passes value information strictly from
the top layer down to layer 1:

* the top layer scores every candidate ``(a_L, Z)`` from its frontier and
  turns it into a table over the next lower-layer states ``s'_{<L}``;
* layer ``l`` averages each incoming table over its own next state ``s'_l``
  under each of its external actions and subtracts the action cost;
* layer 1 ends up with one scalar per surviving combination and maximizes.

A downward message therefore carries a *set* of tagged tables per joint
state rather than a single pointwise-maximized table. Maximizing pointwise
before averaging (``exchange="as-printed"``) swaps a max and an expectation
and overestimates the value whenever the best top-layer choice depends on
the lower layers' next states; that variant is kept for comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ArchitectureViolation, ModelContractError
from .layers import FrontierBuilder, LayerSpec, internal_reward, qos_compose, stack_shape
from .mdp import (
    DEFAULT_MAX_SWEEPS, DEFAULT_TOLERANCE, JointAction, Policy, SolveResult,
    ValueTable, check_discount, stopping_threshold,
)
from .qos import Frontier, QosTriple, prune_to_frontier, weakly_dominates


# --------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class UpwardMessage:
    """Frontiers sent from ``layer`` to ``layer + 1``, keyed by state prefix.

    ``pruned[prefix]`` lists every discarded triple with the index of a
    frontier element that dominates it, so the receiving layer can confirm
    that its own service map keeps the order.
    """

    layer: int
    frontiers: dict
    pruned: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "layer": self.layer,
            "frontiers": [
                {"prefix": list(f.prefix),
                 "elements": [[repr(x) for x in z.as_tuple()] for z in f.elements],
                 "provenance": [list(p) for p in f.provenance],
                 "pruned": [[[repr(x) for x in z.as_tuple()], j] for z, j in self.pruned.get(f.prefix, ())]}
                for f in self.frontiers.values()
            ],
        })

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        fronts, pruned = {}, {}
        for f in data["frontiers"]:
            prefix = tuple(f["prefix"])
            fronts[prefix] = Frontier(
                tuple(QosTriple(*(float(x) for x in z)) for z in f["elements"]),
                tuple(tuple(p) for p in f["provenance"]),
                prefix,
            )
            pruned[prefix] = tuple((QosTriple(*(float(x) for x in z)), j) for z, j in f["pruned"])
        return cls(data["layer"], fronts, pruned)


@dataclass(frozen=True)
class DownwardMessage:
    """Tagged value tables sent from ``layer`` to ``layer - 1``.

    ``tables[s, m, ...]`` is the value of combination ``m`` at current joint
    state ``s`` as a function of the next states of layers ``1..layer-1``;
    ``valid[s, m]`` masks padding. ``tags`` encodes the choices made so far.
    """

    layer: int
    tables: np.ndarray
    valid: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        for arr in (self.tables, self.valid, self.tags):
            arr.setflags(write=False)

    def to_json(self):
        return json.dumps({
            "layer": self.layer,
            "shape": list(self.tables.shape),
            "tables": [repr(float(x)) for x in self.tables.reshape(-1)],
            "valid": self.valid.astype(int).reshape(-1).tolist(),
            "tags": self.tags.reshape(-1).tolist(),
        })

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        shape = tuple(data["shape"])
        tables = np.array([float(x) for x in data["tables"]]).reshape(shape)
        valid = np.array(data["valid"], dtype=bool).reshape(shape[:2])
        tags = np.array(data["tags"], dtype=np.int64).reshape(shape[:2])
        return cls(data["layer"], tables, valid, tags)


# --------------------------------------------------------------------------
# per-layer agents


def _prune(cands, prefix):
    """Frontier of ``cands`` plus ``(dropped triple, dominating index)`` pairs."""
    front = prune_to_frontier(cands, prefix)
    kept = set(front.provenance)
    dropped = []
    for z, prov in cands:
        if prov not in kept:
            j = next(i for i, w in enumerate(front.elements) if weakly_dominates(w, z))
            dropped.append((z, j))
    return front, tuple(dropped)


class _Agent:
    """Base class: holds one layer's spec and nothing else."""

    def __init__(self, spec: LayerSpec, position: int, n_layers: int, own_state):
        self._spec = spec
        self.position = position
        self.n_layers = n_layers
        self._own_state = np.asarray(own_state, dtype=np.int64)

    @property
    def n_external(self):
        return self._spec.n_external

    def spec_for(self, caller):
        if caller is not self:
            raise ArchitectureViolation(f"layer {self.position} spec read by another layer")
        return self._spec

    def _check_preservation(self, incoming: UpwardMessage, prefix, s_l):
        """Own service must keep every reported dominance pair in order."""
        spec = self._spec
        if spec.service is None:
            return
        front = incoming.frontiers[prefix]
        for z, j in incoming.pruned.get(prefix, ()):
            w = front.elements[j]
            for b in range(spec.n_internal):
                cz = qos_compose(spec, s_l, b, z)
                cw = qos_compose(spec, s_l, b, w)
                if not weakly_dominates(cw, cz):
                    raise ModelContractError(
                        f"{spec.name} breaks QoS preservation at s={s_l}, b={b}: "
                        f"{w} >= {z} but {cw} vs {cz}")


class LowerAgent(_Agent):
    """A layer below the top: builds its frontier, averages over its own next state."""

    def upward(self, incoming: UpwardMessage | None, prefixes):
        spec = self._spec
        fronts, pruned = {}, {}
        for prefix in prefixes:
            s_l = prefix[-1]
            if incoming is None:
                cands = [(qos_compose(spec, s_l, b, None), (b,)) for b in range(spec.n_internal)]
            else:
                self._check_preservation(incoming, prefix[:-1], s_l)
                lower = incoming.frontiers[prefix[:-1]]
                cands = [(qos_compose(spec, s_l, b, z), prov + (b,))
                         for z, prov in lower for b in range(spec.n_internal)]
            fronts[prefix], pruned[prefix] = _prune(cands, prefix)
        return UpwardMessage(self.position, fronts, pruned)

    def downward(self, incoming: DownwardMessage, exchange="value-set"):
        """Contract the incoming tables over this layer's next state."""
        spec = self._spec
        i = self.position - 1
        F = spec.transition
        F = F.reshape((1,) * (i + 3 - F.ndim) + F.shape)
        F = F[..., self._own_state, :, :]                  # [*pre, S, A, X]
        F = np.moveaxis(F, -3, 0)                          # [S, *pre, A, X]
        A = spec.n_external
        T = incoming.tables                                # [S, M, *pre, X]
        pre_ndim = T.ndim - 3
        F = np.broadcast_to(F, (F.shape[0],) + T.shape[2:-1] + (A, T.shape[-1]))
        pre = "".join(chr(ord("a") + k) for k in range(pre_ndim))
        out = np.einsum(f"S{pre}Ax,SM{pre}x->SMA{pre}", F, T)
        cost = spec.external_multiplier * spec.external_cost[self._own_state]  # [S, A]
        out = out - cost.reshape(cost.shape[:1] + (1, A) + (1,) * pre_ndim)
        S, M = T.shape[:2]
        if exchange == "as-printed":
            return DownwardMessage(self.position, out.max(axis=2), incoming.valid, incoming.tags)
        tables = out.reshape((S, M * A) + out.shape[3:])
        valid = np.repeat(incoming.valid, A, axis=1)
        tags = (incoming.tags[:, :, None] * A + np.arange(A)).reshape(S, M * A)
        return DownwardMessage(self.position, tables, valid, tags)

    def evaluations(self, incoming: DownwardMessage):
        return int(incoming.valid.sum()) * self._spec.n_external


@dataclass
class TopCandidates:
    """Per joint state: collapsed candidates ``(a_L, frontier index)`` with the
    best stage reward among all candidates sharing a transition row."""

    stage: np.ndarray      # [S, M]
    key: np.ndarray        # [S, M] index into the kernel bank
    valid: np.ndarray      # [S, M]
    action: np.ndarray     # [S, M] top external action
    element: np.ndarray    # [S, M] frontier index
    uncollapsed: int


class TopAgent(_Agent):
    """The top layer: composes the reported frontier with its own internal
    actions and scores every (external action, triple) candidate."""

    def __init__(self, spec, position, n_layers, own_state, lower_shape):
        super().__init__(spec, position, n_layers, own_state)
        self.lower_shape = tuple(lower_shape)
        self.frontiers = None
        self.candidates = None
        self._kernels = None

    def absorb(self, incoming: UpwardMessage | None, states):
        """Build the top frontier per joint state and the candidate table."""
        spec = self._spec
        fronts = []
        for s in states:
            s_top = s[-1]
            if incoming is None:
                cands = [(qos_compose(spec, s_top, b, None), (b,)) for b in range(spec.n_internal)]
            else:
                self._check_preservation(incoming, tuple(s[:-1]), s_top)
                lower = incoming.frontiers[tuple(s[:-1])]
                cands = [(qos_compose(spec, s_top, b, z), prov + (b,))
                         for z, prov in lower for b in range(spec.n_internal)]
            fronts.append(prune_to_frontier(cands, tuple(s)))
        self.frontiers = fronts
        key_index, kernels = {}, []
        rows, total = [], 0
        for s, front in zip(states, fronts):
            s_top = s[-1]
            best = {}
            for a in range(spec.n_external):
                ext = spec.external_multiplier * spec.external_cost[s_top, a]
                for j, z in enumerate(front.elements):
                    total += 1
                    key = (spec.transition_key(s_top, a, z) if spec.transition_key
                           else (s_top, a, z.as_tuple()))
                    k = key_index.get(key)
                    if k is None:
                        k = key_index[key] = len(kernels)
                        kernels.append(np.broadcast_to(
                            np.asarray(spec.top_transition(s_top, a, z), dtype=float),
                            self.lower_shape + (spec.n_states,)))
                    r = internal_reward(spec, s_top, z) - ext
                    if k not in best or r > best[k][0]:
                        best[k] = (r, a, j)
            rows.append(sorted((k, v) for k, v in best.items()))
        M = max(len(r) for r in rows)
        S = len(states)
        stage = np.zeros((S, M))
        key = np.zeros((S, M), dtype=np.int64)
        valid = np.zeros((S, M), dtype=bool)
        action = np.zeros((S, M), dtype=np.int64)
        element = np.zeros((S, M), dtype=np.int64)
        for s, row in enumerate(rows):
            # order candidates by (action, frontier index) for deterministic ties
            row = sorted(row, key=lambda kv: (kv[1][1], kv[1][2]))
            for m, (k, (r, a, j)) in enumerate(row):
                stage[s, m], key[s, m], valid[s, m] = r, k, True
                action[s, m], element[s, m] = a, j
        self._kernels = np.stack(kernels)
        self.candidates = TopCandidates(stage, key, valid, action, element, total)

    def downward(self, V_prev, discount, exchange="value-set"):
        c = self.candidates
        V = np.asarray(V_prev, dtype=float).reshape(self.lower_shape + (self._spec.n_states,))
        W = np.einsum("k...x,...x->k...", self._kernels, V)       # [K, *S_{<L}]
        tables = c.stage.reshape(c.stage.shape + (1,) * len(self.lower_shape)) + discount * W[c.key]
        tags = np.broadcast_to(np.arange(c.stage.shape[1]), c.stage.shape).copy()
        if exchange == "as-printed":
            masked = np.where(c.valid.reshape(c.valid.shape + (1,) * len(self.lower_shape)), tables, -np.inf)
            best = masked.max(axis=1, keepdims=True)
            return DownwardMessage(self.position, best, np.ones(best.shape[:2], dtype=bool),
                                   np.zeros(best.shape[:2], dtype=np.int64))
        return DownwardMessage(self.position, np.where(
            c.valid.reshape(c.valid.shape + (1,) * len(self.lower_shape)), tables, 0.0), c.valid, tags)

    def evaluations(self):
        return int(self.candidates.valid.sum())

    def choice(self, s, m):
        c = self.candidates
        j = int(c.element[s, m])
        front = self.frontiers[s]
        return int(c.action[s, m]), front.elements[j], front.provenance[j]


# --------------------------------------------------------------------------
# policies and results


@dataclass
class LayeredPolicy:
    """Per joint state: the top layer's ``(a_L, Z, provenance)`` and the
    external action of every lower layer."""

    state_shape: tuple
    lower_actions: np.ndarray      # [S, L-1]
    top_action: np.ndarray         # [S]
    top_qos: list
    provenance: list

    def joint_action(self, s):
        ext = tuple(int(x) for x in self.lower_actions[s]) + (int(self.top_action[s]),)
        return JointAction(ext, tuple(self.provenance[s]))

    def to_policy(self, mdp) -> Policy:
        actions = [mdp.action_index(self.joint_action(s)) for s in range(mdp.n_states)]
        return Policy.deterministic(actions, mdp.n_actions)


@dataclass
class LayeredResult(SolveResult):
    layered_policy: LayeredPolicy | None = None
    uncollapsed_evaluations: int = 0
    messages: tuple = ()


class LayeredEngine:
    """Wires per-layer agents together; all inter-layer data goes through
    :class:`UpwardMessage` and :class:`DownwardMessage`."""

    def __init__(self, stack: Sequence[LayerSpec]):
        stack = list(stack)
        if not stack[-1].is_top:
            raise ValueError("the last layer must define gain and top_transition")
        self.shape = stack_shape(stack)
        self.L = len(stack)
        self.states = list(np.ndindex(*self.shape))
        coords = np.array(self.states, dtype=np.int64).reshape(len(self.states), self.L)
        self.lower_agents = [LowerAgent(spec, i + 1, self.L, coords[:, i]) for i, spec in enumerate(stack[:-1])]
        self.top = TopAgent(stack[-1], self.L, self.L, coords[:, -1], self.shape[:-1])
        self.upward_messages = self._upward_pass()
        self.top.absorb(self.upward_messages[-2] if self.L > 1 else None, self.states)

    def _upward_pass(self):
        msgs, incoming = [], None
        for i, agent in enumerate(self.lower_agents):
            prefixes = list(np.ndindex(*self.shape[:i + 1]))
            incoming = agent.upward(incoming, prefixes)
            msgs.append(incoming)
        msgs.append(None)
        return msgs

    def uncollapsed_evaluations(self):
        """Per-sweep count if candidates sharing a transition row were not merged."""
        total = n = self.top.candidates.uncollapsed
        for agent in reversed(self.lower_agents):
            n *= agent.n_external
            total += n
        return total

    def sweep(self, V_prev, discount, exchange="value-set"):
        """One top-down pass. Returns the new values, layer-1's final message,
        the downward messages (index ``l-1`` is the one sent by layer ``l``)
        and the number of action evaluations."""
        msg = self.top.downward(V_prev, discount, exchange)
        down = [None] * self.L
        down[self.L - 1] = msg
        count = self.top.evaluations()
        for agent in reversed(self.lower_agents):
            count += agent.evaluations(msg)
            msg = agent.downward(msg, exchange)
            down[agent.position - 1] = msg
        values = np.where(msg.valid, msg.tables, -np.inf).max(axis=1)
        return values, msg, down, count

    def decode(self, final: DownwardMessage):
        """Lowest-tag argmax at layer 1, unpacked into every layer's choice."""
        masked = np.where(final.valid, final.tables, -np.inf)
        best = np.argmax(masked, axis=1)
        tag = final.tags[np.arange(len(best)), best]
        S = len(self.states)
        lower = np.zeros((S, self.L - 1), dtype=np.int64)
        for agent in self.lower_agents:
            lower[:, agent.position - 1] = tag % agent.n_external
            tag = tag // agent.n_external
        top_action, top_qos, prov = np.zeros(S, dtype=np.int64), [], []
        for s in range(S):
            a, z, p = self.top.choice(s, int(tag[s]))
            top_action[s] = a
            top_qos.append(z)
            prov.append(p)
        return LayeredPolicy(self.shape, lower, top_action, top_qos, prov)


def exchange_messages(engine: LayeredEngine, V_prev, discount):
    """Messages of one sweep: ``(upward, downward)``, each a list of length L.

    ``upward[l-1]`` is sent by layer ``l`` (empty for the top layer);
    ``downward[l-1]`` is sent by layer ``l`` to ``l-1`` (empty for layer 1).
    """
    _, _, down, _ = engine.sweep(V_prev, discount)
    downward = [None] + down[1:]
    return list(engine.upward_messages), downward


def layered_value_iteration(stack, discount=0.9, tolerance=DEFAULT_TOLERANCE,
                            max_sweeps=DEFAULT_MAX_SWEEPS, exchange="value-set",
                            engine: LayeredEngine | None = None):
    """Value iteration carried out as per-layer sub-iterations.

    With the default ``exchange="value-set"`` the result equals centralized
    value iteration on the same stack. ``exchange="as-printed"`` maximizes
    pointwise at each layer; it returns an upper bound and no policy.
    """
    check_discount(discount)
    if exchange not in ("value-set", "as-printed"):
        raise ValueError(f"unknown exchange {exchange!r}")
    engine = engine or LayeredEngine(stack)
    threshold = stopping_threshold(tolerance, discount)
    V = np.zeros(len(engine.states))
    residuals, evaluations = [], []
    converged, sweeps, final = False, 0, None
    while sweeps < max_sweeps:
        V_new, final, _, count = engine.sweep(V, discount, exchange)
        if not np.all(np.isfinite(V_new)):
            raise ModelContractError(f"non-finite value at sweep {sweeps + 1}")
        sweeps += 1
        residuals.append(float(np.max(np.abs(V_new - V))))
        evaluations.append(count)
        V = V_new
        if residuals[-1] < threshold:
            converged = True
            break
    lpol = None
    if exchange == "value-set":
        # greedy with respect to the final table, like the centralized solver
        _, final, _, _ = engine.sweep(V, discount, exchange)
        lpol = engine.decode(final)
    return LayeredResult(
        values=ValueTable(V.reshape(engine.shape)),
        policy=None,
        converged=converged,
        sweeps=sweeps,
        residuals=residuals,
        evaluations=evaluations,
        layered_policy=lpol,
        uncollapsed_evaluations=engine.uncollapsed_evaluations(),
    )


# --------------------------------------------------------------------------
# simplified solvers


def pooled_frontier_prior(stack, level=None):
    """Uniform weights over the distinct triples of every level-``level``
    frontier (default: the one just below the top), pooled over all prefixes."""
    level = level or len(stack) - 1
    builder = FrontierBuilder(stack, check_property=False)
    seen = {}
    for prefix in np.ndindex(*stack_shape(stack)[:level]):
        for z, _ in builder.frontier(level, prefix):
            seen.setdefault(z.as_tuple(), z)
    zs = [seen[k] for k in sorted(seen)]
    return [(z, 1.0 / len(zs)) for z in zs]


@dataclass
class TopOnlyPolicy:
    """Simplified policy of the top layer: ``(a_L, b_L)`` per top state."""

    external: np.ndarray
    internal: np.ndarray


def _top_row(top, s_top, a, z):
    row = np.asarray(top.top_transition(s_top, a, z), dtype=float)
    flat = row.reshape(-1, row.shape[-1])
    if not np.all(flat == flat[0]):
        raise ModelContractError("top transition depends on the lower layers' next states")
    return flat[0]


def simplified1_value_iteration(top_layer: LayerSpec, qos_prior, discount=0.9,
                                tolerance=DEFAULT_TOLERANCE, max_sweeps=DEFAULT_MAX_SWEEPS):
    """Top-layer-only value iteration with the lower service treated as random.

    ``qos_prior`` is a sequence of ``(QosTriple, weight)``. Each candidate
    ``(a_L, b_L)`` is scored by the prior-weighted stage reward plus the
    discounted prior-weighted next-state value; only ``s_L`` is tracked.
    """
    check_discount(discount)
    prior = list(qos_prior)
    if not prior:
        raise ModelContractError("simplified solver needs a non-empty QoS prior")
    weights = np.array([w for _, w in prior], dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError("QoS prior weights must be non-negative and sum to 1")
    top = top_layer
    S, A, B = top.n_states, top.n_external, top.n_internal
    stage = np.zeros((S, A, B))
    P = np.zeros((S, A, B, S))
    for s in range(S):
        for b in range(B):
            comp = [qos_compose(top, s, b, z) for z, _ in prior]
            r_in = np.array([internal_reward(top, s, z) for z in comp])
            for a in range(A):
                ext = top.external_multiplier * top.external_cost[s, a]
                stage[s, a, b] = weights @ r_in - ext
                P[s, a, b] = weights @ np.array([_top_row(top, s, a, z) for z in comp])
    threshold = stopping_threshold(tolerance, discount)
    V = np.zeros(S)
    residuals = []
    for _ in range(max_sweeps):
        Q = stage + discount * (P @ V)
        V_new = Q.reshape(S, -1).max(axis=1)
        residuals.append(float(np.max(np.abs(V_new - V))))
        V = V_new
        if residuals[-1] < threshold:
            break
    flat = np.argmax((stage + discount * (P @ V)).reshape(S, -1), axis=1)
    a, b = np.divmod(flat, B)
    return ValueTable(V), TopOnlyPolicy(a, b), residuals


def simplified1_joint_policy(mdp, top_policy: TopOnlyPolicy, lower_external, lower_internal):
    """Full-stack policy: lower layers hold constant actions, the top layer
    follows ``top_policy`` on its own state."""
    actions = []
    for s in range(mdp.n_states):
        s_top = mdp.state_coords(s)[-1]
        ja = JointAction(tuple(lower_external) + (int(top_policy.external[s_top]),),
                         tuple(lower_internal) + (int(top_policy.internal[s_top]),))
        actions.append(mdp.action_index(ja))
    return Policy.deterministic(actions, mdp.n_actions)


def pin_top_actions(top: LayerSpec, external: int, internal: int = 0) -> LayerSpec:
    """Copy of the top layer with one external and one internal action left."""
    def service(s, b, lower):
        return top.service(s, internal, lower) if top.service else (lower.loss, lower.time)

    return LayerSpec(
        name=f"{top.name}-pinned",
        n_states=top.n_states,
        external_cost=top.external_cost[:, [external]],
        internal_cost=top.internal_cost[:, [internal]],
        external_multiplier=top.external_multiplier,
        internal_multiplier=top.internal_multiplier,
        service=service if top.service else None,
        gain=top.gain,
        top_transition=lambda s, a, z: top.top_transition(s, external, z),
        transition_key=(lambda s, a, z: top.transition_key(s, external, z)) if top.transition_key else None,
    )


def simplified2_value_iteration(stack, external: int, discount=0.9,
                                tolerance=DEFAULT_TOLERANCE, max_sweeps=DEFAULT_MAX_SWEEPS,
                                internal: int = 0):
    """Layered value iteration with the top layer's actions pinned; the top
    maximizes over reported triples only. The returned policy is expressed in
    the original stack's action indices."""
    stack = list(stack)
    restricted = stack[:-1] + [pin_top_actions(stack[-1], external, internal)]
    res = layered_value_iteration(restricted, discount, tolerance, max_sweeps)
    pol = res.layered_policy
    pol.top_action[:] = external
    pol.provenance = [p[:-1] + (internal,) for p in pol.provenance]
    return res
