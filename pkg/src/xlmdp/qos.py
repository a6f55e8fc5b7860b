"""QoS triples, dominance and optimal-frontier pruning.

A triple ``(loss, time, cost)`` summarizes the service a layer offers the
layer above. Smaller is better in every component, so ``z`` dominates ``w``
when it is componentwise no larger and differs somewhere.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCandidateError, ModelContractError


@dataclass(frozen=True, order=True)
class QosTriple:
    loss: float
    time: float
    cost: float

    def __post_init__(self):
        for name in ("loss", "time", "cost"):
            if not math.isfinite(getattr(self, name)):
                raise ModelContractError(f"QoS {name} is not finite: {getattr(self, name)!r}")
        if not 0.0 <= self.loss <= 1.0:
            raise ModelContractError(f"QoS loss {self.loss!r} outside [0, 1]")
        if self.loss < 1.0 and not self.time > 0.0:
            raise ModelContractError(f"QoS time {self.time!r} must be positive")
        if self.cost < 0.0:
            raise ModelContractError(f"QoS cost {self.cost!r} is negative")

    def as_tuple(self):
        return (self.loss, self.time, self.cost)


def dominates(z: QosTriple, w: QosTriple) -> bool:
    """Componentwise ``z <= w`` with at least one strict inequality."""
    return (z.loss <= w.loss and z.time <= w.time and z.cost <= w.cost) and z != w


def pareto_equivalent(z: QosTriple, w: QosTriple) -> bool:
    return not dominates(z, w) and not dominates(w, z)


def weakly_dominates(z: QosTriple, w: QosTriple) -> bool:
    """Componentwise ``z <= w`` (dominance or equality)."""
    return z.loss <= w.loss and z.time <= w.time and z.cost <= w.cost


@dataclass(frozen=True)
class Frontier:
    """Mutually non-dominated triples with the internal-action profile that
    produced each one. ``prefix`` is the state prefix the frontier belongs to."""

    elements: tuple
    provenance: tuple
    prefix: tuple = ()

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(zip(self.elements, self.provenance))

    def as_array(self):
        return np.array([z.as_tuple() for z in self.elements], dtype=float).reshape(-1, 3)


def _dominated_mask(arr):
    """Row ``i`` is True when some other row dominates it (O(n^2) numpy)."""
    le = np.all(arr[:, None, :] <= arr[None, :, :], axis=2)     # le[j, i]: j <= i
    lt = np.any(arr[:, None, :] < arr[None, :, :], axis=2)
    return np.any(le & lt, axis=0)


def prune_to_frontier(candidates: Iterable, prefix=(), epsilon: float = 0.0) -> Frontier:
    """Keep exactly the non-dominated candidates.

    ``candidates`` is an iterable of ``(QosTriple, provenance)`` pairs with
    tuple provenances. Identical triples keep only the lexicographically
    smallest provenance. With ``epsilon > 0`` a candidate is also dropped
    when a kept one is within ``epsilon`` of it in every component (off by
    default; this makes the frontier approximate).
    """
    items = sorted(((tuple(p), z) for z, p in candidates), key=lambda t: t[0])
    if not items:
        raise EmptyCandidateError("cannot build a frontier from no candidates")
    seen, unique = set(), []
    for prov, z in items:
        if z.as_tuple() in seen:
            continue
        seen.add(z.as_tuple())
        unique.append((prov, z))
    arr = np.array([z.as_tuple() for _, z in unique], dtype=float)
    keep = ~_dominated_mask(arr)
    kept = [unique[i] for i in np.flatnonzero(keep)]
    if epsilon > 0.0:
        thinned = []
        for prov, z in sorted(kept, key=lambda t: t[1].as_tuple()):
            if any(all(a <= b + epsilon for a, b in zip(k.as_tuple(), z.as_tuple())) for _, k in thinned):
                continue
            thinned.append((prov, z))
        kept = sorted(thinned, key=lambda t: t[0])
    return Frontier(tuple(z for _, z in kept), tuple(p for p, _ in kept), tuple(prefix))


def brute_force_frontier(candidates: Sequence):
    """Reference pruning by direct pairwise ``dominates`` calls."""
    out = []
    for z, p in candidates:
        if any(dominates(w, z) for w, _ in candidates):
            continue
        clash = [q for w, q in candidates if w == z]
        if tuple(p) != min(tuple(q) for q in clash):
            continue
        out.append((z, tuple(p)))
    return sorted(out, key=lambda t: t[1])


def frontier_to_csv(frontiers, path, prefix_columns=None, comments=()):
    """Write frontiers as ``prefix..., loss, time_s, cost, provenance`` rows."""
    frontiers = list(frontiers)
    width = max((len(f.prefix) for f in frontiers), default=0)
    prefix_columns = list(prefix_columns or [f"s{i + 1}" for i in range(width)])
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(prefix_columns + ["loss", "time_s", "cost", "provenance"])
        for f in frontiers:
            for z, prov in f:
                writer.writerow([*f.prefix, *(format(x, ".17g") for x in z.as_tuple()),
                                 "-".join(str(int(b)) for b in prov)])
