"""End-to-end experiment drivers shared by the CLI and the acceptance tests."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import StackConfig
from .errors import ConfigError, PolicyCoverageError
from .layered import (
    LayeredEngine, layered_value_iteration, pooled_frontier_prior,
    simplified1_joint_policy, simplified1_value_iteration, simplified2_value_iteration,
)
from .layers import stack_to_mdp
from .mdp import Policy, ValueTable, evaluate_policy, format_real, stopping_threshold, value_iteration
from .toy import two_state_stack
from .wireless import build_reference_stack

MODES = ("centralized", "layered", "simplified1", "simplified2")


@dataclass
class Model:
    config: StackConfig
    layers: list
    mdp: object
    s0: int
    columns: list
    describe: Callable
    lower_external: tuple      # constant lower-layer actions for simplification 1
    lower_internal: tuple
    pinned_external: int       # top external action for simplification 2
    _engine: LayeredEngine | None = None

    @property
    def engine(self):
        if self._engine is None:
            self._engine = LayeredEngine(self.layers)
        return self._engine

    def header(self, seed=None):
        line = f"config_sha256={self.config.sha256}"
        return [line if seed is None else f"{line} seed={seed}"]


def build_model(cfg: StackConfig) -> Model:
    if cfg.solver.model == "toy":
        layers = two_state_stack()
        mdp = stack_to_mdp(layers)
        return Model(cfg, layers, mdp, 0, ["link", "app"],
                     lambda s: mdp.state_coords(s), (0,), (0,), 0)
    ref = build_reference_stack(cfg)
    sv = cfg.solver
    b1 = ref.phy_action_index(sv.simplified1_modulation, sv.simplified1_power_w)
    return Model(
        cfg, ref.layers, ref.mdp, ref.initial_state(),
        ["phy", "mac"] + [f"app{j + 1}" for j in range(cfg.app.lifetime)],
        ref.describe_state,
        (0, sv.simplified1_bid), (b1, sv.simplified1_retries),
        cfg.app.arrival_means.index(sv.simplified2_arrival),
    )


@dataclass
class Solution:
    mode: str
    discount: float
    values: ValueTable
    policy: Policy
    converged: bool
    residuals: list
    evaluations: list


def solve(model: Model, mode: str, discount: float | None = None) -> Solution:
    sv = model.config.solver
    gamma = sv.discount if discount is None else discount
    mdp = model.mdp
    if mode == "centralized":
        res = value_iteration(mdp, gamma, sv.tolerance, sv.max_sweeps)
        return Solution(mode, gamma, res.values, res.policy, res.converged, res.residuals, res.evaluations)
    if mode == "layered":
        res = layered_value_iteration(model.layers, gamma, sv.tolerance, sv.max_sweeps, engine=model.engine)
        return Solution(mode, gamma, res.values, res.layered_policy.to_policy(mdp), res.converged,
                        res.residuals, res.evaluations)
    if mode == "simplified1":
        prior = pooled_frontier_prior(model.layers)
        _, top_pol, residuals = simplified1_value_iteration(model.layers[-1], prior, gamma, sv.tolerance, sv.max_sweeps)
        pol = simplified1_joint_policy(mdp, top_pol, model.lower_external, model.lower_internal)
        return Solution(mode, gamma, evaluate_policy(mdp, pol, gamma, sv.tolerance), pol,
                        residuals[-1] < stopping_threshold(sv.tolerance, gamma), residuals, [])
    if mode == "simplified2":
        res = simplified2_value_iteration(model.layers, model.pinned_external, gamma, sv.tolerance, sv.max_sweeps)
        return Solution(mode, gamma, res.values, res.layered_policy.to_policy(mdp), res.converged,
                        res.residuals, res.evaluations)
    raise ConfigError("mode", f"unknown solver mode {mode!r}")


# --------------------------------------------------------------------------
# file formats


def write_rows(path, header_lines, columns, rows):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_real(x) if isinstance(x, (float, np.floating)) else x for x in row])


def write_policy(path, model: Model, policy: Policy, header):
    mdp = model.mdp
    L = len(model.layers)
    cols = model.columns + ["action"] + [f"ext{l + 1}" for l in range(L)] + [f"int{l + 1}" for l in range(L)]
    rows = []
    for s in range(mdp.n_states):
        a = int(policy.actions[s])
        ja = mdp.joint_action(a)
        rows.append([*model.describe(s), a, *ja.external, *ja.internal])
    write_rows(path, header, cols, rows)


def read_policy(path, model: Model) -> Policy:
    mdp = model.mdp
    lookup = {tuple(model.describe(s)): s for s in range(mdp.n_states)}
    actions = np.full(mdp.n_states, -1, dtype=np.int64)
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        k = header.index("action")
        for row in reader:
            s = lookup.get(tuple(int(x) for x in row[:k]))
            if s is None:
                raise PolicyCoverageError(f"policy row {row[:k]} is not a model state")
            actions[s] = int(row[k])
    missing = np.flatnonzero(actions < 0)
    if len(missing):
        raise PolicyCoverageError(f"policy does not cover state {model.describe(int(missing[0]))}")
    return Policy.deterministic(actions, mdp.n_actions)


def write_values(path, model: Model, values: dict, header):
    names = list(values)
    rows = []
    for s in range(model.mdp.n_states):
        rows.append([*model.describe(s), *(float(np.asarray(values[n]).reshape(-1)[s]) for n in names)])
    write_rows(path, header, model.columns + names, rows)


def write_residuals(path, sol: Solution, header):
    evals = sol.evaluations or [""] * len(sol.residuals)
    write_rows(path, header, ["sweep", "residual", "evaluations"],
               [[i + 1, float(r), e] for i, (r, e) in enumerate(zip(sol.residuals, evals))])


def save_solution(outdir, model: Model, sol: Solution):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    header = model.header() + [f"mode={sol.mode} discount={sol.discount!r}"]
    write_values(out / f"values_{sol.mode}.csv", model, {"value": sol.values.flat()}, header)
    write_policy(out / f"policy_{sol.mode}.csv", model, sol.policy, header)
    write_residuals(out / f"residuals_{sol.mode}.csv", sol, header)
