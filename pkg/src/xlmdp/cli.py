"""Command-line entry point: ``xlmdp solve|simulate|compare|learn|reproduce``.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence or
diverged learning run, 4 model-contract violation (including a policy file
that does not cover the model's states).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigError, DivergedRunError, ModelContractError, PolicyCoverageError
from .experiments import (
    MODES, build_model, read_policy, save_solution, solve, write_policy, write_rows, write_values,
)
from .learning import run_learning
from .simulate import compare_policies, draw_uniforms, rollout

EXIT_OK, EXIT_CONFIG, EXIT_UNCONVERGED, EXIT_CONTRACT = 0, 2, 3, 4


class NotConverged(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="xlmdp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mode_choices=MODES, default_mode="layered"):
        sp.add_argument("--config", default=None, help="stack config file (default: shipped reference)")
        sp.add_argument("--mode", default=default_mode, choices=mode_choices)
        sp.add_argument("--gamma", type=float, default=None, help="discount (default: from config)")
        sp.add_argument("--stages", type=int, default=None, help="horizon K")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="out", help="output directory")

    common(sub.add_parser("solve", help="run a solver, write values, policy and residuals"))
    sp = sub.add_parser("simulate", help="roll out a policy on the true dynamics")
    common(sp)
    sp.add_argument("--policy", default=None, help="policy CSV (default: solve --mode first)")
    sp = sub.add_parser("compare", help="compare two policies with common random numbers")
    common(sp, default_mode="centralized")
    sp.add_argument("--policy-a", default=None)
    sp.add_argument("--policy-b", default=None)
    sp.add_argument("--mode-b", default="simplified2", choices=MODES)
    sp.add_argument("--gamma-b", type=float, default=None)
    common(sub.add_parser("learn", help="actor-critic learning run"), ("centralized", "layered"))
    common(sub.add_parser("reproduce", help="write every experiment CSV"))
    return p


def _policy(model, path, mode, gamma):
    if path:
        return read_policy(path, model)
    sol = solve(model, mode, gamma)
    if not sol.converged:
        raise NotConverged(f"{mode} solver stopped at residual {sol.residuals[-1]:.3e}")
    return sol.policy


def cmd_solve(model, args):
    sol = solve(model, args.mode, args.gamma)
    save_solution(args.out, model, sol)
    print(f"{sol.mode}: sweeps={len(sol.residuals)} residual={sol.residuals[-1]:.3e} "
          f"V(s0)={sol.values.flat()[model.s0]:.6f}")
    if not sol.converged:
        raise NotConverged(f"no convergence within {model.config.solver.max_sweeps} sweeps")


def cmd_simulate(model, args):
    sv = model.config.solver
    K, seed = args.stages or sv.horizon, sv.seed if args.seed is None else args.seed
    gamma = sv.discount if args.gamma is None else args.gamma
    pol = _policy(model, args.policy, args.mode, args.gamma)
    trace = rollout(model.mdp, pol, model.s0, K, seed=seed, discount=gamma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = model.header(seed) + [f"policy={args.policy or args.mode} s0={model.describe(model.s0)}"]
    trace.to_csv(out / f"trace_{args.mode}.csv", model.columns, model.describe, header)
    print(f"average_reward={trace.average_reward:.6f} discounted_return={trace.discounted_return:.6f}")


def cmd_compare(model, args):
    sv = model.config.solver
    K, seed = args.stages or sv.horizon, sv.seed if args.seed is None else args.seed
    gamma = sv.discount if args.gamma is None else args.gamma
    pa = _policy(model, args.policy_a, args.mode, args.gamma)
    pb = _policy(model, args.policy_b, args.mode_b, args.gamma_b)
    c = compare_policies(model.mdp, pa, pb, model.s0, K, seed, gamma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "compare.csv", model.header(seed),
               ["stages", "delta_r", "half_width_95", "average_a", "average_b",
                "min_value_gap", "max_value_gap"],
               [[K, c.delta_r, c.half_width, c.average_a, c.average_b,
                 float(c.value_gap.min()), float(c.value_gap.max())]])
    write_values(out / "compare_value_gap.csv", model, {"value_gap": c.value_gap}, model.header(seed))
    print(f"delta_r={c.delta_r:.6f} +- {c.half_width:.6f} exact_gap=[{c.value_gap.min():.6f}, {c.value_gap.max():.6f}]")


def _learn(model, mode, K, seed, gamma):
    lc = model.config.learning
    return run_learning(model.mdp, mode, lc.alpha, lc.beta, gamma, K, seed, model.s0,
                        lc.alpha_schedule, engine=model.engine if mode == "layered" else None)


def cmd_learn(model, args):
    lc, sv = model.config.learning, model.config.solver
    K, seed = args.stages or lc.stages, lc.seed if args.seed is None else args.seed
    gamma = sv.discount if args.gamma is None else args.gamma
    run = _learn(model, args.mode, K, seed, gamma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.to_csv(out / f"learning_{args.mode}.csv", model.columns, model.describe,
               every=lc.curve_every, comments=model.header(seed))
    write_policy(out / f"policy_learned_{args.mode}.csv", model, run.greedy_policy, model.header(seed))
    print(f"{args.mode}: final running average {run.running_average[-1]:.6f}")


def cmd_reproduce(model, args):
    sv, lc = model.config.solver, model.config.learning
    K, seed = args.stages or sv.horizon, sv.seed if args.seed is None else args.seed
    gamma = sv.discount if args.gamma is None else args.gamma
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mdp = model.mdp

    cen, lay = solve(model, "centralized", gamma), solve(model, "layered", gamma)
    for sol in (cen, lay):
        if not sol.converged:
            raise NotConverged(f"{sol.mode} solver did not converge")
    write_values(out / "values_comparison.csv", model,
                 {"centralized": cen.values.flat(), "layered": lay.values.flat()}, model.header())

    myo = solve(model, "centralized", 0.0)
    u = draw_uniforms(mdp.n_layers, K, seed)
    traces = {"foresighted": rollout(mdp, cen.policy, model.s0, K, discount=gamma, uniforms=u),
              "myopic": rollout(mdp, myo.policy, model.s0, K, discount=gamma, uniforms=u)}
    _write_curves(out / "foresight_rewards.csv", model.header(seed), traces, lc.curve_every)

    simp = {m: solve(model, m, gamma) for m in ("simplified1", "simplified2")}
    traces = {"optimal": traces["foresighted"]}
    rows = []
    for m, sol in simp.items():
        traces[m] = rollout(mdp, sol.policy, model.s0, K, discount=gamma, uniforms=u)
        c = compare_policies(mdp, cen.policy, sol.policy, model.s0, K, seed, gamma)
        rows.append([m, c.delta_r, c.half_width, float(c.value_gap.min()), float(c.value_gap.max())])
    _write_curves(out / "simplification_rewards.csv", model.header(seed), traces, lc.curve_every)
    write_rows(out / "simplification_losses.csv", model.header(seed),
               ["policy", "delta_r", "half_width_95", "min_value_gap", "max_value_gap"], rows)

    runs = {m: _learn(model, m, lc.stages, lc.seed, gamma) for m in ("centralized", "layered")}
    with_opt = rollout(mdp, cen.policy, model.s0, lc.stages, seed=lc.seed, discount=gamma)
    curves = {f"learning_{m}": r for m, r in runs.items()}
    curves["optimal"] = with_opt
    _write_curves(out / "learning_curves.csv", model.header(lc.seed), curves, lc.curve_every)
    print(f"wrote experiment CSVs to {out}")


def _write_curves(path, header, runs, every):
    names = list(runs)
    avgs = {n: np.cumsum(r.rewards) / np.arange(1, len(r.rewards) + 1) for n, r in runs.items()}
    K = min(len(a) for a in avgs.values())
    rows = [[k + 1, *(float(avgs[n][k]) for n in names)] for k in range(every - 1, K, every)]
    write_rows(path, header, ["stage"] + names, rows)


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "learn": cmd_learn,
    "reproduce": cmd_reproduce,
}


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.gamma is not None and not 0 <= args.gamma < 1:
            raise ConfigError("gamma", "must lie in [0, 1)")
        if args.stages is not None and args.stages < 1:
            raise ConfigError("stages", "must be at least 1")
        model = build_model(cfg)
        COMMANDS[args.command](model, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NotConverged, DivergedRunError) as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_UNCONVERGED
    except (ModelContractError, PolicyCoverageError) as exc:
        print(f"model contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
