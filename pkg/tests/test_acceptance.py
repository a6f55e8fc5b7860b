"""Acceptance criteria on the reference stack and the two-state toy.

Each test records one ``AC-n PASS|FAIL ...`` line, printed in the terminal
summary, before asserting.
"""

import time

import numpy as np
import pytest

from xlmdp.config import MacConfig, PhyConfig
from xlmdp.experiments import solve
from xlmdp.layers import FrontierBuilder, frontier_equivalence_check, reward_monotonicity_violations, stack_to_mdp
from xlmdp.learning import gibbs_softmax, run_learning
from xlmdp.mdp import contraction_residuals, evaluate_policy, value_iteration
from xlmdp.qos import QosTriple, dominates, weakly_dominates
from xlmdp.simulate import compare_policies, draw_uniforms, rollout
from xlmdp.toy import two_state_stack
from xlmdp.wireless import arrival_pmf, mac_qos, phy_qos, phy_transition

from conftest import ACCEPTANCE_LINES

K = 100_000


def record(ac, ok, detail):
    line = f"{ac} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def test_ac1_layered_equals_centralized(reference_model):
    t0 = time.perf_counter()
    cen = solve(reference_model, "centralized")
    t_cen = time.perf_counter() - t0
    t0 = time.perf_counter()
    lay = solve(reference_model, "layered")
    t_lay = time.perf_counter() - t0
    diff = lay.values.max_abs_diff(cen.values)
    ok = cen.converged and lay.converged and diff < 1e-8 and reference_model.mdp.n_states == 675
    assert record("AC-1", ok, f"sup|V_layered - V_centralized|={diff:.2e} "
                  f"(centralized {t_cen:.1f}s, layered {t_lay:.1f}s)")


def test_ac2_frontier_equivalence_everywhere(reference_model):
    stack = reference_model.layers
    builder = FrontierBuilder(stack, check_property=False)
    failures = [s for s in np.ndindex(*reference_model.mdp.state_shape)
                if not frontier_equivalence_check(stack, s, builder, tol=1e-12).ok]
    assert record("AC-2", not failures, f"{len(failures)} of 675 states differ (tol 1e-12)")


def test_ac3_foresighted_beats_myopic(reference_model, reference_solutions):
    mdp, s0 = reference_model.mdp, reference_model.s0
    fore, myo = reference_solutions["centralized"].policy, reference_solutions["myopic"].policy
    gap = evaluate_policy(mdp, fore, 0.9).flat() - evaluate_policy(mdp, myo, 0.9).flat()
    exact_ok = gap.min() >= -1e-9 and gap.max() > 0
    avgs = []
    for seed in range(5):
        u = draw_uniforms(mdp.n_layers, K, seed)
        avgs.append((rollout(mdp, fore, s0, K, uniforms=u).average_reward,
                     rollout(mdp, myo, s0, K, uniforms=u).average_reward))
    sim_ok = all(f > m for f, m in avgs)
    detail = (f"value gap in [{gap.min():.3f}, {gap.max():.3f}]; per-seed averages "
              + ", ".join(f"{f:.4f}>{m:.4f}" for f, m in avgs))
    assert record("AC-3", exact_ok and sim_ok, detail)


@pytest.mark.parametrize("mode", ["simplified1", "simplified2"])
def test_ac4_simplifications_are_suboptimal(reference_model, reference_solutions, mode):
    mdp, s0 = reference_model.mdp, reference_model.s0
    opt = reference_solutions["centralized"]
    pol = solve(reference_model, mode).policy
    c = compare_policies(mdp, opt.policy, pol, s0, K, 0, 0.9)
    exact_ok = c.value_gap.min() >= -1e-9 and c.value_gap.max() > 0
    sign_ok = c.delta_r < 0
    detail = (f"{mode}: value gap in [{c.value_gap.min():.3f}, {c.value_gap.max():.3f}], "
              f"delta_r={c.delta_r:.4f} +- {c.half_width:.4f}")
    assert record("AC-4", exact_ok and sign_ok, detail)


def test_ac5_preservation_and_monotonicity(reference_model):
    phy, mac = PhyConfig(), MacConfig()
    times = sorted({phy_qos(g, m, p, phy).time
                    for g in phy.gain_levels_db for m in phy.modulations for p in phy.powers_w[1:]})
    eps = np.round(np.linspace(0.0, 1.0, 11), 10)
    grid = [QosTriple(e, t, c) for e in eps for t in times for c in (0.0, 0.5)]
    mac_bad = 0
    for z in grid:
        for w in grid:
            if not dominates(z, w):
                continue
            for alloc in mac.allocations:
                for retries in range(mac.max_retries + 1):
                    if not weakly_dominates(mac_qos(z, alloc, retries), mac_qos(w, alloc, retries)):
                        mac_bad += 1
    app_bad = len(reward_monotonicity_violations(reference_model.layers))
    assert record("AC-5", mac_bad == 0 and app_bad == 0,
                  f"{mac_bad} MAC preservation and {app_bad} reward monotonicity violations "
                  f"over {len(grid)}-point grid")


def test_ac6_contraction(reference_solutions):
    verdicts = {m: contraction_residuals(reference_solutions[m].residuals, 0.9) for m in ("centralized", "layered")}
    detail = "; ".join(f"{m}: {'ok' if v.ok else v.message} ({len(reference_solutions[m].residuals)} sweeps)"
                       for m, v in verdicts.items())
    assert record("AC-6", all(v.ok for v in verdicts.values()), detail)


def test_ac7_evaluation_counts(reference_solutions):
    cen, lay = reference_solutions["centralized"].evaluations, reference_solutions["layered"].evaluations
    ok = max(lay) <= min(cen)
    assert record("AC-7", ok, f"layered max {max(lay)} vs centralized min {min(cen)} evaluations per sweep")


def test_ac8_toy_learning():
    stack = two_state_stack()
    mdp = stack_to_mdp(stack)
    target = value_iteration(mdp, 0.9).policy.actions
    hits = {}
    for mode in ("centralized", "layered"):
        hits[mode] = sum(
            np.array_equal(run_learning(mdp, mode, 1.0, 0.2, 0.9, 50_000, seed, 0, "visit",
                                        stack=stack).greedy_policy.actions, target)
            for seed in range(10))
    ok = all(h == 10 for h in hits.values())
    assert record("AC-8", ok, "toy: " + ", ".join(f"{m} {h}/10" for m, h in hits.items()))


def test_ac8_reference_learning(reference_model, reference_solutions):
    mdp, s0 = reference_model.mdp, reference_model.s0
    seed, tail = 0, 10_000
    opt = rollout(mdp, reference_solutions["centralized"].policy, s0, K, seed=seed).rewards[-tail:].mean()
    tails = {m: run_learning(mdp, m, 0.5, 5.0, 0.9, K, seed, s0, engine=reference_model.engine)
             .rewards[-tail:].mean() for m in ("centralized", "layered")}
    gaps = {m: opt - v for m, v in tails.items()}
    ok = all(abs(g) <= 0.2 for g in gaps.values())
    soft = "layered beats centralized" if tails["layered"] > tails["centralized"] else "centralized beats layered"
    detail = (f"reference: optimal {opt:.4f}, " + ", ".join(f"{m} {v:.4f} (gap {gaps[m]:.4f})"
                                                            for m, v in tails.items())
              + f"; soft: {soft}, gap target about 0.1")
    assert record("AC-8", ok, detail)


def test_ac9_stochastic_hygiene(reference_model):
    rng = np.random.default_rng(0)
    worst = {}
    sm = [abs(gibbs_softmax(rng.normal(0, 10 ** rng.uniform(-2, 2), rng.integers(1, 50))).sum() - 1)
          for _ in range(10_000)]
    worst["softmax"] = (max(sm), 1e-12)
    pmf = [abs(arrival_pmf(rng.uniform(0, 20), int(rng.integers(0, 30))).sum() - 1) for _ in range(10_000)]
    worst["arrival pmf"] = (max(pmf), 1e-12)
    fsmc = []
    for _ in range(10_000):
        phy = PhyConfig(doppler_hz=float(rng.uniform(0, 50)), fsmc_step_s=float(rng.uniform(1e-5, 8e-4)))
        fsmc.append(np.max(np.abs(phy_transition(phy).sum(axis=1) - 1)))
    worst["fsmc rows"] = (max(fsmc), 1e-12)
    mdp = reference_model.mdp
    rows = [abs(mdp.transition_row(int(s), int(a)).sum() - 1)
            for s, a in zip(rng.integers(0, mdp.n_states, 10_000), rng.integers(0, mdp.n_actions, 10_000))]
    worst["kernel rows"] = (max(rows), 1e-10)
    ok = all(w <= tol for w, tol in worst.values())
    assert record("AC-9", ok, "; ".join(f"{k} max err {w:.1e} (tol {t:.0e}, 10^4 cases)"
                                        for k, (w, t) in worst.items()))
