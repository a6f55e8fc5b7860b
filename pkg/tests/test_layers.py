import numpy as np
import pytest

from xlmdp.errors import ModelContractError
from xlmdp.layers import (
    FrontierBuilder, LayerSpec, all_profiles_qos, build_frontier, frontier_equivalence_check,
    no_op_costs, qos_compose, reward_monotonicity_violations, stack_to_mdp,
)
from xlmdp.layered import LayeredEngine
from xlmdp.qos import QosTriple, brute_force_frontier

from conftest import synthetic_stack


def base_layer(triples, n_states=1):
    """Layer 1 offering one fixed triple per internal action."""
    loss = [z[0] for z in triples]
    time = [z[1] for z in triples]
    return LayerSpec(
        name="base", n_states=n_states,
        external_cost=no_op_costs(n_states),
        internal_cost=np.array([[z[2] for z in triples]] * n_states),
        transition=np.ones((n_states, 1, n_states)) / n_states,
        service=lambda s, b, lower: (loss[b], time[b]),
    )


def top_layer(gain, service=None):
    return LayerSpec(
        name="top", n_states=1,
        external_cost=no_op_costs(1), internal_cost=no_op_costs(1),
        service=service, gain=gain,
        top_transition=lambda s, a, z: np.ones(1),
        transition_key=lambda s, a, z: (s, a),
    )


class TestQosCompose:
    def test_identity_layer(self):
        layer = LayerSpec("id", 1, no_op_costs(1), no_op_costs(1), transition=np.ones((1, 1, 1)))
        z = QosTriple(0.2, 1e-3, 0.7)
        assert qos_compose(layer, 0, 0, z) == z

    def test_cost_accumulates(self):
        layer = LayerSpec("c", 1, no_op_costs(1), np.array([[0.0, 2.0]]), internal_multiplier=0.5,
                          transition=np.ones((1, 1, 1)))
        assert qos_compose(layer, 0, 1, QosTriple(0.1, 1.0, 0.25)).cost == 0.25 + 0.5 * 2.0

    @pytest.mark.parametrize("out", [(1.2, 1.0), (0.5, 0.0), (0.5, -1.0)])
    def test_bad_service(self, out):
        layer = LayerSpec("bad", 1, no_op_costs(1), no_op_costs(1), transition=np.ones((1, 1, 1)),
                          service=lambda s, b, lower: out)
        with pytest.raises(ModelContractError):
            qos_compose(layer, 0, 0, QosTriple(0.1, 1.0, 0.0))

    def test_base_layer_needs_service(self):
        layer = LayerSpec("nil", 1, no_op_costs(1), no_op_costs(1), transition=np.ones((1, 1, 1)))
        with pytest.raises(ModelContractError):
            qos_compose(layer, 0, 0, None)

    def test_mac_lossless(self, reference_model):
        mac = reference_model.layers[1]
        z = qos_compose(mac, 1, 2, QosTriple(0.0, 0.4e-3, 0.2))
        assert z == QosTriple(0.0, 0.4e-3 / 0.5, 0.2)

    def test_mac_one_retry(self, reference_model):
        mac = reference_model.layers[1]
        z = qos_compose(mac, 2, 1, QosTriple(0.5, 0.4e-3, 0.2))
        assert z.loss == 0.25
        assert z.time == pytest.approx(0.6e-3, rel=1e-14)
        assert z.cost == 0.2


class TestBuildFrontier:
    TRIPLES = [(0.1, 1.0, 1.0), (0.2, 2.0, 0.0), (0.3, 0.5, 3.0)]

    def test_incomparable_all_survive(self):
        f = build_frontier([base_layer(self.TRIPLES)], 1, (0,))
        assert sorted(z.as_tuple() for z in f.elements) == sorted(self.TRIPLES)

    def test_added_action_prunes_what_it_dominates(self):
        # (0.05, 0.9, 0.9) beats (0.1, 1, 1) but costs more than (0.2, 2, 0)
        # and is slower than (0.3, 0.5, 3), so those two stay
        f = build_frontier([base_layer(self.TRIPLES + [(0.05, 0.9, 0.9)])], 1, (0,))
        assert f.provenance == ((1,), (2,), (3,))
        assert QosTriple(0.1, 1.0, 1.0) not in f.elements

    def test_fully_dominating_action_wins(self):
        f = build_frontier([base_layer(self.TRIPLES + [(0.05, 0.4, 0.0)])], 1, (0,))
        assert f.elements == (QosTriple(0.05, 0.4, 0.0),)
        assert f.provenance == ((3,),)

    def test_reference_level_two_matches_exhaustive(self, reference_model):
        stack = reference_model.layers
        builder = FrontierBuilder(stack)
        for prefix in np.ndindex(9, 3):
            f = builder.frontier(2, prefix)
            expected = brute_force_frontier(all_profiles_qos(stack[:2], prefix))
            assert list(zip(f.elements, f.provenance)) == expected

    def test_provenance_reproduces_element(self, reference_model):
        stack = reference_model.layers
        f = build_frontier(stack, 2, (3, 1))
        for z, prov in f:
            w = qos_compose(stack[1], 1, prov[1], qos_compose(stack[0], 3, prov[0], None))
            assert w == z

    def test_preservation_violation_detected(self):
        flip = LayerSpec("flip", 1, no_op_costs(1), no_op_costs(1), transition=np.ones((1, 1, 1)),
                         service=lambda s, b, lower: (1.0 - lower.loss, lower.time))
        stack = [base_layer([(0.1, 1.0, 0.0), (0.2, 1.0, 0.0)]), flip, top_layer(lambda s, z: 0.0)]
        with pytest.raises(ModelContractError, match="preservation"):
            FrontierBuilder(stack).frontier(2, (0, 0))
        with pytest.raises(ModelContractError, match="preservation"):
            LayeredEngine(stack)


class TestFrontierEquivalence:
    def test_single_internal_action(self):
        stack = [base_layer([(0.1, 1.0, 0.0)]), top_layer(lambda s, z: 1.0 - z.loss)]
        assert frontier_equivalence_check(stack, (0, 0)).ok

    def test_synthetic_stack(self):
        stack = synthetic_stack(3)
        for s in np.ndindex(2, 3, 2):
            assert frontier_equivalence_check(stack, s).ok

    def test_non_monotone_reward_fails(self):
        # the dominated triple earns more, so the frontier misses the maximum
        stack = [base_layer([(0.1, 1.0, 0.0), (0.2, 1.0, 0.0)]), top_layer(lambda s, z: 10.0 * z.loss)]
        verdict = frontier_equivalence_check(stack, (0, 0))
        assert not verdict.ok
        assert verdict.frontier_max == pytest.approx(1.0)
        assert verdict.exhaustive_max == pytest.approx(2.0)
        assert verdict.witness == (1, 0)
        assert reward_monotonicity_violations(stack)


class TestStackToMdp:
    def test_reference_sizes(self, reference_model):
        mdp = reference_model.mdp
        assert mdp.state_shape == (9, 3, 25)
        assert mdp.n_states == 675
        assert mdp.n_internal == (44, 6, 1)
        assert mdp.n_external == (1, 2, 3)

    def test_kernel_rows(self, reference_model):
        mdp = reference_model.mdp
        rng = np.random.default_rng(0)
        for s, a in zip(rng.integers(0, mdp.n_states, 200), rng.integers(0, mdp.n_actions, 200)):
            row = mdp.transition_row(s, a)
            assert abs(row.sum() - 1.0) < 1e-10 and row.min() >= 0.0

    def test_synthetic_sizes(self):
        mdp = stack_to_mdp(synthetic_stack(0))
        assert mdp.n_states == 12 and mdp.n_actions == 8 * 6
