"""A two-state, two-action stack whose optimal policy is not myopic.

Layer 1 is a single-state placeholder with a lossless service; the top layer
has two states and two deterministic external actions:

    state 0: action 0 stays (reward 0.5), action 1 moves to state 1 (reward 0)
    state 1: action 0 stays (reward 1),   action 1 moves to state 0 (reward 0)

With γ = 0.9 the optimal policy takes action 1 in state 0 and action 0 in
state 1; the myopic policy takes action 0 in both.
"""

import numpy as np

from .layers import LayerSpec, no_op_costs

GAIN = (0.5, 1.0)
MOVE_COST = ((0.0, 0.5), (0.0, 1.0))
NEXT = ((0, 1), (1, 0))


def two_state_stack():
    base = LayerSpec(
        name="link",
        n_states=1,
        external_cost=no_op_costs(1),
        internal_cost=no_op_costs(1),
        transition=np.ones((1, 1, 1)),
        service=lambda s, b, lower: (0.0, 1.0),
    )

    def nxt(s, a, z):
        row = np.zeros(2)
        row[NEXT[s][a]] = 1.0
        return row

    top = LayerSpec(
        name="app",
        n_states=2,
        external_cost=np.array(MOVE_COST),
        internal_cost=no_op_costs(2),
        gain=lambda s, z: GAIN[s],
        top_transition=nxt,
        transition_key=lambda s, a, z: (s, a),
    )
    return [base, top]
