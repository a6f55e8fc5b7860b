import numpy as np
import pytest
from hypothesis import settings

from xlmdp.config import load_config
from xlmdp.experiments import build_model, solve
from xlmdp.layers import LayerSpec

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def reference_model():
    return build_model(load_config())


@pytest.fixture(scope="session")
def reference_solutions(reference_model):
    """Centralized, layered and myopic solutions of the reference stack."""
    return {
        "centralized": solve(reference_model, "centralized"),
        "layered": solve(reference_model, "layered"),
        "myopic": solve(reference_model, "centralized", 0.0),
    }


def random_rows(rng, shape):
    x = rng.random(shape) + 0.05
    return x / x.sum(axis=-1, keepdims=True)


def synthetic_stack(seed, n_states=(2, 3, 2), n_external=(2, 2, 2), n_internal=(3, 2, 1)):
    """Three-layer stack with random dynamics and monotone service maps.

    Lower services scale loss and time by positive factors, which preserves
    dominance; the top gain falls with loss and time. The top transition
    depends on the next lower states but not on the received triple.
    """
    rng = np.random.default_rng(seed)
    S1, S2, S3 = n_states
    A1, A2, A3 = n_external
    B1, B2, B3 = n_internal
    loss1 = rng.uniform(0.0, 0.6, (S1, B1))
    time1 = rng.uniform(0.5, 2.0, (S1, B1))
    scale_loss = rng.uniform(0.2, 1.0, (S2, B2))
    scale_time = rng.uniform(0.5, 2.0, (S2, B2))
    l1 = LayerSpec(
        name="l1", n_states=S1,
        external_cost=rng.random((S1, A1)), internal_cost=rng.random((S1, B1)),
        external_multiplier=0.7, internal_multiplier=0.5,
        transition=random_rows(rng, (S1, A1, S1)),
        service=lambda s, b, lower: (loss1[s, b], time1[s, b]),
    )
    l2 = LayerSpec(
        name="l2", n_states=S2,
        external_cost=rng.random((S2, A2)), internal_cost=rng.random((S2, B2)),
        transition=random_rows(rng, (S1, S2, A2, S2)),
        service=lambda s, b, lower: (lower.loss * scale_loss[s, b], lower.time * scale_time[s, b]),
    )
    base = rng.uniform(0.0, 2.0, S3)
    top_rows = random_rows(rng, (S3, A3, S1, S2, S3))
    l3 = LayerSpec(
        name="l3", n_states=S3,
        external_cost=rng.random((S3, A3)), internal_cost=np.zeros((S3, B3)),
        gain=lambda s, z: base[s] - 2.0 * z.loss - 0.5 * z.time,
        top_transition=lambda s, a, z: top_rows[s, a],
        transition_key=lambda s, a, z: (s, a),
    )
    return [l1, l2, l3]
