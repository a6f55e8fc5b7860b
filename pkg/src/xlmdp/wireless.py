"""Reference three-layer wireless stack: PHY, MAC and a delay-sensitive APP.

* PHY: finite-state Markov channel over channel-gain levels; internal actions
  are (modulation, transmit power) pairs; the service is a per-packet loss
  ratio, a per-packet transmission time and the power spent.
* MAC: allocated fraction of stage time, driven by a bid; internal action is
  the ARQ retry limit.
* APP: packet counts by remaining lifetime, earliest-deadline-first service,
  arrivals with a mean picked by the external action.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import erfc
from scipy.stats import poisson

from .config import StackConfig, load_config
from .errors import ConfigError, ModelContractError
from .layers import LayerSpec, no_op_costs, stack_to_mdp
from .qos import QosTriple

FLOOR_GUARD = 1e-9


# --------------------------------------------------------------------------
# PHY


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def ber(gain_db, m, sigma, kappa=283.5):
    """Bit error rate ``erfc(κ σ Γ sin(π / 2^m))`` clamped to [0, 1]."""
    arg = kappa * sigma * db_to_linear(gain_db) * np.sin(np.pi / 2.0 ** m)
    return float(np.clip(erfc(arg), 0.0, 1.0))


def packet_loss(bit_error, bits):
    """``1 - (1 - BER)^bits`` without cancellation for tiny BER."""
    if bit_error >= 1.0:
        return 1.0
    return float(-np.expm1(bits * np.log1p(-bit_error)))


def phy_qos(gain_db, m, sigma, phy) -> QosTriple:
    eps = packet_loss(ber(gain_db, m, sigma, phy.ber_kappa), phy.packet_bits)
    return QosTriple(eps, phy.packet_time_s / m, phy.internal_multiplier * sigma)


def region_boundaries(gains_linear):
    """Midpoints between adjacent representative gains, with 0 and +inf at the ends."""
    g = np.asarray(gains_linear, dtype=float)
    return np.concatenate([[0.0], 0.5 * (g[1:] + g[:-1]), [np.inf]])


def level_crossing_rate(mu, mean_gain, doppler):
    mu = np.asarray(mu, dtype=float)
    finite = np.isfinite(mu)
    safe = np.where(finite, mu, 0.0)
    rate = np.sqrt(2.0 * np.pi * safe / mean_gain) * doppler * np.exp(-safe / mean_gain)
    return np.where(finite, rate, 0.0)


def phy_transition(phy) -> np.ndarray:
    """Adjacent-level FSMC matrix from level-crossing rates.

    State ``i`` covers gains in ``[Γ_i, Γ_{i+1})``; the up move uses the
    crossing rate at ``Γ_{i+1}``, the down move the rate at ``Γ_i``, both
    scaled by ``fsmc_step_s / ω_i`` where ``ω_i`` is the stationary mass of
    the region.
    """
    gb = region_boundaries(db_to_linear(phy.gain_levels_db))
    mu_bar = phy.mean_gain
    omega = np.exp(-gb[:-1] / mu_bar) - np.exp(-gb[1:] / mu_bar)
    n = len(omega)
    rate = level_crossing_rate(gb, mu_bar, phy.doppler_hz)
    up = rate[1:] * phy.fsmc_step_s / omega
    down = rate[:-1] * phy.fsmc_step_s / omega
    up[-1] = 0.0
    down[0] = 0.0
    if np.any(up > 1) or np.any(down > 1):
        warnings.warn("FSMC transition probability above 1 clamped", RuntimeWarning)
        up, down = np.minimum(up, 1.0), np.minimum(down, 1.0)
    stay = 1.0 - up - down
    if np.any(stay < 0):
        raise ConfigError("phy.fsmc_step_s", "stage too long for the Doppler rate: negative self-transition")
    P = np.diag(stay)
    idx = np.arange(n - 1)
    P[idx, idx + 1] = up[:-1]
    P[idx + 1, idx] = down[1:]
    return P


# --------------------------------------------------------------------------
# MAC


def mac_qos(lower: QosTriple, allocation, retries, time_form="corrected") -> QosTriple:
    """ARQ service with retry limit ``retries`` on a share ``allocation`` of the stage.

    The loss is ``ε^(B+1)``; the time is the expected number of attempts
    ``sum_{i<=B} ε^i`` times the PHY time, stretched by ``1 / allocation``.
    ``time_form="as-printed"`` uses ``(1 - ε^B) / (1 - ε)`` attempts instead,
    which is zero at ``B = 0`` and is rejected there.
    """
    if not allocation > 0:
        raise ModelContractError("MAC allocation must be positive")
    eps = lower.loss
    loss = eps ** (retries + 1)
    if time_form == "corrected":
        attempts, term = 0.0, 1.0
        for _ in range(retries + 1):
            attempts += term
            term *= eps
    elif time_form == "as-printed":
        if eps == 1.0:
            raise ModelContractError("as-printed MAC time is undefined for loss 1")
        attempts = (1.0 - eps ** retries) / (1.0 - eps)
    else:
        raise ValueError(f"unknown time form {time_form!r}")
    return QosTriple(loss, attempts * lower.time / allocation, lower.cost)


def mac_transition(s2, a2, mac) -> np.ndarray:
    try:
        return np.asarray(mac.transitions[a2], dtype=float)[s2]
    except IndexError:
        raise ConfigError("mac.transitions", f"no matrix for bid index {a2}") from None


# --------------------------------------------------------------------------
# APP


def app_throughput(z: QosTriple, stage_s) -> int:
    """Packets delivered in one stage: ``floor(η (1 - ε) / t)``."""
    if z.loss >= 1.0:
        return 0
    return max(int(np.floor(stage_s * (1.0 - z.loss) / z.time + FLOOR_GUARD)), 0)


def app_step(s3, v, y, cap):
    """Earliest-deadline-first service, expiry, aging and arrival admission.

    Returns ``(next_state, transmitted, expired)``.
    """
    left = list(s3)
    budget = v
    for j in range(len(left)):
        served = min(budget, left[j])
        left[j] -= served
        budget -= served
    transmitted = v - budget
    expired = left[0]
    nxt = tuple(min(max(x, 0), cap) for x in left[1:]) + (min(y, cap),)
    return nxt, transmitted, expired


def arrival_pmf(mean, cap):
    """Poisson(mean) on ``0..cap`` with all mass above ``cap`` folded into ``cap``."""
    if cap == 0:
        return np.ones(1)
    pmf = poisson.pmf(np.arange(cap), mean)
    return np.append(pmf, poisson.sf(cap - 1, mean))


def app_gain(s3, v, loss_tradeoff, form="lost-packets"):
    _, transmitted, expired = app_step(s3, v, 0, 0)
    if form == "lost-packets":
        return transmitted - loss_tradeoff * expired
    if form == "as-printed":
        return v - loss_tradeoff * min(s3[0] - v, 0)
    raise ValueError(f"unknown gain form {form!r}")


def stage_reward(z: QosTriple, s3, bid_value, cfg: StackConfig):
    v = app_throughput(z, cfg.app.stage_s)
    g = app_gain(s3, v, cfg.app.loss_tradeoff, cfg.app.gain_form)
    return g - z.cost - cfg.mac.external_multiplier * bid_value


# --------------------------------------------------------------------------
# assembly


@dataclass
class ReferenceStack:
    config: StackConfig
    layers: list
    app_states: list
    phy_actions: list      # (modulation, power) per PHY internal index

    @property
    def shape(self):
        return tuple(layer.n_states for layer in self.layers)

    @cached_property
    def mdp(self):
        return stack_to_mdp(self.layers)

    def app_index(self, s3):
        cap = self.config.app.buffer_cap
        return int(np.ravel_multi_index(tuple(s3), (cap + 1,) * self.config.app.lifetime))

    def initial_state(self):
        phy, mac, app = self.config.solver.initial_state
        return int(np.ravel_multi_index((phy, mac, self.app_index(app)), self.shape))

    def phy_action_index(self, modulation, power):
        return self.phy_actions.index((modulation, power))

    def describe_state(self, s):
        i, j, k = np.unravel_index(int(s), self.shape)
        return (int(i), int(j)) + tuple(int(x) for x in self.app_states[k])


def app_transition_distribution(s3, a3, z, cfg: StackConfig):
    """Next APP state distribution over the raveled ``[cap + 1]^J`` grid."""
    cap, J = cfg.app.buffer_cap, cfg.app.lifetime
    v = app_throughput(z, cfg.app.stage_s)
    return _app_row(tuple(s3), v, cfg.app.arrival_means[a3], cap, J)


def _app_row(s3, v, mean, cap, J):
    pmf = arrival_pmf(mean, cap)
    row = np.zeros((cap + 1) ** J)
    for y, p in enumerate(pmf):
        nxt, _, _ = app_step(s3, v, y, cap)
        row[np.ravel_multi_index(nxt, (cap + 1,) * J)] += p
    return row


def build_reference_stack(cfg: StackConfig | None = None) -> ReferenceStack:
    cfg = cfg or load_config()
    phy, mac, app = cfg.phy, cfg.mac, cfg.app
    n1, n2 = len(phy.gain_levels_db), len(mac.allocations)
    app_states = list(itertools.product(range(app.buffer_cap + 1), repeat=app.lifetime))
    n3 = len(app_states)
    phy_actions = [(m, p) for m in phy.modulations for p in phy.powers_w]

    phy_table = [[phy_qos(g, m, p, phy) for (m, p) in phy_actions] for g in phy.gain_levels_db]

    def phy_service(s1, b1, lower):
        z = phy_table[s1][b1]
        return z.loss, z.time

    phy_layer = LayerSpec(
        name="phy",
        n_states=n1,
        external_cost=no_op_costs(n1),
        internal_cost=np.array([[p for (_, p) in phy_actions]] * n1),
        internal_multiplier=phy.internal_multiplier,
        transition=phy_transition(phy)[:, None, :],
        service=phy_service,
    )

    def mac_service(s2, b2, lower):
        z = mac_qos(lower, mac.allocations[s2], b2, mac.time_form)
        return z.loss, z.time

    mac_layer = LayerSpec(
        name="mac",
        n_states=n2,
        external_cost=np.array([list(map(float, mac.bids))] * n2),
        internal_cost=np.zeros((n2, mac.max_retries + 1)),
        external_multiplier=mac.external_multiplier,
        internal_multiplier=mac.internal_multiplier,
        transition=np.stack([np.asarray(mac.transitions[a], float) for a in range(len(mac.bids))], axis=1),
        service=mac_service,
    )

    rows = {}

    def app_gain_fn(s3, z):
        v = app_throughput(z, app.stage_s)
        return app_gain(app_states[s3], v, app.loss_tradeoff, app.gain_form)

    def app_key(s3, a3, z):
        return (s3, a3, app_throughput(z, app.stage_s))

    def app_next(s3, a3, z):
        key = app_key(s3, a3, z)
        if key not in rows:
            rows[key] = _app_row(app_states[s3], key[2], app.arrival_means[a3], app.buffer_cap, app.lifetime)
        return rows[key]

    app_layer = LayerSpec(
        name="app",
        n_states=n3,
        external_cost=np.zeros((n3, len(app.arrival_means))),
        internal_cost=no_op_costs(n3),
        external_multiplier=app.external_multiplier,
        gain=app_gain_fn,
        top_transition=app_next,
        transition_key=app_key,
    )
    return ReferenceStack(cfg, [phy_layer, mac_layer, app_layer], app_states, phy_actions)
