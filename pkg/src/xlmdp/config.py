"""Experiment configuration: a sectioned key/value file with JSON values.

Sections are ``[phy]``, ``[mac]``, ``[app]``, ``[solver]`` and ``[learning]``.
Every value is parsed as JSON (so lists and matrices are written as nested
brackets); unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError

ROW_TOL = 1e-12


@dataclass
class PhyConfig:
    gain_levels_db: list = field(default_factory=lambda: [-8, -6, -4, -2, 0, 2, 4, 6, 8])
    mean_gain: float = 1.0
    doppler_hz: float = 50.0
    packet_time_s: float = 0.8e-3
    fsmc_step_s: float = 0.8e-3
    modulations: list = field(default_factory=lambda: [1, 2, 3, 4])
    powers_w: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0])
    ber_kappa: float = 283.5
    packet_bits: int = 1000
    internal_multiplier: float = 1.0

    def validate(self):
        g = np.asarray(self.gain_levels_db, dtype=float)
        if g.ndim != 1 or len(g) < 1 or np.any(np.diff(g) <= 0):
            raise ConfigError("phy.gain_levels_db", "must be strictly increasing")
        for name in ("mean_gain", "packet_time_s", "fsmc_step_s", "ber_kappa"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"phy.{name}", "must be positive")
        if self.doppler_hz < 0:
            raise ConfigError("phy.doppler_hz", "must be non-negative")
        if not self.modulations or any(int(m) != m or m < 1 for m in self.modulations):
            raise ConfigError("phy.modulations", "must be positive integers")
        if not self.powers_w or any(p < 0 for p in self.powers_w):
            raise ConfigError("phy.powers_w", "must be non-negative")
        if int(self.packet_bits) != self.packet_bits or self.packet_bits < 1:
            raise ConfigError("phy.packet_bits", "must be a positive integer")
        if self.internal_multiplier < 0:
            raise ConfigError("phy.internal_multiplier", "must be non-negative")


@dataclass
class MacConfig:
    allocations: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    bids: list = field(default_factory=lambda: [0, 1])
    max_retries: int = 5
    external_multiplier: float = 1.0
    internal_multiplier: float = 1.0
    transitions: list = field(default_factory=lambda: [
        [[0.8, 0.2, 0.0], [0.4, 0.5, 0.1], [0.0, 0.5, 0.5]],
        [[0.4, 0.6, 0.0], [0.1, 0.4, 0.5], [0.0, 0.2, 0.8]],
    ])
    time_form: str = "corrected"

    def validate(self):
        if not self.allocations or any(not 0 < x <= 1 for x in self.allocations):
            raise ConfigError("mac.allocations", "must lie in (0, 1]")
        if not self.bids or any(b < 0 for b in self.bids):
            raise ConfigError("mac.bids", "must be non-negative")
        if int(self.max_retries) != self.max_retries or self.max_retries < 0:
            raise ConfigError("mac.max_retries", "must be a non-negative integer")
        if len(self.transitions) != len(self.bids):
            raise ConfigError("mac.transitions", "need one matrix per bid")
        n = len(self.allocations)
        for k, mat in enumerate(self.transitions):
            mat = np.asarray(mat, dtype=float)
            if mat.shape != (n, n):
                raise ConfigError("mac.transitions", f"matrix {k} must be {n}x{n}")
            if np.any(mat < 0) or np.any(np.abs(mat.sum(axis=1) - 1) > ROW_TOL):
                raise ConfigError("mac.transitions", f"matrix {k} is not row-stochastic")
        if self.time_form not in ("corrected", "as-printed"):
            raise ConfigError("mac.time_form", "must be 'corrected' or 'as-printed'")


@dataclass
class AppConfig:
    lifetime: int = 2
    buffer_cap: int = 4
    arrival_means: list = field(default_factory=lambda: [1, 2, 3])
    stage_s: float = 2e-3
    loss_tradeoff: float = 0.1
    external_multiplier: float = 1.0
    gain_form: str = "lost-packets"

    def validate(self):
        if int(self.lifetime) != self.lifetime or self.lifetime < 1:
            raise ConfigError("app.lifetime", "must be a positive integer")
        if int(self.buffer_cap) != self.buffer_cap or self.buffer_cap < 0:
            raise ConfigError("app.buffer_cap", "must be a non-negative integer")
        if not self.arrival_means or any(a < 0 for a in self.arrival_means):
            raise ConfigError("app.arrival_means", "must be non-negative")
        if not self.stage_s > 0:
            raise ConfigError("app.stage_s", "must be positive")
        if self.gain_form not in ("lost-packets", "as-printed"):
            raise ConfigError("app.gain_form", "must be 'lost-packets' or 'as-printed'")


@dataclass
class SolverConfig:
    model: str = "reference"
    discount: float = 0.9
    tolerance: float = 1e-8
    max_sweeps: int = 10_000
    initial_state: list = field(default_factory=lambda: [4, 1, [0, 0]])
    simplified1_bid: int = 0
    simplified1_modulation: int = 2
    simplified1_power_w: float = 0.2
    simplified1_retries: int = 1
    simplified2_arrival: float = 1
    horizon: int = 100_000
    seed: int = 0

    def validate(self):
        if self.model not in ("reference", "toy"):
            raise ConfigError("solver.model", "must be 'reference' or 'toy'")
        if not 0 <= self.discount < 1:
            raise ConfigError("solver.discount", "must lie in [0, 1)")
        if not self.tolerance > 0:
            raise ConfigError("solver.tolerance", "must be positive")
        if self.max_sweeps < 1:
            raise ConfigError("solver.max_sweeps", "must be at least 1")
        if self.horizon < 1:
            raise ConfigError("solver.horizon", "must be at least 1")


@dataclass
class LearningConfig:
    alpha: float = 0.5
    beta: float = 5.0
    stages: int = 100_000
    seed: int = 0
    curve_every: int = 100
    alpha_schedule: str = "constant"

    def validate(self):
        if not self.alpha > 0:
            raise ConfigError("learning.alpha", "must be positive")
        if self.beta < 0:
            raise ConfigError("learning.beta", "must be non-negative")
        if self.curve_every < 1:
            raise ConfigError("learning.curve_every", "must be at least 1")
        if self.alpha_schedule not in ("constant", "visit"):
            raise ConfigError("learning.alpha_schedule", "must be 'constant' or 'visit'")


SECTIONS = {
    "phy": PhyConfig,
    "mac": MacConfig,
    "app": AppConfig,
    "solver": SolverConfig,
    "learning": LearningConfig,
}


@dataclass
class StackConfig:
    phy: PhyConfig = field(default_factory=PhyConfig)
    mac: MacConfig = field(default_factory=MacConfig)
    app: AppConfig = field(default_factory=AppConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    sha256: str = ""

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        init = self.solver.initial_state
        if (len(init) != 3 or not 0 <= init[0] < len(self.phy.gain_levels_db)
                or not 0 <= init[1] < len(self.mac.allocations)
                or len(init[2]) != self.app.lifetime
                or any(not 0 <= x <= self.app.buffer_cap for x in init[2])):
            raise ConfigError("solver.initial_state", "outside the state space")
        if self.solver.simplified1_bid not in range(len(self.mac.bids)):
            raise ConfigError("solver.simplified1_bid", "not a bid index")
        if self.solver.simplified1_modulation not in self.phy.modulations:
            raise ConfigError("solver.simplified1_modulation", "not a configured modulation")
        if self.solver.simplified1_power_w not in self.phy.powers_w:
            raise ConfigError("solver.simplified1_power_w", "not a configured power level")
        if not 0 <= self.solver.simplified1_retries <= self.mac.max_retries:
            raise ConfigError("solver.simplified1_retries", "outside the retry range")
        if self.solver.simplified2_arrival not in self.app.arrival_means:
            raise ConfigError("solver.simplified2_arrival", "not a configured arrival mean")
        return self


def _coerce(section, key, raw, default):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw.strip()
        if isinstance(default, str):
            return value
        raise ConfigError(f"{section}.{key}", f"cannot parse {raw!r}") from None
    if isinstance(default, bool) or value is None:
        raise ConfigError(f"{section}.{key}", f"unsupported value {raw!r}")
    if isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(default, int) and isinstance(value, (int, float)):
        if int(value) != value:
            raise ConfigError(f"{section}.{key}", "must be an integer")
        return int(value)
    if type(default) is not type(value) and not (isinstance(default, list) and isinstance(value, list)):
        raise ConfigError(f"{section}.{key}", f"expected {type(default).__name__}")
    return value


def parse_config(text: str) -> StackConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from None
    cfg = StackConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{section}.{key}", "unknown key")
            setattr(target, key, _coerce(section, key, raw, getattr(target, key)))
    cfg.sha256 = hashlib.sha256(text.encode()).hexdigest()
    return cfg.validate()


def load_config(path=None) -> StackConfig:
    """Read a config file; ``None`` loads the shipped reference config."""
    if path is None:
        data = resources.files("xlmdp").joinpath("data/reference.ini").read_bytes()
    else:
        data = Path(path).read_bytes()
    cfg = parse_config(data.decode())
    cfg.sha256 = hashlib.sha256(data).hexdigest()
    return cfg
