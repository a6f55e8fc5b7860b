import hashlib
from importlib import resources

import pytest

from xlmdp.config import load_config, parse_config
from xlmdp.errors import ConfigError


def shipped_text():
    return resources.files("xlmdp").joinpath("data/reference.ini").read_text()


class TestLoad:
    def test_shipped_defaults_parse(self):
        cfg = load_config()
        assert cfg.solver.discount == 0.9 and cfg.solver.tolerance == 1e-8
        assert cfg.solver.max_sweeps == 10_000
        assert cfg.mac.transitions[1][0] == [0.4, 0.6, 0.0]

    def test_hash_is_of_file_bytes(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text(shipped_text())
        assert load_config(path).sha256 == hashlib.sha256(path.read_bytes()).hexdigest()
        assert load_config(path).sha256 == load_config().sha256

    def test_empty_file_gives_defaults(self):
        cfg = parse_config("")
        assert cfg.phy.gain_levels_db == load_config().phy.gain_levels_db

    def test_unquoted_string(self):
        assert parse_config("[solver]\nmodel = toy\n").solver.model == "toy"

    def test_int_promoted_to_float(self):
        assert parse_config("[solver]\ndiscount = 0\n").solver.discount == 0.0


class TestErrors:
    @pytest.mark.parametrize("text, field", [
        ("[solver]\ntolerence = 1e-8\n", "solver.tolerence"),
        ("[solvr]\ndiscount = 0.9\n", "solvr"),
        ("[solver]\ndiscount = 1.0\n", "solver.discount"),
        ("[solver]\nmax_sweeps = 2.5\n", "solver.max_sweeps"),
        ("[solver]\ninitial_state = [9, 1, [0, 0]]\n", "solver.initial_state"),
        ("[solver]\nsimplified2_arrival = 5\n", "solver.simplified2_arrival"),
        ("[solver]\nmodel = \"grid\"\n", "solver.model"),
        ("[phy]\ngain_levels_db = [0, -2]\n", "phy.gain_levels_db"),
        ("[phy]\ndoppler_hz = -1\n", "phy.doppler_hz"),
        ("[phy]\nmodulations = [0, 1]\n", "phy.modulations"),
        ("[mac]\ntransitions = [[[1, 0, 0], [0, 1, 0], [0, 0, 1]]]\n", "mac.transitions"),
        ("[mac]\ntransitions = [[[0.9, 0, 0], [0, 1, 0], [0, 0, 1]], [[1, 0, 0], [0, 1, 0], [0, 0, 1]]]\n",
         "mac.transitions"),
        ("[mac]\ntime_form = \"literal\"\n", "mac.time_form"),
        ("[app]\ngain_form = \"other\"\n", "app.gain_form"),
        ("[app]\nlifetime = 0\n", "app.lifetime"),
        ("[learning]\nalpha = 0\n", "learning.alpha"),
        ("[learning]\nalpha_schedule = \"harmonic\"\n", "learning.alpha_schedule"),
        ("[learning]\ncurve_every = [1]\n", "learning.curve_every"),
    ])
    def test_field_named(self, text, field):
        with pytest.raises(ConfigError) as exc:
            parse_config(text)
        assert exc.value.field == field

    def test_malformed_file(self):
        with pytest.raises(ConfigError):
            parse_config("no section header\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_config(tmp_path / "nope.ini")
