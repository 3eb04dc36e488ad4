from pathlib import Path

import pytest

from cadmm.config import ScenarioConfig, config_from_dict, load_config
from cadmm.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]


def test_reference_file_matches_defaults():
    sc = load_config(ROOT / "configs" / "paper_5agent.toml")
    assert sc == ScenarioConfig()


def test_sections_map_to_fields():
    sc = config_from_dict({"admm": {"rho": 2}, "mpc": {"pos_tol": 0.1, "warm_start": False},
                           "network": {"graph": "radius", "radius": 2.0}, "safety": {"d_min": 0.5}})
    assert sc.admm.rho == 2.0 and sc.stop.pos_tol == 0.1 and not sc.warm_start
    assert sc.graph == "radius" and sc.graph_radius == 2.0 and sc.bvc_radius == 0.25


@pytest.mark.parametrize("data", [
    {"bogus": {}},
    {"admm": {"nope": 1}},
    {"admm": {"rho": "big"}},
    {"admm": {"rho": -1.0}},
    {"scenario": {"n_agents": 0}},
    {"scenario": {"variant": "other"}},
    {"safety": {"d_min": 0.0}},
    {"scenario": {"n_agents": 2, "starts": [[0, 0, 0]], "goals": [[1, 1, 1]]}},
    {"scenario": {"dim": True}},
])
def test_bad_config(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[admm\nrho = 1")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_replace_prefixes():
    sc = ScenarioConfig().replace(admm_rho=3.0, stop_obj_window=7, n_agents=2)
    assert sc.admm.rho == 3.0 and sc.stop.obj_window == 7 and sc.n_agents == 2
