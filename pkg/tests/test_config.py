"""Configuration parsing: defaults, validation, env overrides, roundtrips."""

import numpy as np
import pytest

from lensopt.config import ConfigError, RunConfig, parse_config, parse_dict


def test_empty_dict_gives_reference_setup():
    cfg = parse_dict({})
    assert cfg.grid.t_final == 9e-5
    assert cfg.grid.n_steps == 3801
    assert abs(cfg.grid.dt - 9e-5 / 3800) < 1e-24
    assert cfg.domain.degree == 1
    assert cfg.domain.refinement.nx_inner == 8
    assert cfg.materials.fluid.c == 1500.0
    assert cfg.materials.lens.c == 1100.0
    assert cfg.excitation.amplitude == 4e9
    assert cfg.excitation.frequency == 7e4
    assert cfg.integrator.gamma == 0.75
    assert cfg.integrator.beta == 0.45
    assert cfg.adjoint.gamma_p == 0.5
    assert cfg.adjoint.beta_p == 0.25
    assert cfg.target["kind"] == "gaussian"
    assert cfg.target["amplitude"] == 6e7
    assert cfg.optimizer["s_max"] == 50
    assert cfg.optimizer["movable"] == "upper"
    assert cfg.constraint.enabled
    assert cfg.tracking_box is None
    assert cfg.probes == []
    assert cfg.seed == 0


def test_empty_file_equals_empty_dict(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("  \n")
    assert parse_config(path, environ={}) == parse_dict({})


def test_parse_is_idempotent(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"time": {"n_steps": 101}, "seed": 3}')
    a = parse_config(path, environ={})
    b = parse_config(path, environ={})
    assert a == b
    assert a.grid.n_steps == 101
    assert a.seed == 3


def test_roundtrip_through_resolved_dict():
    cfg = parse_dict(
        {
            "domain": {"degree": 2, "P": 0.015, "refinement": {"nx_inner": 4}},
            "materials": {"lens": {"c": 1200.0}},
            "excitation": {"amplitude": 1e9},
            "time": {"t_final": 2e-5, "n_steps": 161},
            "adjoint": {"tol": 1e-9},
            "tracking": {"box": [0.0, 0.015, 0.1, 0.11]},
            "target": {"kind": "synthetic", "goal": {"P": 0.012}},
            "optimizer": {"s_max": 5, "movable": "both"},
            "constraint": {"tol": 2e-4},
            "probes": [[0.01, 0.1]],
            "seed": 11,
            "out_dir": "runs/a",
        }
    )
    again = parse_dict(cfg.to_dict())
    assert again == cfg
    assert cfg.domain.P == 0.015
    assert cfg.domain.refinement.nx_inner == 4
    assert cfg.domain.refinement.nx_outer == 4  # untouched default
    assert cfg.materials.lens.c == 1200.0
    assert cfg.materials.fluid.c == 1500.0
    assert cfg.tracking_box == (0.0, 0.015, 0.1, 0.11)
    assert cfg.target["noise_level"] == 0.02
    assert cfg.optimizer["movable"] == "both"
    assert cfg.probes == [(0.01, 0.1)]


def test_unknown_keys_rejected_with_path():
    with pytest.raises(ConfigError, match="top level: unknown key"):
        parse_dict({"tim": {}})
    with pytest.raises(ConfigError, match="time: unknown key"):
        parse_dict({"time": {"nsteps": 100}})
    with pytest.raises(ConfigError, match="domain.refinement: unknown key"):
        parse_dict({"domain": {"refinement": {"nx": 3}}})
    with pytest.raises(ConfigError, match="materials.fluid: unknown key"):
        parse_dict({"materials": {"fluid": {"speed": 1500}}})
    with pytest.raises(ConfigError, match="target: unknown key"):
        parse_dict({"target": {"kind": "gaussian", "path": "x.npz"}})


def test_value_validation():
    with pytest.raises(ConfigError, match="time"):
        parse_dict({"time": {"n_steps": 1}})
    with pytest.raises(ConfigError, match="time.t_final"):
        parse_dict({"time": {"t_final": -1.0}})
    with pytest.raises(ConfigError, match="time.n_steps: expected an integer"):
        parse_dict({"time": {"n_steps": 10.5}})
    with pytest.raises(ConfigError, match="domain"):
        parse_dict({"domain": {"R": 0.07}})
    with pytest.raises(ConfigError, match="optimizer.movable"):
        parse_dict({"optimizer": {"movable": "sideways"}})
    with pytest.raises(ConfigError, match="tracking.box"):
        parse_dict({"tracking": {"box": [0, 1, 1]}})
    with pytest.raises(ConfigError, match="tracking.box"):
        parse_dict({"tracking": {"box": [0.0, 0.0, 0.1, 0.11]}})
    with pytest.raises(ConfigError, match="constraint.enabled"):
        parse_dict({"constraint": {"enabled": "yes"}})
    with pytest.raises(ConfigError, match="probes"):
        parse_dict({"probes": [[0.1]]})
    with pytest.raises(ConfigError, match="excitation.frequency"):
        parse_dict({"excitation": {"frequency": 0.0}})


def test_target_kinds():
    g = parse_dict({"target": {"kind": "gaussian", "sigma_y": 0.01}})
    assert g.target["sigma_y"] == 0.01
    assert g.target["y_focus"] == 0.105  # default filled
    with pytest.raises(ConfigError, match="target.kind"):
        parse_dict({"target": {"kind": "mystery"}})
    with pytest.raises(ConfigError, match="target.path"):
        parse_dict({"target": {"kind": "stored"}})
    s = parse_dict({"target": {"kind": "stored", "path": "t.npz"}})
    assert s.target["path"] == "t.npz"
    with pytest.raises(ConfigError, match="target.goal: unknown key"):
        parse_dict({"target": {"kind": "synthetic", "goal": {"degree": 2}}})
    with pytest.raises(ConfigError, match="noise_level"):
        parse_dict({"target": {"kind": "synthetic", "goal": {}, "noise_level": -0.1}})


def test_bad_json_reports_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"time": {"n_steps": 100,}}')
    with pytest.raises(ConfigError, match="line 1 column"):
        parse_config(path, environ={})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        parse_config(tmp_path / "nope.json", environ={})


def test_env_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"time": {"t_final": 2e-5}}')
    env = {
        "LENSOPT_TIME__N_STEPS": "1201",
        "LENSOPT_DOMAIN__REFINEMENT__NX_INNER": "16",
        "LENSOPT_SEED": "7",
        "LENSOPT_OUT_DIR": "runs/override",  # non-JSON value falls back to raw string
        "UNRELATED": "ignored",
    }
    cfg = parse_config(path, environ=env)
    assert cfg.grid.t_final == 2e-5  # file value kept
    assert cfg.grid.n_steps == 1201
    assert cfg.domain.refinement.nx_inner == 16
    assert cfg.seed == 7
    assert cfg.out_dir == "runs/override"


def test_env_override_bad_value_still_validated(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("")
    with pytest.raises(ConfigError, match="time.n_steps"):
        parse_config(path, environ={"LENSOPT_TIME__N_STEPS": "ten"})


def test_default_dataclass_matches_parse():
    # RunConfig() is the same object parse_dict({}) produces
    assert RunConfig() == parse_dict({})


def test_grid_times_from_config():
    cfg = parse_dict({"time": {"t_final": 1e-5, "n_steps": 11}})
    assert np.array_equal(cfg.grid.times, np.linspace(0.0, 1e-5, 11))
