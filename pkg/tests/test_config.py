import json
import os

import pytest

from conftest import CONFIGS, config_path
from hemoshape.config import SCHEMA_VERSION, ConfigError, RunConfig, load_config

SHIPPED = sorted(f for f in os.listdir(CONFIGS) if f.endswith(".json"))


def minimal(**sections):
    d = {"schema_version": SCHEMA_VERSION}
    d.update(sections)
    return d


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_are_fixed_points(name):
    cfg = load_config(config_path(name))
    again = RunConfig(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    # and through JSON text as well
    assert RunConfig(json.loads(cfg.dumps())).to_dict() == cfg.to_dict()


def test_defaults_are_filled():
    cfg = RunConfig(minimal())
    assert cfg.data["solver"]["n_layers"] == 5
    assert cfg.data["rheology"]["p"] == pytest.approx(5.0)
    assert cfg.functional.kind == "hemolysis_r"
    assert cfg.optimizer is None


@pytest.mark.parametrize("data, msg", [
    ({"schema_version": 2}, "schema_version"),
    ({}, "schema_version"),
    (minimal(extra=1), "unknown top-level"),
    (minimal(solver={"n_layer": 4}), "unknown keys"),
    (minimal(solver={"n_layers": 1}), "n_layers"),
    (minimal(solver={"mesh_h": 0.0}), "mesh_h"),
    (minimal(solver={"n_rings": 1}), "n_rings"),
    (minimal(solver={"ensemble": 0}), "ensemble"),
    (minimal(functional={"kind": "drag"}), "functional kind"),
    (minimal(functional={"kind": "tracking"}), "tracking"),
    (minimal(rheology={"q": 2.5}), r"outside \(6/5, 2\]"),
    (minimal(domain="disk"), "must be an object"),
])
def test_invalid_configurations(data, msg):
    with pytest.raises(ConfigError, match=msg):
        RunConfig(data)


def test_r_outside_window_reports_the_window():
    with pytest.raises(ConfigError, match=r"\[1, 2\]"):
        RunConfig(minimal(rheology={"q": 1.5},
                          hemolysis={"c_h": 1.0, "alpha": 1.5, "beta": 0.5, "r": 2.5}))


def test_inadmissible_domain_is_a_config_error():
    with pytest.raises(ConfigError):
        RunConfig(minimal(domain={"radial_coeffs": [1.0, 0.9, 0.0]}))


def test_optimizer_section_checks():
    with pytest.raises(ConfigError, match="x0"):
        RunConfig(minimal(optimizer={"kind": "disk_area"}))
    with pytest.raises(ConfigError, match="optimizer kind"):
        RunConfig(minimal(optimizer={"kind": "best", "x0": [1.0]}))
    with pytest.raises(ConfigError, match="entries"):
        RunConfig(minimal(optimizer={"kind": "disk_area", "x0": [1.0, 0.0]}))


def test_hash_covers_file_bytes(tmp_path):
    src = config_path("zero_flow.json")
    a = load_config(src)
    copy = tmp_path / "z.json"
    copy.write_bytes(open(src, "rb").read() + b"\n")
    b = load_config(copy)
    assert a.to_dict() == b.to_dict()
    assert a.source_hash != b.source_hash
    assert len(a.source_hash) == 64


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_overrides_are_validated():
    cfg = load_config(config_path("zero_flow.json"))
    assert cfg.with_overrides(seed=7).data["seed"] == 7
    with pytest.raises(ConfigError):
        cfg.with_overrides(solver={"n_layers": 0})
