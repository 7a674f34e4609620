import json

import pytest

from flare_uq import config as cfgmod
from flare_uq.errors import SchemaError


def test_preset_defaults():
    g = cfgmod.preset("grid")
    assert g["schedule"]["T"] == 800 and g["train"]["batch"] == 256
    s = cfgmod.preset("sine")
    assert s["schedule"]["T"] == 600 and s["train"]["lr"] == 5e-4 and s["train"]["batch"] == 512
    assert s["filter_percentile"] == 50.0
    for name in ("chirp", "damped"):
        c = cfgmod.preset(name)
        assert c["model"]["hidden"] == 128 and c["estimator"]["m"] == 4412
        assert c["filter_percentile"] == 25.0
    assert cfgmod.KEEP_FRACTIONS == [0.01, 0.05, 0.10, 0.30, 0.50]
    assert s["ablate"]["fractions"] == cfgmod.KEEP_FRACTIONS


def test_default_m():
    s = cfgmod.preset("sine")
    assert cfgmod.default_m(s, 9130) == 4565
    assert cfgmod.default_m(cfgmod.preset("chirp"), 10 ** 5) == 4412


def test_overlay_and_load(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "grid", "seed": 3, "train": {"steps": 10}}))
    c = cfgmod.load(str(path))
    assert c["seed"] == 3 and c["train"]["steps"] == 10 and c["train"]["lr"] == 5e-6
    assert cfgmod.load("preset:sine")["dataset"]["name"] == "sine"
    assert cfgmod.dumps(c) == cfgmod.dumps(cfgmod.load(str(path)))


@pytest.mark.parametrize("raw", [
    {"trian": {}},
    {"train": {"lr": 1e-3, "bogus": 1}},
    {"version": 2},
    {"seed": -1},
    {"dataset": {"name": "mnist"}},
    {"dataset": {"name": "sine", "overrides": {"freq": 2}}},
    {"estimator": {"kind": "ensemble"}},
    {"sampler": "euler"},
    {"filter_percentile": 0},
    {"schedule": {"T": 1}},
    {"preset": "cifar"},
    {"model": 3},
])
def test_rejects_bad_configs(raw):
    with pytest.raises(SchemaError):
        cfgmod.from_dict(raw)


def test_load_errors(tmp_path):
    with pytest.raises(SchemaError):
        cfgmod.load(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SchemaError):
        cfgmod.load(str(bad))
    bad.write_text("[1, 2]")
    with pytest.raises(SchemaError):
        cfgmod.load(str(bad))
