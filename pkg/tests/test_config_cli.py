import csv
import json

import numpy as np
import pytest

from flowtdvp import config as cfgmod
from flowtdvp.cli import COMPARISON_COLUMNS, build_model, fmt, main, record_times, timeseries_columns
from flowtdvp.density import load_checkpoint
from flowtdvp.integrator import IntegratorConfig

FAST = ["--n-samples", "200", "--observables.n_samples", "500", "--dt", "0.01", "--t-end", "0.02"]


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_presets_validate():
    heat = cfgmod.load(experiment="heat8d")
    model = build_model(heat)
    assert model.n_params == 392 and heat["integrator"]["dt"] == 0.005
    ps = cfgmod.load(experiment="phasespace")
    assert build_model(ps).n_params == 411
    assert cfgmod.resolve_reference(ps) == "oracle"
    assert cfgmod.resolve_reference(cfgmod.load(experiment="heat8d", overrides=[("initial", "student_t")])) == "radial"
    sde = cfgmod.load(experiment="phasespace", overrides=[("k", "1"), ("temps", "10,3,1")])
    assert cfgmod.resolve_reference(sde) == "oracle"


def test_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(cfgmod.ConfigError, match="model.width"):
        cfgmod.load(overrides=[("model.width", "3")])
    with pytest.raises(cfgmod.ConfigError, match="integrator.dt"):
        cfgmod.load(overrides=[("dt", "-1")])
    with pytest.raises(cfgmod.ConfigError, match="problem.temps"):
        cfgmod.load(experiment="phasespace", overrides=[("temps", "1,2")])
    with pytest.raises(cfgmod.ConfigError, match="reference.kind"):
        cfgmod.load(experiment="heat8d", overrides=[("reference", "sde")])
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"hidden_units": 4}}))
    with pytest.raises(cfgmod.ConfigError, match="model.hidden_units"):
        cfgmod.load(bad)
    bad.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(cfgmod.ConfigError, match="schema_version"):
        cfgmod.load(bad)


def test_precedence(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"experiment": "heat8d", "integrator": {"dt": 0.02, "seed": 4}}))
    cfg = cfgmod.load(f, overrides=[("seed", "9")])
    assert cfg["integrator"]["dt"] == 0.02 and cfg["integrator"]["seed"] == 9 and cfg["model"]["dim"] == 8


def test_parse_value():
    assert cfgmod.parse_value("yes", False) is True
    assert cfgmod.parse_value("1,2.5", [0.0]) == [1.0, 2.5]
    assert cfgmod.parse_value("[1, 2]", []) == [1, 2]
    assert cfgmod.parse_value("null", [1.0]) is None
    assert cfgmod.parse_value("7", 1) == 7
    with pytest.raises(ValueError):
        cfgmod.parse_value("maybe", True)


def test_canonical_json_is_stable():
    cfg = cfgmod.load(experiment="phasespace")
    text = cfgmod.canonical_json(cfg)
    assert text == cfgmod.canonical_json(json.loads(text)) and text.endswith("}\n")
    assert cfgmod.load(overrides=[("dt", "0.1")])["integrator"]["dt"] == 0.1


def test_fmt_round_trips():
    x = 0.1 + 0.2
    assert float(fmt(x)) == x and fmt(3) == "3" and fmt(np.int64(2)) == "2"


def test_record_times():
    assert record_times(IntegratorConfig(dt=0.1, t_end=0.5, observe_every=2)) == pytest.approx([0, 0.2, 0.4, 0.5])
    assert record_times(IntegratorConfig(dt=0.0, t_end=0.0)) == [0.0]


def test_print_config(capsys):
    assert main(["run", "--experiment", "heat8d", "--print-config", "--seed", "3"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["integrator"]["seed"] == 3


def test_exit_codes(tmp_path, capsys):
    assert main(["run", "--experiment", "heat8d", "--model.bogus", "1"]) == 2
    assert main(["run", "--dt", "-1"]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert "config error" in capsys.readouterr().err


def test_run_heat_with_oracle(tmp_path):
    out = tmp_path / "heat"
    argv = ["run", "--D", "1", "--reference", "oracle", "--out", str(out)] + FAST
    assert main(argv) == 0
    cfg = json.loads((out / "config.json").read_text())
    series = _rows(out / "timeseries.csv")
    assert list(series[0]) == timeseries_columns(cfg)
    assert [float(r["t"]) for r in series] == pytest.approx([0.0, 0.02])
    comp = _rows(out / "comparison.csv")
    assert list(comp[0]) == COMPARISON_COLUMNS
    ent = [r for r in comp if r["quantity"] == "entropy"]
    assert len(ent) == 2 and all(abs(float(r["z_score"])) < 5 for r in ent)
    model, t, _ = load_checkpoint(out / "checkpoints" / "final.ckpt")
    assert t == pytest.approx(0.02) and model.dim == 2
    # identical seed, identical bytes
    out2 = tmp_path / "heat2"
    assert main(argv[:-len(FAST) - 2] + ["--out", str(out2)] + FAST) == 0
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
    assert strip(_rows(out2 / "timeseries.csv")) == strip(series)


def test_run_phase_space_with_sde(tmp_path):
    out = tmp_path / "ps"
    argv = [
        "run", "--experiment", "phasespace", "--initial", "student_t", "--reference", "sde",
        "--reference.n_particles", "200", "--reference.sde_dt", "1e-3", "--observables.spectrum", "true",
        "--out", str(out),
    ] + FAST
    assert main(argv) == 0
    comp = _rows(out / "comparison.csv")
    assert {r["quantity"] for r in comp} == {f"{q}_{i}" for q in ("mean", "var") for i in range(6)}
    assert sorted({float(r["t"]) for r in comp}) == pytest.approx([0.0, 0.02])
    spectrum = (out / "spectrum.csv").read_text().splitlines()
    assert len(spectrum) == 1 and len(spectrum[0].split(",")) == 1 + 412


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWTDVP_OUTPUT_ROOT", str(tmp_path))
    assert main(["run", "--t-end", "0", "--observables.n_samples", "100"]) == 0
    assert (tmp_path / "custom-gaussian-seed0" / "timeseries.csv").exists()


def test_verify_command(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 15 and all(line.startswith("PASS") for line in lines)
