import csv
import json

import numpy as np
import pytest
import yaml

from atom_mirror.cli import main
from atom_mirror.config import ConfigError, build_config, load_config, sweep_values
from atom_mirror.observables import CorrelationSeries, ReflectionTrace, Spectrum
from atom_mirror.serialize import read_reflection, serialize

CUT = {
    "experiment": "reflection-cut",
    "n_trajectories": 1,
    "loop": {"tau": 0.2, "n_bins": 10, "phi": 0.4},
    "qubit": {"Gamma": 1.0},
    "drive": {"mode": "linear", "Omega_L": 0.001},
    "sweep": {"omega_p": {"start": -4, "stop": 4, "step": 0.5}},
}

SPEC = {
    "experiment": "spectrum-single",
    "n_trajectories": 6,
    "loop": {"tau": 0.02, "n_bins": 1},
    "qubit": {"Gamma": 1.0},
    "drive": {"mode": "nonlinear", "Omega_NL": 1.0},
    "sweep": {"omega": {"start": -6, "stop": 6, "step": 0.5}},
    "tolerances": {"n_anchors": 2, "lag_span": 3.0},
}


def write(tmp_path, data, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def test_sweep_values():
    assert np.allclose(sweep_values({"start": 0, "stop": 1, "step": 0.25}),
                       [0, 0.25, 0.5, 0.75, 1])
    assert np.allclose(sweep_values({"values": [3, 1]}), [3, 1])
    for bad in ({"start": 0, "stop": 1, "step": 0}, {"start": 1, "stop": 0, "step": 1}, {}):
        with pytest.raises(ValueError):
            sweep_values(bad)


def test_config_reports_every_problem():
    with pytest.raises(ConfigError) as exc:
        build_config({"experiment": "tilt-scan", "n_trajectories": 0, "bogus": 1,
                      "loop": {"tau": 1.0, "n_bins": 5, "extra": 2},
                      "drive": {"mode": "nonlinear", "Omega_NL": 1.0}})
    text = "\n".join(exc.value.problems)
    for fragment in ("bogus", "loop.extra", "n_trajectories", "sweep axis omega_p",
                     "phi or omega0", "linear"):
        assert fragment in text


def test_config_defaults_and_auto_bins():
    data = dict(SPEC, loop={"tau": 1.0, "n_bins": "auto"})
    cfg = build_config(data)
    assert cfg.loop.n_bins == 50  # dt limited to 0.02/Gamma
    assert cfg.drive.Omega_L == 0.0
    assert cfg.workers == 1
    res = cfg.resolved()
    assert res["master_seed"] == 0 and res["loop"]["n_bins"] == "auto"


def test_power_sweep_needs_calibration():
    data = dict(SPEC, experiment="spectrum-power-sweep",
                sweep={"omega": {"values": [0, 1]}, "power_dbm": {"values": [-110]}})
    with pytest.raises(ConfigError, match="kappa"):
        build_config(data)


def test_yaml_errors(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("loop: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_serialize_schema_and_idempotence(tmp_path):
    w = np.linspace(-1, 1, 5)
    spec = Spectrum(w, np.ones(5), np.full(5, 0.1))
    tr = ReflectionTrace(w, np.exp(1j * w), np.zeros(5), np.zeros(5), 1e-3)
    ser = CorrelationSeries(np.arange(3) * 0.1, np.ones(3, complex), np.zeros(3), 2, 0.0)
    meta = {"master_seed": 3, "value": 1.5}
    first = serialize({"spectrum": spec, "reflection": tr, "correlation": ser}, tmp_path / "a",
                      meta, time_unit=1e-9)
    second = serialize({"spectrum": spec, "reflection": tr, "correlation": ser}, tmp_path / "b",
                       meta, time_unit=1e-9)
    for p, q in zip(first, second):
        assert p.read_bytes() == q.read_bytes()
    assert first[-1].name == "metadata.json"
    heads = {p.name: p.read_text().splitlines()[0] for p in first[:-1]}
    assert heads["spectrum.csv"] == "omega_hz,s_value,s_stderr"
    assert heads["reflection.csv"] == "freq_hz,re_r,im_r,se_re,se_im"
    back = read_reflection(tmp_path / "a" / "reflection.csv", time_unit=1e-9)
    assert np.allclose(back.omega_p, w) and np.allclose(back.r, tr.r)
    with pytest.raises(TypeError):
        serialize({"x": 1}, tmp_path / "c", {})


def test_cli_reflection_cut(tmp_path, capsys):
    out = tmp_path / "cut"
    rc = main(["--config", str(write(tmp_path, CUT)), "--out", str(out)])
    assert rc == 0
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["master_seed"] == 0 and meta["config"]["loop"]["tau"] == 0.2
    assert len(meta["config_hash"]) == 16
    assert 0.5 < meta["circle_fit"]["radius"] < 1.1
    with open(out / "reflection.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 17


def test_cli_rerun_is_byte_identical_and_thread_independent(tmp_path):
    cfg = write(tmp_path, SPEC)
    assert main(["--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert main(["--config", str(cfg), "--out", str(tmp_path / "c"), "--threads", "3"]) == 0
    for name in ("spectrum.csv", "correlation.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        assert a == (tmp_path / "c" / name).read_bytes()
    ma, mb = (json.loads((tmp_path / d / "metadata.json").read_text()) for d in "ab")
    # only the output directory differs between the two runs
    assert ma["config"].pop("output") != mb["config"].pop("output")
    assert ma == mb


def test_cli_overrides(tmp_path):
    cfg = write(tmp_path, SPEC)
    out = tmp_path / "o"
    assert main(["--config", str(cfg), "--out", str(out), "--seed", "9",
                 "--trajectories", "3"]) == 0
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["master_seed"] == 9 and meta["config"]["n_trajectories"] == 3


def test_cli_exit_codes(tmp_path, capsys):
    bad = dict(CUT, n_trajectories=0)
    assert main(["--config", str(write(tmp_path, bad, "bad.yaml"))]) == 1
    assert "n_trajectories" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.yaml")]) == 3
    # no emitter coupling: a flat trace has no resonance to fit
    flat = dict(CUT, qubit={"Gamma": 0.0})
    out = tmp_path / "flat"
    assert main(["--config", str(write(tmp_path, flat, "flat.yaml")), "--out", str(out)]) == 2
    # partial data are flushed before the abort
    assert (out / "reflection.csv").exists()
    assert json.loads((out / "metadata.json").read_text())["partial"] is True
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["--config", str(write(tmp_path, CUT, "ok.yaml")),
                 "--out", str(blocker / "sub")]) == 3
    assert main(["--config", str(write(tmp_path, CUT, "x.yaml")),
                 "--experiment", "nonsense"]) == 1


def test_sweep_pipelines(tmp_path):
    tilt = dict(CUT, experiment="tilt-scan",
                sweep={"omega_p": {"start": -4, "stop": 4, "step": 0.5},
                       "omega0": {"values": [-0.3, 0.3]}},
                loop={"tau": 0.2, "n_bins": 10, "reference_antinode_freq": 0.0})
    out = tmp_path / "tilt"
    assert main(["--config", str(write(tmp_path, tilt, "t.yaml")), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "tilt.csv")))
    assert len(rows) == 2
    assert float(rows[0]["phi"]) == pytest.approx(-0.06)
    mp = dict(tilt, experiment="reflection-map")
    out = tmp_path / "map"
    assert main(["--config", str(write(tmp_path, mp, "m.yaml")), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "reflection_map.csv")))
    assert len(rows) == 34 and set(rows[0]) >= {"omega0_hz", "freq_hz", "re", "im"}
