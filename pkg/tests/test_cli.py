import json
from importlib.resources import files

import pytest

from transfer_dr.cli import main

DATA = files("transfer_dr") / "datasets"


def _fit_args(out, *extra, source=None, target=None):
    return [
        "fit", "--source", str(source or DATA / "source.csv"), "--target", str(target or DATA / "target.csv"),
        "--x-cols", "x1", "--z-cols", "z1", "--add-intercept", "--out-dir", str(out), *extra,
    ]


def test_fit_is_deterministic(tmp_path, capsys):
    for run in ("a", "b"):
        assert main(_fit_args(tmp_path / run, "--method", "dr", "--bootstrap", "50", "--seed", "7")) == 0
    for name in ("coefficients.csv", "coefficients.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = json.loads((tmp_path / "a" / "coefficients.json").read_text())["coefficients"]
    assert [r["covariate"] for r in rows] == ["x1", "intercept", "z1"]
    assert rows[0]["estimate"] == pytest.approx(0.959, abs=0.1)
    assert rows[0]["ci_lower"] < rows[0]["estimate"] < rows[0]["ci_upper"]
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seeds"] == {"bootstrap_master_seed": 7}
    assert len(man["inputs"]) == 2 and all(len(v) == 64 for v in man["inputs"].values())
    assert "x1" in capsys.readouterr().out


def test_fit_csv_uses_round_trip_floats(tmp_path):
    assert main(_fit_args(tmp_path, "--method", "iw")) == 0
    lines = (tmp_path / "coefficients.csv").read_text().splitlines()
    assert lines[0] == "covariate,estimate,se,ci_lower,ci_upper,p_value"
    est = float(lines[1].split(",")[1])
    js = json.loads((tmp_path / "coefficients.json").read_text())
    assert est == js["coefficients"][0]["estimate"]


def test_stray_x_in_target_is_recorded(tmp_path):
    tgt = tmp_path / "t.csv"
    rows = (DATA / "target.csv").read_text().splitlines()
    tgt.write_text("\n".join([rows[0] + ",x1"] + [r + ",0" for r in rows[1:]]) + "\n")
    assert main(_fit_args(tmp_path / "o", "--method", "imp", target=tgt)) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert any("x1" in w for w in man["warnings"])


def test_centered_fit_keeps_slopes(tmp_path):
    assert main(_fit_args(tmp_path / "raw", "--method", "dr")) == 0
    assert main(_fit_args(tmp_path / "cen", "--method", "dr", "--center", "center")) == 0
    raw = json.loads((tmp_path / "raw" / "coefficients.json").read_text())["coefficients"]
    cen = json.loads((tmp_path / "cen" / "coefficients.json").read_text())["coefficients"]
    for j in (0, 2):
        assert cen[j]["estimate"] == pytest.approx(raw[j]["estimate"], abs=1e-8)


def test_missing_flag_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["fit", "--source", "a.csv"])
    assert err.value.code == 2


def test_bad_input_exits_2(tmp_path, capsys):
    bad = tmp_path / "s.csv"
    bad.write_text("y,x1,z1\n1,2,oops\n")
    assert main(_fit_args(tmp_path / "o", "--method", "dr", source=bad)) == 2
    assert "non-numeric" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("x_model = M_nope\n")
    assert main(["truth", "--config-file", str(cfg), "--mc-size", "1000"]) == 2
    with pytest.raises(SystemExit) as err:
        main(["truth", "--config", "IV"])
    assert err.value.code == 2


def test_numerical_failure_exits_3(tmp_path, capsys):
    src = tmp_path / "s.csv"
    # x is an exact copy of z1, so the estimating equations are singular
    src.write_text("y,x1,z1\n" + "".join(f"{i % 3},{i},{i}\n" for i in range(10)))
    tgt = tmp_path / "t.csv"
    tgt.write_text("y,z1\n" + "".join(f"{i % 2},{i}\n" for i in range(6)))
    assert main(_fit_args(tmp_path / "o", "--method", "iw", source=src, target=tgt)) == 3


def test_truth_mc_se_shrinks_with_size(capsys):
    ses = []
    for size in ("1e5", "4e5"):
        assert main(["truth", "--config", "I", "--mc-size", size, "--json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["beta"] == pytest.approx(0.959, abs=0.02)
        ses.append(payload["mc_se"]["beta"])
    assert 1.0 < ses[0] / ses[1] < 4.0


def test_quick_simulate_is_deterministic(tmp_path, capsys):
    args = ["simulate", "--config", "II", "--replications", "2", "--bootstrap", "4",
            "--total-size", "300", "--truth-mc-size", "1e5"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b"), "--threads", "2"]) == 0
    for name in ("scenario_II.csv", "scenario_II.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["scenario"]["replications"] == 2


def test_simulate_from_config_file(tmp_path, capsys):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("preset = III\nreplications = 1\nbootstrap_B = 3\ntotal_size = 300\nname = tiny\n")
    assert main(["simulate", "--config-file", str(cfg), "--truth-mc-size", "1e5", "--out-dir", str(tmp_path)]) == 0
    text = (tmp_path / "scenario_tiny.csv").read_text().splitlines()
    assert len(text) == 7 and text[1].startswith("tiny,iw,beta,")
