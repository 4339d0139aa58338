import json
import math

import pytest

from orthomom.cli import main


def _run(capsys, *args):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def plm_csv(tmp_path, capsys):
    path = tmp_path / "plm.csv"
    code, _, _ = _run(capsys, "simulate", "--family", "plm", "--n", 800, "--seed", 1, "--with-oracle",
                      "--out", path)
    assert code == 0
    return path


def test_usage_errors(capsys):
    code, _, err = _run(capsys)
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["error"] == "Usage"
    code, _, _ = _run(capsys, "frobnicate")
    assert code == 1
    code, _, _ = _run(capsys, "plm", "--data", "x.csv")       # --seed missing
    assert code == 1


def test_simulate_and_plm(tmp_path, capsys, plm_csv):
    code, out, _ = _run(capsys, "plm", "--data", plm_csv, "--seed", 2, "--theta-bar", 0)
    doc = json.loads(out)
    assert code == 0 and doc["schema_version"] == "1"
    assert abs(doc["theta_hat"] - 1.0) < 5 * doc["se"]
    assert doc["reject"]
    code, out, _ = _run(capsys, "plm", "--data", plm_csv, "--seed", 2, "--oracle", "--estimator", "fs2sls")
    assert code == 0 and json.loads(out)["estimator"] == "fs2sls"


def test_roles_file_and_out(tmp_path, capsys):
    data, roles, res = tmp_path / "d.csv", tmp_path / "roles.json", tmp_path / "res.json"
    assert _run(capsys, "simulate", "--family", "plm", "--n", 300, "--seed", 3, "--out", data,
                "--roles-out", roles)[0] == 0
    assert json.loads(roles.read_text())["y1"] == "y1"
    code, out, _ = _run(capsys, "plm", "--data", data, "--roles", roles, "--seed", 1, "--out", res)
    assert code == 0 and out == ""
    assert "theta_hat" in json.loads(res.read_text())


def test_data_errors_exit_2(tmp_path, capsys):
    code, _, err = _run(capsys, "plm", "--data", tmp_path / "missing.csv", "--seed", 1)
    assert code == 2 and json.loads(err)["error"] == "FileNotFound"
    bad = tmp_path / "bad.csv"
    bad.write_text("y1,y2,z2,x1\n1,2,oops,3\n")
    code, _, err = _run(capsys, "plm", "--data", bad, "--seed", 1)
    assert code == 2 and json.loads(err)["error"] == "ParseError"
    learner = tmp_path / "l.json"
    learner.write_text("{not json")
    code, _, err = _run(capsys, "plm", "--data", bad, "--seed", 1, "--learner", learner)
    assert code == 2


def test_numerical_degeneracy_exit_3(tmp_path, capsys):
    path = tmp_path / "pi0.csv"
    _run(capsys, "simulate", "--family", "plm", "--n", 300, "--seed", 1, "--pi", 0, "--with-oracle",
         "--out", path)
    code, _, err = _run(capsys, "plm", "--data", path, "--seed", 1, "--oracle")
    assert code == 3 and json.loads(err)["error"] == "IrrelevantInstrument"


def test_hte_commands(tmp_path, capsys):
    path = tmp_path / "hte.csv"
    _run(capsys, "simulate", "--family", "hte", "--n", 1500, "--seed", 2, "--with-oracle", "--out", path,
         "--config", _write(tmp_path / "c.json", {"l_value": 0.6, "dim_x": 4}))
    code, out, _ = _run(capsys, "hte-test", "--data", path, "--l", "x1", "--seed", 1, "--oracle")
    doc = json.loads(out)
    assert code == 0 and doc["reject"] and doc["ci"][0] < doc["eta4_hat"] < doc["ci"][1]
    code, out, _ = _run(capsys, "hte-estimate", "--data", path, "--l", 0, "--seed", 1, "--k-phi", 0)
    assert code == 0 and json.loads(out)["l"] == "x1"
    code, _, err = _run(capsys, "hte-estimate", "--data", path, "--l", 9, "--seed", 1)
    assert code == 2 and json.loads(err)["error"] == "IndexOutOfRange"


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return path


def test_funcdiff_modes(tmp_path, capsys):
    model = _write(tmp_path / "m.json", {"family": "logit-panel-T2", "alpha_grid": [-1, 0, 1],
                                         "weights": [0.3, 0.4, 0.3]})
    functional = _write(tmp_path / "f.json", {"r": "alpha"})
    code, out, _ = _run(capsys, "funcdiff", "--model", model, "--theta", 0.5)
    assert code == 0 and json.loads(out)["dimension"] == 1
    for mode in ("partial", "fully", "general"):
        code, out, _ = _run(capsys, "funcdiff", "--model", model, "--theta", 0.5, "--mode", mode,
                            "--functional", functional)
        doc = json.loads(out)
        assert code == 0 and doc["moments"][0]["C"] == pytest.approx(1.0)
        if mode != "partial":
            assert abs(doc["theta_derivative"][0]) < 1e-6
    code, _, err = _run(capsys, "funcdiff", "--model", model, "--theta", 0.5, "--mode", "partial")
    assert code == 2
    nm = _write(tmp_path / "nm.json", {"family": "normal-means", "support": [0, 1]})
    code, out, _ = _run(capsys, "funcdiff", "--model", nm, "--theta", 1.0)
    assert code == 0 and json.loads(out)["moments"][0]["orthogonality_residual"] < 1e-8
    table = _write(tmp_path / "t.json", {"family": "custom-table", "table": [[0.5, 0.2], [0.6, 0.8]]})
    code, _, err = _run(capsys, "funcdiff", "--model", table, "--theta", 0.0)
    assert code == 3 and json.loads(err)["error"] == "NonStochastic"


def test_verify_targets(capsys):
    code, out, _ = _run(capsys, "verify", "--target", "plm", "--seed", 1, "--n", 3000, "--paths", 3)
    doc = json.loads(out)
    assert code == 0 and doc["lr"]["pass"] and not doc["plug_in"]["pass"]
    code, out, _ = _run(capsys, "verify", "--target", "funcdiff", "--seed", 1, "--paths", 3)
    assert code == 0 and all(r["pass"] for r in json.loads(out)["nf"])
    code, out, _ = _run(capsys, "verify", "--target", "hte", "--seed", 1, "--n", 1000, "--paths", 2)
    assert code == 0 and all(json.loads(out)[k]["pass"] for k in ("gamma", "eta3", "p"))


def test_mc_command(tmp_path, capsys):
    cfg = _write(tmp_path / "mc.json", {"replications": 6, "n": 200, "pipeline": "plm-test",
                                        "dgp": {"family": "plm"}, "options": {"k": 2}})
    out_path, rec_path = tmp_path / "out.json", tmp_path / "rec.csv"
    code, _, _ = _run(capsys, "mc", "--config", cfg, "--out", out_path)
    assert code == 1                                    # no master seed anywhere
    code, out, _ = _run(capsys, "mc", "--config", cfg, "--out", out_path, "--seed", 4, "--records", rec_path)
    assert code == 0
    doc = json.loads(out_path.read_text())
    assert doc["summary"]["replications"] == 6 and len(doc["records"]) == 6
    assert rec_path.read_text().startswith("rep,seed")
    code, _, _ = _run(capsys, "mc", "--config", cfg, "--out", out_path, "--seed", 4, "--timing")
    assert "wall_clock_seconds" in out_path.read_text()


def test_simulate_then_estimate_small(tmp_path, capsys):
    path = tmp_path / "d.csv"
    assert _run(capsys, "simulate", "--family", "plm", "--n", 100, "--seed", 7, "--out", path)[0] == 0
    code, out, _ = _run(capsys, "plm", "--data", path, "--seed", 1)
    assert code == 0 and math.isfinite(json.loads(out)["theta_hat"])
