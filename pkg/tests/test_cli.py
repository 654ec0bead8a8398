import json
from pathlib import Path

import numpy as np
import pytest

import gpcsd.cli as cli
from gpcsd.errors import FitError
from gpcsd.io import read_arrays, read_dataset, write_arrays

GOLDEN = Path(__file__).parent / "data" / "dipole_lfp_noiseless.csv"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def gp_run(tmp_path_factory):
    """Small GP study: simulate, fit on the first half, predict the second."""
    d = tmp_path_factory.mktemp("gp")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"forward": {"n_per_dim": 40}}))
    assert run("simulate", "--study", "gp", "--seed", 3, "--n-trials", 8, "--n-times", 30, "--out", d / "sim") == 0
    assert run("fit", "--data", d / "sim" / "data", "--trials", "0:4", "--restarts", 2, "--seed", 1,
               "--config", cfg, "--out", d / "params.json") == 0
    assert run("predict", "--data", d / "sim" / "data", "--params", d / "params.json", "--trials", "4:8",
               "--grid", "interior-electrodes", "--split", "--out", d / "pred") == 0
    return d


def test_simulate_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("simulate", "--study", "gp", "--seed", 7, "--n-trials", 3, "--n-times", 10,
                   "--out", tmp_path / name) == 0
    for f in ("data/lfp.bin", "truth/total.bin", "truth/lfp_noiseless.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    meta = json.loads((tmp_path / "a" / "data" / "meta.json").read_text())
    assert meta["provenance"]["seed"] == 7 and "simulate" in meta["provenance"]["invocation"]


def test_noiseless_dipole_matches_golden(tmp_path):
    assert run("simulate", "--study", "dipole", "--noise", 0, "--out", tmp_path) == 0
    ds, _ = read_dataset(tmp_path / "data")
    unit = np.genfromtxt(GOLDEN, delimiter=",", comments="#")[24:, 2:]
    np.testing.assert_allclose(ds.lfp[0], unit, rtol=0, atol=1e-12)


def test_predict_outputs(gp_run):
    arrs, meta = read_arrays(gp_run / "pred")
    assert arrs["total"].shape == (4, 22, 30)
    np.testing.assert_allclose(arrs["slow"] + arrs["fast"] + arrs["mean"], arrs["total"], atol=1e-12 * np.abs(arrs["total"]).max())
    params = json.loads((gp_run / "params.json").read_text())
    assert params["provenance"]["seed"] == 1 and params["data_scale"] > 0
    assert meta["provenance"]["invocation"][0] == "predict"


def test_chain_compare(gp_run, capsys):
    d = gp_run
    assert run("baseline", "tcsd", "--data", d / "sim" / "data", "--trials", "4:8", "--out", d / "tc") == 0
    assert run("baseline", "kcsd", "--data", d / "sim" / "data", "--trials", "4:8", "--cv-trials", 4,
               "--R", 150, "--out", d / "kc") == 0
    assert (d / "kc" / "kcsd_cv.csv").exists()
    capsys.readouterr()
    assert run("compare", "--pred", d / "pred", "--pred", d / "tc", "--pred", d / "kc", "--truth", d / "sim" / "truth",
               "--trials", "4:8", "--out", d / "cmp.json") == 0
    out = capsys.readouterr().out
    assert "paired t-test pred_vs_tc" in out
    res = json.loads((d / "cmp.json").read_text())
    mse = {r["method"]: r["mean_mse"] for r in res["methods"]}
    assert mse["pred"] < mse["tc"]
    assert all(r["n_locations"] == 22 for r in res["methods"])


def test_compare_self_is_zero(gp_run, tmp_path):
    d = gp_run
    arrs, meta = read_arrays(d / "pred")
    write_arrays(tmp_path / "truth", "csd_truth", {"total": arrs["total"]}, meta["coords"], meta["times_ms"])
    assert run("compare", "--pred", d / "pred", "--pred", d / "pred", "--truth", tmp_path / "truth",
               "--out", tmp_path / "c.json") == 0
    res = json.loads((tmp_path / "c.json").read_text())
    assert res["methods"][0]["mean_mse"] == 0.0
    (t,) = [v["t"] for v in res["paired_ttests"].values()]
    assert t == 0.0 or np.isnan(t)


def test_spectra(gp_run, tmp_path):
    assert run("spectra", "--pred", gp_run / "pred", "--out", tmp_path) == 0
    for c in ("slow", "fast", "total"):
        rows = (tmp_path / f"spectrum_{c}.csv").read_text().splitlines()
        assert len(rows) == 2 + 22
    write_arrays(tmp_path / "t", "csd_prediction", {"total": np.zeros((2, 3, 8))}, [0, 1, 2], np.arange(8.0))
    assert run("spectra", "--pred", tmp_path / "t", "--out", tmp_path / "x") == 2


def test_two_probe_plv(tmp_path, rng):
    t = np.arange(600.0)
    common = rng.standard_normal((12, 1, 600))
    for k in range(2):
        x = common + 0.5 * rng.standard_normal((12, 24, 600))
        write_arrays(tmp_path / f"p{k}", "csd_prediction", {"total": x}, np.arange(24) * 100.0 + 5000 * k, t)
    args = ["plv", "--pred", tmp_path / "p0", "--pred", tmp_path / "p1", "--band", "8,12", "--time-index", 250]
    assert run(*args, "--out", tmp_path / "a.csv") == 0
    assert run(*args, "--out", tmp_path / "b.csv") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    m = np.genfromtxt(tmp_path / "a.csv", delimiter=",", comments="#", skip_header=2)[:, 1:]
    assert m.shape == (48, 48)
    np.testing.assert_array_equal(m, m.T)
    np.testing.assert_array_equal(np.diag(m), 1.0)
    assert run(*args[:-1], 5, "--out", tmp_path / "c.csv") == 2


def test_import_csv_command(tmp_path):
    (tmp_path / "x.csv").write_text("trial,channel,a,b\n0,0,1,2\n0,1,3,4\n0,2,5,6\n")
    assert run("import-csv", "--csv", tmp_path / "x.csv", "--coords", "0,100,200", "--sample-rate", 500,
               "--out", tmp_path / "d") == 0
    ds, meta = read_dataset(tmp_path / "d")
    np.testing.assert_array_equal(ds.lfp[0], [[1, 2], [3, 4], [5, 6]])
    assert meta["provenance"]["invocation"][0] == "import-csv"


def test_exit_codes(gp_run, tmp_path, monkeypatch, capsys):
    with pytest.raises(SystemExit) as e:
        run("fit", "--data")
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        run("simulate", "--study", "gp", "--seed", "x", "--out", tmp_path)
    assert e.value.code == 2
    assert run("simulate", "--study", "nope", "--out", tmp_path / "s") == 2
    assert run("baseline", "kcsd", "--data", gp_run / "sim" / "data", "--out", tmp_path / "k") == 2

    run("simulate", "--study", "gp", "--n-trials", 2, "--n-times", 5, "--out", tmp_path / "bad")
    binf = tmp_path / "bad" / "data" / "lfp.bin"
    binf.write_bytes(binf.read_bytes()[:-3])
    capsys.readouterr()
    assert run("fit", "--data", tmp_path / "bad" / "data", "--out", tmp_path / "p.json") == 2
    assert "bytes; expected" in capsys.readouterr().err

    def boom(*a, **k):
        raise FitError("all restarts failed")

    monkeypatch.setattr(cli, "fit_map", boom)
    assert run("fit", "--data", gp_run / "sim" / "data", "--out", tmp_path / "p.json") == 3
