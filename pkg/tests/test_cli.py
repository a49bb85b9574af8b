import json

import numpy as np
import pytest

from commtopo import cli
from commtopo.cli import main, parse_seeds, read_table, write_table

QUICK = ["--set", "data.N_coll=3", "--set", "trials.mse=2"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def collected(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("collect", "--out", out, "--seeds", "0,1", *QUICK) == 0
    return out


def test_parse_seeds():
    assert parse_seeds("0-3,7") == [0, 1, 2, 3, 7]
    assert parse_seeds("5") == [5]


def test_collect_files(collected):
    d = collected / "data" / "seed_0"
    hdr = json.loads((d / "bundle.json").read_text())
    assert hdr["shapes"]["UP"] == [12, 193] and hdr["L"] == 193
    assert len(list((d / "raw").glob("*.npy"))) == 3
    pe = json.loads((d / "pe.json").read_text())
    assert pe["ok"] and pe["required"] == 64


def test_collect_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("collect", "--out", tmp_path / name, "--seeds", "4", *QUICK) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        if f.name == "metadata.json":
            continue
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_short_data_exit_2(tmp_path, capsys):
    assert run("collect", "--out", tmp_path, "--set", "data.T=60") == 2
    assert "T_min" in capsys.readouterr().err


def test_missing_inputs_exit_2(tmp_path):
    assert run("optimize", "--out", tmp_path) == 2
    assert run("evaluate", "--out", tmp_path) == 2
    assert run("collect", "--out", tmp_path, "--config", tmp_path / "nope.json") == 2
    assert run("collect", "--out", tmp_path, "--set", "bogus") == 2
    assert run("collect", "--out", tmp_path, "--set", "optimizer.big_m=-1") == 2


def test_config_file_and_overrides(tmp_path):
    cfgfile = tmp_path / "cfg.json"
    cfgfile.write_text(json.dumps({"data": {"N_coll": 2}, "sweep": {"c": [1.0]}}))
    cfg = cli.ExperimentConfig.build(cfgfile, ["sweep.c=[2, 3]", "noise.mode=none"], [9])
    assert cfg.data().N_coll == 2 and cfg.raw["sweep"]["c"] == [2, 3]
    assert cfg.noise().mode == "none" and cfg.seeds == [9]


def test_optimize_table_roundtrip(collected):
    assert run("optimize", "--out", collected, "--seeds", "0,1", *QUICK) == 0
    rows = read_table(collected / "optimize" / "table.csv", "table")
    assert [r["c"] for r in rows[:4]] == [0.001, 1.0, 20.0, 1000.0]
    links = [r["links"] for r in rows[:4]]
    assert links == sorted(links, reverse=True) and links[0] == 12
    res = json.loads((collected / "optimize" / "results_seed_0.json").read_text())
    for r, j in zip(rows, res["results"]):
        assert r["pred_cost"] == j["residual"] and r["mse"] == j["mse"]
        assert j["bounds"]["slack_lower"] >= -1e-9


def test_table_writer_roundtrip(tmp_path):
    rows = [{"seed": 1, "c": 0.1 + 0.2, "links": 3, "topology": "1<-2", "pred_cost": 1 / 3, "objective": 2.0, "mse": 1e-17}]
    write_table(tmp_path / "t.csv", "table", rows)
    assert read_table(tmp_path / "t.csv", "table") == rows


def test_empty_cost_list_header_only(collected, tmp_path):
    out = tmp_path / "e"
    (out / "data").mkdir(parents=True)
    (out / "data" / "seed_0").symlink_to(collected / "data" / "seed_0")
    assert run("optimize", "--out", out, "--seeds", "0", "--set", "sweep.c=[]") == 0
    assert (out / "optimize" / "table.csv").read_text() == "seed,c,links,topology,pred_cost,objective,mse\n"


def test_verify_mismatch_exit_3(collected, monkeypatch):
    import commtopo.topology as topo_mod
    real = topo_mod._solve_exhaustive

    def wrong(bundle, costs, cfg, max_agents=4):
        r = real(bundle, costs, cfg)
        return topo_mod.OptimizationResult(r.topology, r.predictor, r.objective * 2, r.residual,
                                           r.link_cost, r.per_agent, r.big_m_exceeded, r.mode)

    monkeypatch.setattr(topo_mod, "_solve_exhaustive", wrong)
    assert run("optimize", "--out", collected, "--seeds", "0", "--verify", *QUICK,
               "--set", "sweep.c=[1.0]") == 3


def test_verify_command(collected):
    assert run("verify", "--out", collected, "--seeds", "0", "--set", "verify.n_instances=3",
               "--set", "sweep.c=[1.0]") == 0


def test_evaluate_summary(collected):
    assert run("optimize", "--out", collected, "--seeds", "0,1", *QUICK) == 0
    assert run("evaluate", "--out", collected, "--seeds", "0,1", "--set", "evaluate.c=[0.001,1,20,1e9]",
               "--set", "evaluate.n_random=1", "--set", "mpc.T_sim=20", "--jobs", "2") == 0
    d = collected / "evaluate"
    summary = json.loads((d / "summary.json").read_text())
    assert -1 <= summary["spearman_pred_vs_J"] <= 1
    by = {r["links"]: r for r in read_table(d / "voc_by_links.csv", "voc_by_links")}
    assert by[0]["ratio"] == 1.0 and by[12]["ratio"] == 1.0
    rows = read_table(d / "voc_rows.csv", "voc_rows")
    assert len(rows) == 8


def test_tune_grid(tmp_path):
    args = ["tune", "--out", tmp_path, "--set", "sweep.T=[100,200]", "--set", "sweep.N_coll=[1,5]",
            "--set", "trials.tune=2"]
    assert run(*args) == 0
    rows = read_table(tmp_path / "tune" / "grid.csv", "tune")
    assert [(r["T"], r["N_coll"]) for r in rows] == [(100, 1), (100, 5), (200, 1), (200, 5)]
    assert all(np.isfinite(r["mse"]) for r in rows)
    assert run("tune", "--out", tmp_path, "--set", "sweep.T=[]") == 2


def test_tune_noise_free_cell(tmp_path):
    assert run("tune", "--out", tmp_path, "--set", "noise.mode=none", "--set", "sweep.T=[200]",
               "--set", "sweep.N_coll=[1]", "--set", "trials.tune=1") == 0
    assert read_table(tmp_path / "tune" / "grid.csv", "tune")[0]["mse"] <= 1e-10
