import csv
import json

import pytest

from conftest import TOY_PMIN, constant_net
from highs_oracle import solve_lp_text
from opfguard.cli import main
from opfguard.dcopf import solve_dcopf
from opfguard.grid import save_case
from opfguard.mlp import save_net


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n", "300", "--seed", "4", "--out", str(root / "ds")]) == 0
    rc = main(["train", "--dataset", str(root / "ds"), "--layers", "8,8", "--epochs", "200",
               "--seeds", "0,1", "--out", str(root / "nets")])
    assert rc == 0
    return root


@pytest.fixture
def toy_files(tmp_path, toy_case):
    save_case(toy_case, tmp_path / "toy.json")
    save_net(constant_net(1, [TOY_PMIN]), tmp_path / "copy.json")
    save_net(constant_net(1, [TOY_PMIN + 5.0]), tmp_path / "off.json")
    return tmp_path


def test_gen_data_writes_rows_and_config(trained):
    rows = read_csv(trained / "ds" / "inputs.csv")
    assert len(rows) == 300
    cfg = json.loads((trained / "ds" / "config.json").read_text())
    assert cfg["command"] == "gen-data" and cfg["n_samples"] == 300 and cfg["seeds"] == [4]


def test_gen_data_is_byte_identical(trained, tmp_path):
    assert main(["gen-data", "--n", "300", "--seed", "4", "--out", str(tmp_path)]) == 0
    for name in ("inputs.csv", "targets.csv"):
        assert (tmp_path / name).read_bytes() == (trained / "ds" / name).read_bytes()


def test_train_writes_one_net_per_seed(trained):
    nets = trained / "nets"
    assert sorted(p.name for p in nets.glob("net_seed*.json")) == ["net_seed0.json", "net_seed1.json"]
    assert (nets / "train_log_seed0.png").stat().st_size > 0
    mae = read_csv(nets / "test_mae.csv")
    assert [r["seed"] for r in mae] == ["0", "1"]


def test_verify_all_metrics_dominate(trained, tmp_path):
    nets = [str(trained / "nets" / f"net_seed{s}.json") for s in (0, 1)]
    args = ["verify", "--all", "--dataset", str(trained / "ds"), "--out", str(tmp_path)]
    for n in nets:
        args += ["--net", n]
    assert main(args) == 0
    rows = read_csv(tmp_path / "aggregate.csv")
    assert {r["metric"] for r in rows} == {"nu_g", "nu_line", "nu_dist", "nu_opt"}
    for r in rows:
        assert float(r["guarantee"]) >= float(r["empirical"]) - 1e-7
        assert r["n_runs"] == "2"
    rep = json.loads((tmp_path / "report_net_seed0_nu_g.json").read_text())
    assert rep["stability"] == "certified" and rep["status"] == "Optimal"
    assert (tmp_path / "bounds_net_seed0_certified.json").exists()
    assert (tmp_path / "aggregate.png").stat().st_size > 0


def test_verify_dataset_stability_tag(trained, tmp_path):
    net = str(trained / "nets" / "net_seed0.json")
    rc = main(["verify", "--net", net, "--metric", "nu_g", "--relu-stability", "dataset",
               "--dataset", str(trained / "ds"), "--out", str(tmp_path)])
    assert rc == 0
    rep = json.loads((tmp_path / "report_net_seed0_nu_g.json").read_text())
    assert rep["stability"] in ("dataset", "certified")
    assert (tmp_path / "bounds_net_seed0_dataset.json").exists()


def test_perfect_copy_and_threshold(toy_files, tmp_path):
    base = ["verify", "--case", str(toy_files / "toy.json"), "--out", str(tmp_path)]
    assert main(base + ["--net", str(toy_files / "copy.json"), "--metric", "nu_g"]) == 0
    assert float(read_csv(tmp_path / "aggregate.csv")[0]["guarantee"]) == 0.0
    # 5 MW above the optimum over a 50 MW range is 10 %
    off = base + ["--net", str(toy_files / "off.json"), "--metric", "nu_dist"]
    assert main(off + ["--threshold", "11"]) == 0
    assert main(off + ["--threshold", "9"]) == 1


def test_config_file_and_flag_override(toy_files, tmp_path):
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"case": str(toy_files / "toy.json"), "metrics": ["nu_opt"], "big_m": 1e4}))
    rc = main(["verify", "--config", str(conf), "--net", str(toy_files / "copy.json"),
               "--metric", "nu_g", "--out", str(tmp_path / "o")])
    assert rc == 0
    echoed = json.loads((tmp_path / "o" / "config.json").read_text())
    assert echoed["metrics"] == ["nu_g"] and echoed["big_m"] == 1e4


def test_sweep_writes_csv(toy_files, tmp_path):
    rc = main(["sweep", "--case", str(toy_files / "toy.json"), "--net", str(toy_files / "off.json"),
               "--metric", "nu_dist", "--deltas", "0,0.1,0.2", "--out", str(tmp_path)])
    assert rc == 0
    rows = read_csv(tmp_path / "sweep_nu_dist.csv")
    assert [float(r["delta"]) for r in rows] == [0.0, 0.1, 0.2]
    assert list(rows[0]) == ["delta", "guarantee", "percent_of_initial", "unit", "status", "node_count"]
    assert all(float(r["guarantee"]) == pytest.approx(10.0, abs=1e-6) for r in rows)
    assert (tmp_path / "sweep.png").stat().st_size > 0


def test_export_lp_round_trips(tmp_path, case9):
    assert main(["export-lp", "--load-fraction", "0.8", "--out", str(tmp_path)]) == 0
    status, obj, _ = solve_lp_text((tmp_path / "dcopf.lp").read_text())
    assert status == "Optimal"
    assert obj == pytest.approx(solve_dcopf(case9, 0.8 * case9.load_max).objective_cost, rel=1e-9)


def test_export_lp_for_network_metric(toy_files, tmp_path):
    rc = main(["export-lp", "--case", str(toy_files / "toy.json"), "--net", str(toy_files / "off.json"),
               "--metric", "nu_opt", "--file", "m.lp", "--out", str(tmp_path)])
    assert rc == 0
    status, obj, _ = solve_lp_text((tmp_path / "m.lp").read_text())
    assert status == "Optimal" and obj == pytest.approx(15.0, abs=1e-6)


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-data", "--case", "/nonexistent/case.json", "--n", "10"],
        ["sweep", "--net", "x.json", "--deltas", ""],
        ["verify", "--metric", "nu_g"],
        ["verify", "--net", "/nonexistent/net.json", "--metric", "nu_bogus"],
        ["train", "--dataset", "/nonexistent"],
        ["export-lp", "--load", "1,2"],
        ["no-such-command"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)] if argv[0] != "no-such-command" else argv) == 2

