import csv
import json

import pytest

from sigma_mlmc.cli import main, parse_n_grid, parse_params


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_parse_n_grid():
    assert parse_n_grid("2^4..2^6") == [16, 32, 64]
    assert parse_n_grid("32,8,16") == [8, 16, 32]
    assert parse_n_grid("3^2,3^3") == [9, 27]
    assert parse_n_grid([4, 2]) == [2, 4]
    with pytest.raises(ValueError):
        parse_n_grid("2^4..3^6")


def test_parse_params():
    assert parse_params(["a=0.5", "x0=[1,2]", "name=foo"]) == {"a": 0.5, "x0": [1, 2], "name": "foo"}
    with pytest.raises(ValueError):
        parse_params(["oops"])


def test_estimate_plan_and_cost(tmp_path):
    rc = run(tmp_path, "estimate", "--model", "clark-cameron", "--payoff", "x2", "--n", "16", "--m", "2",
             "--alpha", "1", "--weights", "unit", "--kappa", "1", "--seed", "3")
    assert rc == 0
    doc = json.loads((tmp_path / "mlmc.json").read_text())
    assert doc["result"]["plan"]["N"] == [1024, 1024, 256, 64, 16]
    assert doc["result"]["correction_cost_units"] == 9600
    assert doc["seed"] == 3 and doc["config"]["n"] == 16
    assert doc["result"]["violates_condition_w"] is False
    rows = read_csv(tmp_path / "mlmc_levels.csv")
    assert [int(r["N"]) for r in rows] == [1024, 1024, 256, 64, 16]


def test_optimal_weights_carry_warning(tmp_path):
    assert run(tmp_path, "estimate", "--model", "clark-cameron", "--n", "16", "--weights", "optimal") == 0
    doc = json.loads((tmp_path / "mlmc.json").read_text())
    assert doc["result"]["violates_condition_w"] is True
    assert any("violates" in w for w in doc["result"]["warnings"])


@pytest.mark.parametrize("args", [
    ["rates", "--m", "2", "--n-grid", "8,16,32,64"],
    ["rates", "--model", "clark-cameron", "--m", "2", "--n-grid", "8,10,16,32"],
    ["noise", "--R", "1", "--n", "8"],
    ["estimate", "--model", "clark-cameron", "--payoff", "nope", "--n", "16"],
    ["estimate", "--model", "clark-cameron", "--n", "12"],
    ["estimate", "--model", "gbm-1d", "--payoff", "x2", "--n", "16"],
    ["estimate", "--model", "clark-cameron", "--n", "16", "--kappa", "1", "--target-cost", "100"],
    ["ablation", "--model", "clark-cameron", "--m", "2", "--n-grid", "2,4"],
    ["ablation", "--model", "clark-cameron", "--m", "3", "--n-grid", "3,9", "--permutations", "1,2,3"],
    ["bogus"],
    [],
])
def test_configuration_errors_exit_2(tmp_path, args, capsys):
    assert run(tmp_path, *args) == 2
    assert "usage" in capsys.readouterr().err


def test_constant_payoff_clt_exits_3(tmp_path, capsys):
    rc = run(tmp_path, "clt", "--model", "clark-cameron", "--payoff", "const", "--n", "4", "--R", "200")
    assert rc == 3
    assert "degenerate" in capsys.readouterr().err


def test_noise_theoretical_columns(tmp_path):
    assert run(tmp_path, "noise", "--m", "2", "--q", "2", "--n", "8", "--R", "2000", "--seed", "1") == 0
    theo = {float(r["theoretical_var"]) for r in read_csv(tmp_path / "noise.csv")}
    assert {0.25, 0.5} <= theo
    assert run(tmp_path, "noise", "--m", "3", "--q", "2", "--n", "9", "--R", "2000") == 0
    theo3 = [float(r["theoretical_var"]) for r in read_csv(tmp_path / "noise.csv")]
    assert any(abs(v - 2 / 27) < 1e-15 for v in theo3)


def test_config_file_rerun_is_bit_identical(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "trig-2d", "m": 2, "n_grid": "4,8,16,32", "R": 200, "seed": 11}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["rates", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["rates", "--config", str(cfg), "--out", str(b), "--threads", "3"]) == 0
    assert (a / "rates.json").read_bytes() == (b / "rates.json").read_bytes()
    assert (a / "rates.csv").read_bytes() == (b / "rates.csv").read_bytes()
    doc = json.loads((a / "rates.json").read_text())
    assert doc["config"]["n_grid"] == [4, 8, 16, 32] and doc["seed"] == 11


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "clark-cameron", "n": 16, "seed": 1}))
    assert main(["estimate", "--config", str(cfg), "--seed", "9", "--n", "8", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "mlmc.json").read_text())
    assert doc["seed"] == 9 and doc["config"]["n"] == 8


def test_unknown_config_key_exit_2(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "clark-cameron", "n": 16, "typo": 1}))
    assert main(["estimate", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_csv_floats_have_17_significant_digits(tmp_path):
    assert run(tmp_path, "rates", "--model", "trig-2d", "--n-grid", "4,8,16,32", "--R", "100") == 0
    row = read_csv(tmp_path / "rates.csv")[0]
    mant = row["rms_u"].split("e")[0].replace(".", "").replace("-", "").lstrip("0")
    assert len(mant) >= 15
    assert float(row["rms_u"]) == json.loads((tmp_path / "rates.json").read_text())["result"]["rms_u"][0]


def test_complexity_output(tmp_path):
    rc = run(tmp_path, "complexity", "--m", "2", "--n-grid", "2^4..2^8", "--weights", "unit,optimal")
    assert rc == 0
    rows = read_csv(tmp_path / "complexity.csv")
    assert list(rows[0]) == ["family", "n", "paper_cost", "cost_over_n2"]
    assert rows[0]["family"] == "unit" and rows[0]["paper_cost"] == "9600"
    assert len(rows) == 10


def test_ablation_and_models(tmp_path, capsys):
    assert run(tmp_path, "ablation", "--model", "trig-2d", "--m", "3", "--n-grid", "3,9",
               "--R", "100", "--permutations", "3,2,1;2,3,1") == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert {r["sigma"] for r in rows} == {"(3,2,1)", "(2,3,1)"}
    assert run(tmp_path, "models") == 0
    assert "clark-cameron" in capsys.readouterr().out


def test_clt_small_run(tmp_path):
    rc = run(tmp_path, "clt", "--model", "clark-cameron", "--payoff", "x2sq", "--n", "4", "--R", "200",
             "--kappa", "0.5", "--seed", "2")
    assert rc == 0
    doc = json.loads((tmp_path / "clt.json").read_text())
    assert 0.0 <= doc["result"]["p_value"] <= 1.0
    assert len(read_csv(tmp_path / "clt.csv")) == 200


def test_global_flags_before_command(tmp_path):
    assert main(["--seed", "5", "--out", str(tmp_path), "estimate", "--model", "clark-cameron", "--n", "8"]) == 0
    assert json.loads((tmp_path / "mlmc.json").read_text())["seed"] == 5
