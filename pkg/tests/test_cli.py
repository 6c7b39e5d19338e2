import json
import math

import pytest
from click.testing import CliRunner

from impact_bsde.cli import main
from impact_bsde.config import ConfigError, load_config, parse_config, validate_summary


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def one_period_doc(**market_overrides):
    market = {
        "risk_aversion": 1.0,
        "num_stocks": 1,
        "num_steps": 1,
        "horizon": 1.0,
        "demand": {"type": "constant", "value": 0.5},
        "dividend": {"type": "sign_of_b_t"},
    }
    market.update(market_overrides)
    return {"market": market}


def test_parse_config_round_trip(tmp_path):
    doc = one_period_doc()
    doc["solver"] = {"tol": 1e-12, "max_iter": 50, "method": "both"}
    doc["verify"] = {"suite": "homogeneity", "seed": 3}
    run = load_config(write_config(tmp_path, doc))
    assert run.market.risk_aversion == 1.0
    assert run.solver.method == "both"
    assert run.verify.suite == "homogeneity"


def test_unknown_key_rejected():
    doc = one_period_doc()
    doc["market"]["typo_field"] = 1
    with pytest.raises(ConfigError, match="market.typo_field"):
        parse_config(doc)


def test_bad_demand_variant_rejected():
    doc = one_period_doc(demand={"type": "mystery"})
    with pytest.raises(ConfigError, match="market.demand.type"):
        parse_config(doc)


def test_nested_spec_parsing():
    doc = one_period_doc(
        num_steps=4,
        demand={"type": "localized", "inner": {"type": "negative_sign_of_b"},
                "level": 0.0, "from_step": 1},
        dividend={"type": "localized", "inner": {"type": "sign_of_b_t"},
                  "level": 0.0, "from_step": 1},
    )
    run = parse_config(doc)
    assert run.market.demand.from_step == 1


def test_price_command_one_period(tmp_path):
    runner = CliRunner()
    cfg = write_config(tmp_path, one_period_doc())
    out = tmp_path / "out.json"
    result = runner.invoke(main, ["price", "--config", cfg, "--out", str(out)])
    assert result.exit_code == 0, result.output
    doc = json.loads(out.read_text())
    assert doc["initial_price"][0] == pytest.approx(-math.tanh(0.5), abs=1e-12)
    validate_summary(doc)


def test_price_command_zero_demand(tmp_path):
    runner = CliRunner()
    # odd depth keeps the signed terminal exactly centered
    doc = one_period_doc(demand={"type": "constant", "value": 0.0}, num_steps=5)
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "out.json"
    result = runner.invoke(main, ["price", "--config", cfg, "--out", str(out)])
    assert result.exit_code == 0
    summary = json.loads(out.read_text())
    assert summary["initial_price"][0] == pytest.approx(0.0, abs=1e-15)
    assert summary["initial_certainty"] == pytest.approx(0.0, abs=1e-15)


def test_price_command_rejects_bad_aversion(tmp_path):
    runner = CliRunner()
    cfg = write_config(tmp_path, one_period_doc(risk_aversion=-1.0))
    result = runner.invoke(main, ["price", "--config", cfg, "--out",
                                  str(tmp_path / "o.json")])
    assert result.exit_code == 2
    assert "risk_aversion" in result.output


def test_price_dump_nodes_csv(tmp_path):
    runner = CliRunner()
    cfg = write_config(tmp_path, one_period_doc(num_steps=2))
    out = tmp_path / "out.json"
    csv_path = tmp_path / "nodes.csv"
    result = runner.invoke(main, ["price", "--config", cfg, "--out", str(out),
                                  "--dump-nodes", str(csv_path)])
    assert result.exit_code == 0
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].split(",")[:3] == ["step", "node", "b"]
    assert len(lines) == 1 + 1 + 2 + 4


def test_output_determinism(tmp_path):
    runner = CliRunner()
    doc = one_period_doc(num_steps=5,
                         demand={"type": "negative_sign_of_b"},
                         dividend={"type": "sign_of_b_t", "scale": 0.5})
    cfg = write_config(tmp_path, doc)
    out_a = tmp_path / "a.json"
    out_b = tmp_path / "b.json"
    assert runner.invoke(main, ["price", "--config", cfg, "--out", str(out_a)]).exit_code == 0
    assert runner.invoke(main, ["price", "--config", cfg, "--out", str(out_b)]).exit_code == 0
    assert out_a.read_bytes() == out_b.read_bytes()


def test_bsde_command_both_methods_agree(tmp_path):
    runner = CliRunner()
    doc = one_period_doc(num_steps=6,
                         demand={"type": "constant", "value": 0.0},
                         dividend={"type": "sign_of_b_t"})
    doc["solver"] = {"method": "both"}
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "b.json"
    diag = tmp_path / "diag.csv"
    nodes = tmp_path / "nodes.csv"
    result = runner.invoke(main, ["bsde", "--config", cfg, "--out", str(out),
                                  "--diagnostics", str(diag),
                                  "--dump-nodes", str(nodes)])
    assert result.exit_code == 0, result.output
    summary = json.loads(out.read_text())
    assert summary["max_node_discrepancy"] <= 1e-12
    assert summary["picard"]["converged"] is True
    assert diag.read_text().splitlines()[0] == "iteration,distance,ratio,iterate_bmo"
    lines = nodes.read_text().strip().splitlines()
    assert lines[0].split(",")[:5] == ["step", "node", "b", "s_1", "r"]
    assert len(lines) == 1 + (2 ** 7 - 1)


def test_bsde_command_nonconvergence_is_data(tmp_path):
    runner = CliRunner()
    doc = one_period_doc(num_steps=10,
                         demand={"type": "negative_sign_of_b"},
                         dividend={"type": "sign_of_b_t"})
    doc["solver"] = {"method": "picard", "max_iter": 25}
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "b.json"
    result = runner.invoke(main, ["bsde", "--config", cfg, "--out", str(out)])
    assert result.exit_code == 0, result.output
    summary = json.loads(out.read_text())
    assert summary["picard"]["converged"] is False or any(
        r >= 1.0 for r in summary["picard"]["ratios"])


def test_norms_command(tmp_path):
    runner = CliRunner()
    cfg = write_config(tmp_path, one_period_doc(num_steps=4))
    out = tmp_path / "n.json"
    result = runner.invoke(main, ["norms", "--config", cfg, "--out", str(out)])
    assert result.exit_code == 0, result.output
    doc = json.loads(out.read_text())
    assert doc["norms"]["demand_sup"] == pytest.approx(0.5)
    assert doc["kappa_empirical"] >= 1.0


def test_verify_command_all_gates(tmp_path):
    runner = CliRunner()
    doc = one_period_doc(num_steps=5,
                         demand={"type": "negative_sign_of_b"},
                         dividend={"type": "sign_of_b_t", "scale": 0.5})
    doc["verify"] = {"competitors": 50, "counterexample_steps": [4, 5]}
    doc["solver"] = {"max_iter": 20}
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "v.json"
    result = runner.invoke(main, ["verify", "--config", cfg, "--out", str(out)])
    assert result.exit_code == 0, result.output
    doc = json.loads(out.read_text())
    assert doc["hard_gates_pass"] is True
    names = {c["name"] for c in doc["checks"]}
    assert "homogeneity" in names and "counterexample_probe" in names


def test_verify_single_suite(tmp_path):
    runner = CliRunner()
    cfg = write_config(tmp_path, one_period_doc(num_steps=4))
    out = tmp_path / "v.json"
    result = runner.invoke(main, ["verify", "--config", cfg, "--out", str(out),
                                  "--suite", "homogeneity"])
    assert result.exit_code == 0, result.output
    doc = json.loads(out.read_text())
    assert [c["name"] for c in doc["checks"]] == ["homogeneity"]


def test_sweep_command(tmp_path):
    runner = CliRunner()
    doc = one_period_doc(num_steps=5,
                         demand={"type": "constant", "value": 0.5},
                         dividend={"type": "sign_of_b_t", "scale": 0.5})
    doc["solver"] = {"max_iter": 40}
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "sweep.csv"
    result = runner.invoke(main, ["sweep", "--config", cfg, "--param", "demand_scale",
                                  "--from", "0.0", "--to", "1.0", "--points", "3",
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("param_value,smallness_product,converged")
    assert len(lines) == 4
    first = lines[1].split(",")
    # zero demand scale: trivially converged with vanishing market price of risk
    assert first[2] == "True"
    assert float(first[6]) == pytest.approx(0.0, abs=1e-12)


def test_sweep_risk_aversion_product_monotone(tmp_path):
    runner = CliRunner()
    doc = one_period_doc(num_steps=4,
                         demand={"type": "negative_sign_of_b"},
                         dividend={"type": "sign_of_b_t", "scale": 0.5})
    doc["solver"] = {"max_iter": 30}
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "sweep.csv"
    result = runner.invoke(main, ["sweep", "--config", cfg, "--param", "risk_aversion",
                                  "--from", "0.01", "--to", "2.0", "--points", "4",
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    rows = [line.split(",") for line in out.read_text().strip().splitlines()[1:]]
    products = [float(r[1]) for r in rows]
    assert products == sorted(products)


def test_summary_schema_guard():
    with pytest.raises(ConfigError, match="summary.initial_price"):
        validate_summary({"command": "price", "initial_price": 1.0,
                          "initial_certainty": 0.0})
    validate_summary({"command": "price", "initial_price": [1.0],
                      "initial_certainty": 0.0})
