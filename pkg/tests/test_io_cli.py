import csv
import json
import logging

import numpy as np
import pytest

from qtb.cli import EXIT_CONFIG, EXIT_IDENTIFICATION, EXIT_INPUT, EXIT_OK, main, run_pipeline
from qtb.dgp import gen_regular_dgp
from qtb.io import (AnalysisConfig, ConfigKeyError, MissingFieldError, ResultBundle, Schema, SchemaError,
                    bin_codes, ingest_csv, load_propensity_table, quantile_edges)


def write_csv(path, rows, header=("r", "a", "y", "x")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def sample_csv(tmp_path, n1=400, seed=0, name="data.csv"):
    dgp = gen_regular_dgp()
    data = dgp.sample(n1, int(1.5 * n1), np.random.default_rng(seed), dgp.grid(41))
    rows = []
    for r, a, y, x in zip(data.r, data.a, data.y, data.x):
        rows.append((r, a if r else "", f"{y:.6f}" if r else "", f"c{x}"))
    path = write_csv(tmp_path / name, rows)
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({"categorical": ["x"]}))
    return path, schema


def test_four_row_toy(tmp_path):
    p = write_csv(tmp_path / "t.csv", [(1, 1, 0.5, "u"), (1, 0, 0.1, "u"), (0, "", "", "u"), (0, "", "", "u")])
    data = ingest_csv(p, Schema(categorical=["x"]))
    assert (data.n1, data.n0, data.n_cells) == (2, 2, 1)


def test_target_outcomes_are_masked_with_warning(tmp_path, caplog):
    p = write_csv(tmp_path / "t.csv", [(1, 1, 0.5, "u"), (1, 0, 0.1, "u"), (0, 1, 9.0, "u")])
    with caplog.at_level(logging.WARNING):
        data = ingest_csv(p, Schema(categorical=["x"]))
    assert "ignored" in caplog.text
    assert data.a[2] == -1 and np.isnan(data.y[2])


def test_quantile_bins():
    v = np.arange(1.0, 10.0)
    edges = quantile_edges(v, 3)
    assert edges.tolist() == pytest.approx([np.quantile(v, 1 / 3), np.quantile(v, 2 / 3)])
    assert np.bincount(bin_codes(v, edges)).tolist() == [3, 3, 3]
    assert quantile_edges(v, 1).size == 0


def test_numeric_covariate_binning(tmp_path):
    rows = [(1, i % 2, float(i), float(i)) for i in range(9)] + [(0, "", "", float(i)) for i in range(9)]
    p = write_csv(tmp_path / "t.csv", rows)
    data, coding = ingest_csv(p, Schema(bins=3), return_coding=True)
    assert data.n_cells == 3 and len(coding.edges["x"]) == 2


def test_missing_fields_report_line_numbers(tmp_path):
    p = write_csv(tmp_path / "t.csv", [(1, 1, 0.5, "u"), (1, "", 0.1, "u"), (0, "", "", "u"), (1, 0, "NA", "u")])
    with pytest.raises(MissingFieldError) as err:
        ingest_csv(p, Schema(categorical=["x"]))
    assert err.value.rows == [3, 5]
    assert "lines 3, 5" in str(err.value)


def test_schema_errors(tmp_path):
    p = write_csv(tmp_path / "t.csv", [(1, 1, 0.5, "u"), (0, "", "", "v")])
    with pytest.raises(SchemaError):
        ingest_csv(p)  # text covariate not declared categorical
    with pytest.raises(SchemaError):
        ingest_csv(p, Schema(y="outcome"))
    with pytest.raises(SchemaError):
        Schema.from_dict({"colour": "x"})
    bad = write_csv(tmp_path / "b.csv", [(2, 1, 0.5, "u")])
    with pytest.raises(SchemaError):
        ingest_csv(bad, Schema(categorical=["x"]))


def test_propensity_table(tmp_path):
    p = write_csv(tmp_path / "e.csv", [(0, 0.3), (1, 0.6)], header=("cell", "e1"))
    assert load_propensity_table(p, 2).tolist() == [0.3, 0.6]
    with pytest.raises(SchemaError):
        load_propensity_table(p, 3)


def test_config_validation():
    assert AnalysisConfig.from_dict({"taus": [0.5]}).taus == [0.5]
    with pytest.raises(ConfigKeyError):
        AnalysisConfig.from_dict({"gama": 2})
    for bad in ({"sensitivity": [[0.5, 1.0]]}, {"taus": [1.5]}, {"folds": 1}, {"design": "known"},
                {"n_draws": 10}, {"s_rect": [2, 1, 1, 2]}):
        with pytest.raises(ConfigKeyError):
            AnalysisConfig.from_dict(bad)
    a, b = AnalysisConfig(), AnalysisConfig()
    assert a.digest() == b.digest() and a.digest() != AnalysisConfig(seed=1).digest()


def test_bundle_round_trip_and_determinism(tmp_path):
    path, schema = sample_csv(tmp_path)
    data = ingest_csv(path, Schema.load(schema))
    cfg = AnalysisConfig(sensitivity=[[1.0, 1.0], [1.6, 1.4]], grid_size=41, n_draws=99)
    b1 = run_pipeline(cfg, data, "estimate")
    b2 = run_pipeline(cfg, data, "estimate")
    assert b1.to_json() == b2.to_json()
    b1.save(tmp_path / "out")
    text = (tmp_path / "out" / "result.json").read_text()
    back = ResultBundle.load(tmp_path / "out")
    assert back.to_json() == text
    assert np.allclose(back.arrays["psi"], b1.arrays["psi"], rtol=1e-11, atol=1e-15)
    assert (tmp_path / "out" / "hull.csv").exists() and (tmp_path / "out" / "quantiles.csv").exists()
    with pytest.raises(SchemaError):
        ResultBundle.from_json(json.dumps({"command": "x"}))
    for row in b1.tables["qte_band"]:
        assert row["lower"] <= row["upper"]


def test_subsample_inference_route(tmp_path):
    path, schema = sample_csv(tmp_path, n1=300)
    data = ingest_csv(path, Schema.load(schema))
    cfg = AnalysisConfig(sensitivity=[[1.6, 1.4]], grid_size=31, n_draws=99, inference="subsample", folds=2,
                         subsample_exponent=0.8)
    b = run_pipeline(cfg, data, "estimate")
    assert len(b.metadata["critical_values"]) == 1 and b.metadata["critical_values"][0] > 0


def test_cli_bounds(tmp_path, capsys):
    path, schema = sample_csv(tmp_path)
    code = main(["bounds", str(path), "--schema", str(schema), "--gamma", "1.6", "--lambda", "1.4",
                 "--tau-list", "0.25,0.5", "--grid-size", "41", "--out", str(tmp_path / "b")])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert len(summary["hull"]) == 2
    for row in summary["hull"]:
        assert row["delta_lo"] <= row["delta_hi"]
    assert ResultBundle.load(tmp_path / "b").command == "bounds"


def test_cli_estimate_saves_phi(tmp_path, capsys):
    path, schema = sample_csv(tmp_path, n1=200)
    code = main(["estimate", "--input", str(path), "--schema", str(schema), "--grid-size", "21",
                 "--draws", "99", "--save-phi", "--out", str(tmp_path / "e")])
    assert code == EXIT_OK
    phi = np.load(tmp_path / "e" / "phi.npy")
    assert phi.shape[0] == 500 and np.allclose(phi.mean(0), 0.0, atol=1e-12)
    assert "qte_band" in json.loads(capsys.readouterr().out)


def test_cli_frontier(tmp_path, capsys):
    path, schema = sample_csv(tmp_path, n1=300)
    code = main(["frontier", str(path), "--schema", str(schema), "--mesh", "5,4", "--rect", "1,3,1,2",
                 "--grid-size", "31", "--draws", "99", "--folds", "2", "--method", "subsample:0.8",
                 "--out", str(tmp_path / "f")])
    assert code == EXIT_OK
    b = ResultBundle.load(tmp_path / "f")
    assert b.arrays["kappa"].shape == (5, 4)
    assert np.all(b.arrays["inner"] <= b.arrays["outer"])
    assert json.loads(capsys.readouterr().out)["outer_share"] >= 0


def test_cli_audit(capsys):
    assert main(["audit", "--cases", "40"]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert max(res["max_err_lower"], res["max_err_upper"]) < 1e-8


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["bounds", str(tmp_path / "nope.csv")]) == EXIT_INPUT
    path, schema = sample_csv(tmp_path, n1=100)
    assert main(["bounds", str(path), "--schema", str(schema), "--gamma", "0.5", "--lambda", "1"]) == EXIT_CONFIG
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"unknown_key": 1}))
    assert main(["bounds", str(path), "--schema", str(schema), "--config", str(cfg)]) == EXIT_CONFIG
    # a covariate level present only in the target sample is not identified
    rows = [(1, 1, 0.5, "u"), (1, 0, 0.1, "u"), (1, 1, 0.3, "u"), (1, 0, 0.2, "u"), (0, "", "", "v")]
    bad = write_csv(tmp_path / "bad.csv", rows)
    assert main(["bounds", str(bad), "--schema", str(schema), "--folds", "2"]) == EXIT_IDENTIFICATION
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


def test_outcome_grid_placement():
    from qtb.cli import outcome_grid
    from qtb.estimation import TwoSampleData
    y = np.r_[np.linspace(-2.0, 3.0, 50), 0.0, 0.0]
    data = TwoSampleData(np.r_[np.ones(52, int), 0], np.zeros(53, int), np.r_[np.arange(52) % 2, -1],
                         np.r_[y, np.nan], 1)
    g = outcome_grid(data, 11).values
    assert g[0] == -2.0 and g[-1] == 3.0 and np.allclose(np.diff(g), 0.5)
    obs = outcome_grid(data, 11, "observed").values
    assert obs.size <= 11 and np.all(np.isin(obs, y))
    small = TwoSampleData([1, 1, 1, 1, 0], np.zeros(5, int), [0, 1, 0, 1, -1], [0.0, 1.0, 1.0, 5.0, np.nan], 1)
    assert outcome_grid(small, 11).values.tolist() == [0.0, 1.0, 5.0]
