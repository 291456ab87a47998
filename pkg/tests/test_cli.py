"""Command line contract: exit codes, atomic outputs, determinism, and
model serialization round-trips."""

import json
import os

import numpy as np
import pytest

from ran.cli import load_dataset_csv, load_model, main, save_model
from ran.model import build_anova_model, build_deep_stack
from ran.rng import stream


def _write_csv(path, X, y=None, labels=None, header=None):
    X = np.atleast_2d(X)
    lines = []
    if header is None:
        header = [f"x{i}" for i in range(X.shape[1])]
        header += ["label"] if labels is not None else ["y0"]
    lines.append(",".join(header))
    for i in range(X.shape[0]):
        cells = [f"{v:.12g}" for v in X[i]]
        cells.append(str(labels[i]) if labels is not None
                     else f"{y[i]:.12g}")
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def _toy_csv(tmp_path, n=60, seed=0, name="data.csv"):
    rng = stream(seed, "cli-data")
    X = rng.uniform(-1, 1, size=(n, 2))
    y = X[:, 0] * X[:, 1] + 0.5 * X[:, 0]
    return _write_csv(tmp_path / name, X, y)


# ---------------------------------------------------------------------------
# exit codes


def test_missing_subcommand_is_a_usage_error(capsys):
    assert main([]) == 2
    capsys.readouterr()


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == 0
    assert "train" in capsys.readouterr().out


def test_train_needs_a_data_source(tmp_path, capsys):
    rc = main(["train", "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "either --benchmark or --data" in capsys.readouterr().err


def test_benchmark_and_data_are_mutually_exclusive(tmp_path, capsys):
    csv = _toy_csv(tmp_path)
    rc = main(["train", "--benchmark", "runge", "--data", csv,
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "mutually exclusive" in capsys.readouterr().err


def test_unknown_benchmark_fails_with_known_names(tmp_path, capsys):
    rc = main(["train", "--benchmark", "does_not_exist",
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "unknown benchmark" in capsys.readouterr().err


def test_bad_flag_values_are_config_errors(tmp_path, capsys):
    csv = _toy_csv(tmp_path)
    out = str(tmp_path / "o")
    assert main(["train", "--data", csv, "--out", out,
                 "--degrees", "3"]) == 2
    assert "--degrees wants 'm,n'" in capsys.readouterr().err
    assert main(["train", "--data", csv, "--out", out,
                 "--topology", "ring:3"]) == 2
    assert "unknown topology" in capsys.readouterr().err
    assert main(["train", "--data", csv, "--out", out,
                 "--deep", "2,4", "--topology", "full"]) == 2
    assert "mutually exclusive" in capsys.readouterr().err
    assert main(["train", "--data", csv, "--out", out,
                 "--deep", "nope"]) == 2
    assert "--deep wants 'L,width'" in capsys.readouterr().err


def test_divergent_training_exits_three(tmp_path):
    rng = stream(1, "x")
    X = rng.uniform(-1, 1, size=(40, 1))
    csv = _write_csv(tmp_path / "big.csv", X, np.full(40, 1e200))
    out = tmp_path / "o"
    with np.errstate(over="ignore"):
        rc = main(["train", "--data", csv, "--out", str(out),
                   "--epochs", "4"])
    assert rc == 3
    metrics = (out / "metrics.csv").read_text()
    assert "diverged,1" in metrics
    assert (out / "model.json").exists()


# ---------------------------------------------------------------------------
# CSV loader diagnostics


def test_ragged_row_reports_the_line_number(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("x0,x1,y0\n0.1,0.2,0.3\n0.4,0.5\n")
    rc = main(["train", "--data", str(p), "--out", str(tmp_path / "o")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "bad.csv:3" in err and "expected 3 cells, got 2" in err


def test_non_numeric_and_non_finite_cells_are_rejected(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("x0,y0\n0.1,abc\n")
    assert main(["train", "--data", str(p),
                 "--out", str(tmp_path / "o")]) == 2
    assert "non-numeric cell 'abc'" in capsys.readouterr().err
    p.write_text("x0,y0\n0.1,nan\n")
    assert main(["train", "--data", str(p),
                 "--out", str(tmp_path / "o")]) == 2
    assert "non-finite cell" in capsys.readouterr().err


def test_header_contract_is_enforced(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    assert main(["train", "--data", str(p),
                 "--out", str(tmp_path / "o")]) == 2
    assert "must name x columns" in capsys.readouterr().err
    p.write_text("y0,x0\n1,2\n")
    assert main(["train", "--data", str(p),
                 "--out", str(tmp_path / "o")]) == 2
    assert "x columns must come first" in capsys.readouterr().err
    p.write_text("x0,y0,label\n1,2,0\n")
    assert main(["train", "--data", str(p),
                 "--out", str(tmp_path / "o")]) == 2
    assert "mixed y and label" in capsys.readouterr().err
    p.write_text("")
    assert main(["train", "--data", str(p),
                 "--out", str(tmp_path / "o")]) == 2
    assert "empty file" in capsys.readouterr().err
    p.write_text("x0,y0\n")
    assert main(["train", "--data", str(p),
                 "--out", str(tmp_path / "o")]) == 2
    assert "no data rows" in capsys.readouterr().err


def test_label_column_builds_one_hot_targets(tmp_path):
    rng = stream(2, "x")
    X = rng.uniform(-1, 1, size=(45, 2))
    labels = rng.integers(0, 3, size=45)
    csv = _write_csv(tmp_path / "cls.csv", X, labels=labels)
    ds = load_dataset_csv(csv)
    assert ds.targets.shape == (45, 3)
    assert np.array_equal(ds.targets.sum(axis=1), np.ones(45))
    out = tmp_path / "o"
    assert main(["train", "--data", csv, "--out", str(out),
                 "--epochs", "5"]) == 0
    assert "train_softmax_ce" in (out / "metrics.csv").read_text()


# ---------------------------------------------------------------------------
# training outputs


def test_train_writes_the_full_output_set(tmp_path):
    csv = _toy_csv(tmp_path)
    out = tmp_path / "run"
    rc = main(["train", "--data", csv, "--out", str(out),
               "--epochs", "20", "--topology", "pairs:0-1", "--seed", "3"])
    assert rc == 0
    for name in ("model.json", "metrics.csv", "results.csv", "manifest.json"):
        assert (out / name).exists(), name
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "metric,value"
    keys = [line.split(",")[0] for line in metrics]
    for want in ("benchmark", "params", "seed", "train_mse",
                 "final_val_mse", "best_epoch", "diverged"):
        assert want in keys
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "train"
    assert manifest["seed"] == 3
    assert manifest["config"]["epochs"] == 20
    assert manifest["config"]["topology"] == "pairs:0-1"
    assert manifest["config"]["out"] == str(out)
    assert manifest["version"]
    results = (out / "results.csv").read_text().splitlines()
    assert results[0].startswith("benchmark,model")
    assert len(results) == 2


def test_same_seed_reproduces_metrics_bit_for_bit(tmp_path):
    csv = _toy_csv(tmp_path)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = main(["train", "--data", csv, "--out", str(out),
                   "--epochs", "25", "--topology", "full", "--seed", "7"])
        assert rc == 0
        outs.append(out)
    a, b = outs
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "model.json").read_bytes() == (b / "model.json").read_bytes()
    out_c = tmp_path / "c"
    assert main(["train", "--data", csv, "--out", str(out_c),
                 "--epochs", "25", "--topology", "full", "--seed", "8"]) == 0
    assert (a / "metrics.csv").read_bytes() != \
        (out_c / "metrics.csv").read_bytes()


def test_benchmark_training_smoke(tmp_path):
    out = tmp_path / "mm"
    rc = main(["train", "--benchmark", "michaelis_menten", "--out", str(out),
               "--epochs", "10", "--seed", "0"])
    assert rc == 0
    text = (out / "metrics.csv").read_text()
    assert "benchmark,michaelis_menten" in text
    assert "test_mse" in text


# ---------------------------------------------------------------------------
# model serialization


def test_saved_models_round_trip_bit_identically(tmp_path):
    rng = stream(11, "x")
    model = build_anova_model(3, C=2, topology=[(0, 1), (1, 2)], seed=4)
    theta = model.get_flat()
    model.set_flat(theta + rng.normal(0, 0.3, theta.shape))
    path = tmp_path / "m.json"
    save_model(model, str(path))
    loaded = load_model(str(path))
    X = rng.uniform(-1, 1, size=(1000, 3))
    a = model.forward_batch(X, with_params=False).logits
    b = loaded.forward_batch(X, with_params=False).logits
    assert np.array_equal(a, b)
    assert np.array_equal(model.get_flat(), loaded.get_flat())


def test_deep_models_round_trip_bit_identically(tmp_path):
    model = build_deep_stack(2, width=6, depth=3, seed=9)
    path = tmp_path / "deep.json"
    save_model(model, str(path))
    loaded = load_model(str(path))
    X = stream(12, "x").uniform(-1, 1, size=(1000, 2))
    a = model.forward_batch(X, with_params=False).logits
    b = loaded.forward_batch(X, with_params=False).logits
    assert np.array_equal(a, b)


def test_model_loader_diagnostics(tmp_path, capsys):
    missing = str(tmp_path / "nope.json")
    assert main(["eval", "--model", missing, "--benchmark", "runge",
                 "--out", str(tmp_path / "o")]) == 2
    assert "model file not found" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["eval", "--model", str(bad), "--benchmark", "runge",
                 "--out", str(tmp_path / "o")]) == 2
    assert "not valid JSON" in capsys.readouterr().err
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"kind": "mystery"}))
    assert main(["eval", "--model", str(wrong), "--benchmark", "runge",
                 "--out", str(tmp_path / "o")]) == 2
    assert "unknown kind" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# analysis subcommands


@pytest.fixture()
def trained(tmp_path):
    csv = _toy_csv(tmp_path, n=80)
    out = tmp_path / "fit"
    rc = main(["train", "--data", csv, "--out", str(out),
               "--epochs", "40", "--topology", "pairs:0-1", "--seed", "1"])
    assert rc == 0
    return csv, str(out / "model.json")


def test_eval_writes_metrics(tmp_path, trained):
    csv, model = trained
    out = tmp_path / "ev"
    assert main(["eval", "--model", model, "--data", csv,
                 "--out", str(out)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "metric,value"
    row = dict(l.split(",", 1) for l in lines[1:])
    assert float(row["mse"]) >= 0
    assert int(row["n"]) == 80


def test_discover_emits_formula_terms_and_shares(tmp_path, trained):
    csv, model = trained
    out = tmp_path / "disc"
    assert main(["discover", "--model", model, "--data", csv,
                 "--precision", "1e-4", "--out", str(out)]) == 0
    formula = (out / "formula.txt").read_text().strip()
    assert formula
    doc = json.loads((out / "terms.json").read_text())
    assert doc["expression"] == formula
    assert isinstance(doc["complexity"], int)
    kinds = [t["kind"] for t in doc["terms"]]
    assert kinds.count("main") == 2 and kinds.count("pair") == 1
    shares = (out / "anova.csv").read_text().splitlines()
    assert shares[0] == "term,share"
    vals = [float(l.split(",")[1]) for l in shares[1:]
            if not l.startswith("degenerate")]
    assert sum(vals) == pytest.approx(1.0, rel=1e-9)


def test_discover_rejects_deep_models(tmp_path, capsys):
    deep = build_deep_stack(2, width=4, depth=2, seed=0)
    path = tmp_path / "deep.json"
    save_model(deep, str(path))
    assert main(["discover", "--model", str(path),
                 "--out", str(tmp_path / "o")]) == 2
    assert "additive models only" in capsys.readouterr().err


def test_bound_reports_certified_margins(tmp_path, trained):
    _, model = trained
    out = tmp_path / "bound"
    assert main(["bound", "--model", model, "--radius", "2.0",
                 "--out", str(out)]) == 0
    doc = json.loads((out / "lipschitz.json").read_text())
    assert doc["radius"] == 2.0
    assert doc["units"]
    for rep in doc["units"].values():
        assert rep["margin"] >= 0
        assert rep["empirical_sup"] <= rep["K_phi"]
    rows = (out / "lipschitz.csv").read_text().splitlines()
    assert rows[0] == "unit,x,abs_deriv,K_phi"
    assert len(rows) == 1 + 257 * len(doc["units"])


def test_bound_on_deep_models_includes_the_network_product(tmp_path):
    deep = build_deep_stack(2, width=4, depth=3, seed=2)
    path = tmp_path / "deep.json"
    save_model(deep, str(path))
    out = tmp_path / "bound"
    assert main(["bound", "--model", str(path), "--radius", "1.0",
                 "--out", str(out)]) == 0
    doc = json.loads((out / "lipschitz.json").read_text())
    assert doc["network_bound"] > 0
    assert len(doc["units"]) == 12


def test_bound_rejects_nonpositive_radius(tmp_path, trained, capsys):
    _, model = trained
    assert main(["bound", "--model", model, "--radius", "0",
                 "--out", str(tmp_path / "o")]) == 2
    assert "--radius must be positive" in capsys.readouterr().err


def test_influence_traces_updates_against_queries(tmp_path, trained):
    csv, model = trained
    out = tmp_path / "infl"
    assert main(["influence", "--model", model, "--data", csv,
                 "--query", "0,1", "--update", "2,3", "--eta", "1e-3",
                 "--out", str(out)]) == 0
    rows = (out / "influence.csv").read_text().splitlines()
    assert rows[0] == "t,x_u_index,x_o_index,channel,value"
    assert len(rows) == 1 + 2 * 2
    doc = json.loads((out / "influence.json").read_text())
    assert doc["steps"] == 2
    assert doc["queries"] == [0, 1] and doc["updates"] == [2, 3]
    assert doc["max_abs_discrepancy"] >= doc["mean_abs_discrepancy"] >= 0


def test_influence_validates_indices_and_eta(tmp_path, trained, capsys):
    csv, model = trained
    out = str(tmp_path / "o")
    assert main(["influence", "--model", model, "--data", csv,
                 "--query", "0", "--update", "999", "--out", out]) == 2
    assert "out of range" in capsys.readouterr().err
    assert main(["influence", "--model", model, "--data", csv,
                 "--query", "0", "--update", "1", "--eta", "0",
                 "--out", out]) == 2
    assert "--eta must be positive" in capsys.readouterr().err
    assert main(["influence", "--model", model, "--data", csv,
                 "--query", "a,b", "--update", "1", "--out", out]) == 2
    assert "comma-separated integers" in capsys.readouterr().err


def test_ablate_writes_aggregate_table(tmp_path):
    out = tmp_path / "abl"
    rc = main(["ablate", "--gamma", "1.0", "--seeds", "0",
               "--epochs", "5", "--out", str(out)])
    assert rc == 0
    doc = json.loads((out / "aggregate.json").read_text())
    labels = {"main_only", "random_half_d", "smart_quarter_d",
              "full_pairwise"}
    assert set(doc["table"]) == labels
    for row in doc["table"].values():
        assert row["seeds"] == [0]
        assert np.isfinite(row["mean_mse"])
    results = (out / "results.csv").read_text().splitlines()
    assert len(results) == 1 + 4
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "topology,seed,params,train_mse,test_mse"
    assert len(metrics) == 1 + 4
