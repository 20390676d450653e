import json

import numpy as np
import pytest

from tmo import CalibratedSigma, Schema, TMOConfig, load_dataset, run_tmo, save_dataset
from tmo.cli import central_fit_score, main

from ._data import CAL_BLOCKS, CAL_RHO, random_dataset


@pytest.fixture
def data_files(tmp_path):
    ds = random_dataset(n=40, d=12, seed=1, clusters=5, coords=True, factor=1.0)
    schema = save_dataset(ds, tmp_path / "d.csv")
    (tmp_path / "s.txt").write_text(schema.to_lines())
    return tmp_path, tmp_path / "d.csv", tmp_path / "s.txt"


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_run_matches_library(data_files, capsys):
    _, data, schema = data_files
    code, out, _ = _run(["run", "--data", data, "--schema", schema, "--augment", "none",
                         "--baselines", "hc0,hc1", "--threads", 1], capsys)
    assert code == 0
    ds = load_dataset(data, Schema.from_file(schema))
    want = run_tmo(ds, TMOConfig()).report
    assert json.loads(out) == json.loads(want.to_json())


def test_run_huge_threshold_is_hc0(data_files, capsys):
    _, data, schema = data_files
    code, out, _ = _run(["run", "--data", data, "--schema", schema, "--augment", "none",
                         "--threshold", 999, "--baselines", "hc0"], capsys)
    rep = json.loads(out)
    assert code == 0
    assert rep["v_tmo"] == rep["v_baselines"]["hc0"]


def test_run_with_cluster_reports_ratio(data_files, capsys):
    _, data, schema = data_files
    code, out, _ = _run(["run", "--data", data, "--schema", schema, "--format", "csv"], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "method,coef,se,variance,ratio"
    assert any(line.startswith("cluster,") for line in lines)
    assert "reference,'cluster'" in out
    code, out, _ = _run(["run", "--data", data, "--schema", schema, "--format", "table"], capsys)
    assert "cluster" in out


def test_emit_then_reuse_pairs(data_files, capsys):
    tmp, data, schema = data_files
    for suffix in (".csv", ".npz"):
        pairs = tmp / f"pairs{suffix}"
        _, a, _ = _run(["run", "--data", data, "--schema", schema, "--emit-pairs", pairs], capsys)
        _, b, _ = _run(["run", "--data", data, "--schema", schema, "--pairs-file", pairs], capsys)
        assert a == b


def test_exit_code_bad_input(data_files, capsys):
    tmp, data, schema = data_files
    code, _, err = _run(["run", "--data", data, "--schema", schema, "--treatment", "nope"], capsys)
    assert code == 2 and "error" in err
    code, _, _ = _run(["run", "--data", tmp / "missing.csv", "--schema", schema], capsys)
    assert code == 2


def test_exit_code_numerical(tmp_path, capsys):
    rng = np.random.default_rng(0)
    n = 20
    w = rng.standard_normal(n)
    cols = {"y": rng.standard_normal(n), "w": w, "x": 2 * w, "a1": rng.standard_normal(n),
            "a2": rng.standard_normal(n)}
    import pandas as pd
    pd.DataFrame(cols).to_csv(tmp_path / "d.csv", index=False)
    code, _, err = _run(["run", "--data", tmp_path / "d.csv", "--outcome", "y", "--treatment", "w",
                         "--aux", "a1,a2", "--covariates", "x"], capsys)
    assert code == 3 and "rank" in err.lower()


def test_panel_fixture_too_few_pairs(capsys):
    from pathlib import Path
    here = Path(__file__).parent / "data"
    # five counties give ten pairs, too few for a null fit
    code, _, err = _run(["run", "--data", here / "panel.csv", "--schema", here / "panel_schema.txt",
                         "--augment", "none", "--baselines", "hc0,hc1"], capsys)
    assert code == 3 and "pair statistics" in err


def test_diagnose_keys(data_files, capsys):
    _, data, schema = data_files
    code, out, _ = _run(["diagnose", "--data", data, "--schema", schema], capsys)
    assert code == 0
    dg = json.loads(out)
    for key in ("histogram", "null", "q_curve", "delta_star", "bonferroni_delta", "kept_fraction",
                "central_fit_score", "resampling"):
        assert key in dg
    assert len(dg["histogram"]["counts"]) == 100
    assert sum(dg["histogram"]["counts"]) == dg["n_pairs"]
    code, out, _ = _run(["diagnose", "--data", data, "--schema", schema, "--format", "table"], capsys)
    assert "delta*" in out


@pytest.mark.slow
def test_central_fit_on_null_data():
    scores = []
    # pair correlations of OLS residuals average about -1/(n-1), which the zero-mean
    # null ignores; n = 300 keeps that shift well inside the band
    for seed in range(200):
        res = run_tmo(random_dataset(n=300, d=100, seed=seed), TMOConfig(workers=1))
        st = res.pairs.stat[res.pairs.valid]
        scores.append(central_fit_score(st, res.null))
    assert max(scores) <= 0.02


def test_resampling_flag_on_skewed_fixture(tmp_path, capsys):
    # few outcomes and a strong shared factor in a third of the units
    ds = random_dataset(n=60, d=10, seed=0, factor=1.0)
    schema = save_dataset(ds, tmp_path / "d.csv")
    (tmp_path / "s.txt").write_text(schema.to_lines())
    code, out, _ = _run(["diagnose", "--data", tmp_path / "d.csv", "--schema", tmp_path / "s.txt"], capsys)
    assert code == 0
    r = json.loads(out)["resampling"]
    assert r["flag"] and r["range"] > 0.1
    assert len(r["deltas"]) == 20


def test_simulate_identity_config(tmp_path, capsys):
    cfg = {"n": 60, "reps": 100, "seed": 3, "d": 4, "methods": ["hc0", "hc1"],
           "sigma": {"source": "identity"}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, out, _ = _run(["simulate", "--config", tmp_path / "c.json", "--threads", 1], capsys)
    assert code == 0
    res = json.loads(out)
    assert res["replications"] == 100
    assert set(res["methods"]) == {"hc0", "hc1"}
    code, _, _ = _run(["simulate", "--config", tmp_path / "none.json"], capsys)
    assert code == 2


def test_calibrate_fixture_pair_table(tmp_path, capsys):
    iu = np.triu_indices(8, 1)
    rows = ["i,i',lambda,rho,rho_fisher"]
    rows += [f"{i},{i},1.0,1.0,inf" for i in range(8)]
    for i, j in zip(*iu):
        r = float(CAL_RHO[i, j])
        rows.append(f"{i},{j},{r!r},{r!r},{float(np.arctanh(r))!r}")
    (tmp_path / "p.csv").write_text("\n".join(rows) + "\n")
    out_path = tmp_path / "sigma.json"
    code, _, _ = _run(["calibrate", "--pairs-file", tmp_path / "p.csv", "--output", out_path], capsys)
    assert code == 0
    sig = CalibratedSigma.load(out_path)
    assert [b[0].tolist() for b in sig.blocks] == CAL_BLOCKS

    cfg = {"reps": 100, "seed": 1, "d": 3, "methods": ["hc1", "cluster"],
           "sigma": {"source": "blocks", "path": "sigma.json"}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, out, _ = _run(["simulate", "--config", tmp_path / "c.json", "--format", "csv"], capsys)
    assert code == 0
    assert out.splitlines()[0] == "method,mean_se_ratio,rejection_rate,n_invalid"


def test_calibrate_from_data(data_files, capsys):
    _, data, schema = data_files
    code, out, _ = _run(["calibrate", "--data", data, "--schema", schema], capsys)
    assert code == 0
    assert CalibratedSigma.from_json(out).n == 40


@pytest.mark.parametrize("command", ["run", "diagnose"])
def test_thread_count_determinism(data_files, capsys, command):
    _, data, schema = data_files
    outs = []
    for threads in (1, 2, 8):
        code, out, _ = _run([command, "--data", data, "--schema", schema, "--threads", threads], capsys)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1] == outs[2]


def test_simulate_thread_determinism(tmp_path, capsys):
    cfg = {"n": 40, "reps": 100, "seed": 2, "d": 8, "methods": ["hc1", "tmo"],
           "sigma": {"source": "synthetic", "n_blocks": 5, "block_size": 4, "rho": 0.5}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    outs = [_run(["simulate", "--config", tmp_path / "c.json", "--threads", t], capsys)[1] for t in (1, 2, 8)]
    assert outs[0] == outs[1] == outs[2]
