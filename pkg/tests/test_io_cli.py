import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interp_forge import io
from interp_forge.cli import main
from interp_forge.construction import build_hardmax, build_softmax
from interp_forge.core import Dense, RankOneSym, ScaledIdentity
from interp_forge.dynamics import DynamicsConfig


# --------------------------------------------------------------------------
# serialization


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_dataset_roundtrip(seed):
    D = io.random_dataset(np.random.default_rng(seed), 3, 3, 5)
    E = io.dataset_from_json(json.loads(io.dumps(io.dataset_to_json(D))))
    assert all(np.array_equal(a, b) for a, b in zip(D.inputs, E.inputs))
    assert all(np.array_equal(a, b) for a, b in zip(D.outputs, E.outputs))


def test_transformer_roundtrip_is_bit_exact():
    D = io.random_dataset(np.random.default_rng(0), 2, 3, 5)
    for T in (build_hardmax(D)[0], build_softmax(D, check_global_tau=False)[0]):
        text = io.dumps(io.transformer_to_json(T))
        T2 = io.transformer_from_json(json.loads(text))
        assert io.dumps(io.transformer_to_json(T2)) == text
        for X in D.inputs:
            assert np.array_equal(T(X), T2(X))


def test_tagged_matrices_roundtrip():
    for M in (ScaledIdentity(0.25), RankOneSym(np.array([1.0, -2.0]), -1), Dense(np.eye(2) * 3)):
        back = io.matrix_from_json(json.loads(json.dumps(io.matrix_to_json(M))), "$")
        assert type(back) is type(M) and io.matrix_to_json(back) == io.matrix_to_json(M)


def test_dynamics_config_roundtrip():
    cfg = DynamicsConfig.rank_one(0.3, [1.0, 2.0])
    back = io.dynamics_config_from_json(io.dynamics_config_to_json(cfg))
    assert back.gamma == 0.3 and np.array_equal(back.A.v, cfg.A.v)


@pytest.mark.parametrize(
    "obj, fragment",
    [
        ({"pairs": []}, "missing field 'd'"),
        ({"d": 2, "pairs": []}, "$.pairs"),
        ({"d": 2, "pairs": [{"input": [[0, 0]]}]}, "missing field 'output'"),
        ({"d": 3, "pairs": [{"input": [[0, 0]], "output": [[1, 1]]}]}, "$.pairs[0].input"),
        ({"d": 2, "pairs": [{"input": [[0, "x"]], "output": [[1, 1]]}]}, "not a numeric array"),
    ],
)
def test_dataset_errors_name_the_field(obj, fragment):
    with pytest.raises(io.InputError) as exc:
        io.dataset_from_json(obj)
    assert fragment in str(exc.value)


def test_matrix_errors():
    with pytest.raises(io.InputError):
        io.matrix_from_json({"diagonal": [1, 2]}, "$.A")
    with pytest.raises(io.InputError):
        io.matrix_from_json({"rank_one": {"v": [1.0], "sign": 2}}, "$.A")


def test_random_dataset_is_deterministic_and_valid():
    a = io.random_dataset(np.random.default_rng(7), 4, 5, 12, lattice=True)
    b = io.random_dataset(np.random.default_rng(7), 4, 5, 12, lattice=True)
    assert io.dumps(io.dataset_to_json(a)) == io.dumps(io.dataset_to_json(b))
    fixed = io.random_dataset(np.random.default_rng(8), 3, 4, 6, m_policy=2)
    assert all(m == min(2, len(X)) for m, X in zip(fixed.m, fixed.inputs))
    with pytest.raises(ValueError):
        io.random_dataset(np.random.default_rng(0), 1, 2, 3)


# --------------------------------------------------------------------------
# command line


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def dataset_file(tmp_path):
    path = tmp_path / "data.json"
    assert run("gen-dataset", "--seed", 11, "--d", 3, "--N", 3, "--n-max", 5, "--out", path) == 0
    return path


def test_gen_dataset_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run("gen-dataset", "--seed", 4, "--out", a)
    run("gen-dataset", "--seed", 4, "--out", b)
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.json"
    run("gen-dataset", "--seed", 5, "--out", c)
    assert a.read_bytes() != c.read_bytes()


def test_validate_own_output(dataset_file, capsys):
    assert run("validate", "--in", dataset_file) == 0
    assert "ok" in capsys.readouterr().out


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("gen-dataset", "--d", 1)
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("train-demo", "--epsilon", 0, "--out", tmp_path / "x.csv")
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("construct", "--mode", "exact", "--in", "a", "--out", "b")
    assert exc.value.code == 2


def test_invalid_dataset_exits_2(tmp_path, capsys):
    path = tmp_path / "dup.json"
    X = [[0.0, 0.0], [1.0, 1.0]]
    path.write_text(json.dumps({"d": 2, "pairs": [{"input": X, "output": X[:1]},
                                                  {"input": X[::-1], "output": X[:1]}]}))
    assert run("construct", "--in", path, "--out", tmp_path / "m.json") == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "InputError" and "assumption-1-i" in err["message"]


def test_missing_and_malformed_files_exit_2(tmp_path):
    assert run("validate", "--in", tmp_path / "nope.json") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("validate", "--in", bad) == 2


@pytest.mark.parametrize("mode", ["hardmax", "softmax"])
def test_construct_and_verify(dataset_file, tmp_path, mode, capsys):
    model, report = tmp_path / "model.json", tmp_path / "report.json"
    assert run("construct", "--mode", mode, "--in", dataset_file, "--out", model, "--report", report) == 0
    rep = json.loads(report.read_text())
    D = io.dataset_from_json(json.loads(dataset_file.read_text()))
    extra = 2 * len(D.m) + 1 if mode == "hardmax" else 3 * len(D.m)
    assert rep["L"] <= 2 * sum(D.m) + extra == rep["bound_L"]
    if mode == "softmax":
        assert rep["plan"]["tau_min"] > 0
    assert run("verify", "--model", model, "--in", dataset_file) == 0
    out = capsys.readouterr().out
    assert out.count("pass") == len(D.m)


def test_verify_detects_perturbation(dataset_file, tmp_path):
    model = tmp_path / "model.json"
    run("construct", "--in", dataset_file, "--out", model)
    obj = json.loads(model.read_text())
    # nudge the bias of the last interpolation hat
    obj["blocks"][-1]["ff"]["b"][0] += 0.1
    obj["blocks"][-1]["ff"]["b"][1] += 0.1
    obj["blocks"][-1]["ff"]["b"][2] += 0.1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(obj))
    assert run("verify", "--model", bad, "--in", dataset_file) == 1
    assert run("verify", "--model", bad, "--in", dataset_file, "--tol", "inf") == 0


def test_verify_dimension_mismatch(dataset_file, tmp_path):
    model = tmp_path / "model.json"
    run("construct", "--in", dataset_file, "--out", model)
    other = tmp_path / "d2.json"
    run("gen-dataset", "--d", 2, "--out", other)
    assert run("verify", "--model", model, "--in", other) == 2


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_simulate_sphere_is_no_clustering(tmp_path, capsys):
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(5, 3))
    Z = 2.0 * Z / np.linalg.norm(Z, axis=1, keepdims=True)
    cfg = write_json(tmp_path / "cfg.json", {"gamma": 0.5, "A": {"scaled_identity": 1.0}})
    x0 = write_json(tmp_path / "x0.json", {"tokens": Z.tolist()})
    out = tmp_path / "traj.csv"
    assert run("simulate", "--config", cfg, "--x0", x0, "--out", out) == 0
    text = capsys.readouterr().out
    assert "classification: no clustering" in text
    assert "max deviation from prediction: 0" in text
    assert out.read_text().splitlines()[0] == "step,token_index,coord_0,coord_1,coord_2"


def test_simulate_full_clustering_one_step(tmp_path, capsys):
    X = [[2.0, 2.0], [0.5, 1.0], [1.5, 0.3]]
    cfg = write_json(tmp_path / "cfg.json", {"gamma": 1.0, "A": {"scaled_identity": 1.0}})
    x0 = write_json(tmp_path / "x0.json", X)
    assert run("simulate", "--config", cfg, "--x0", x0, "--out", tmp_path / "t.csv") == 0
    text = capsys.readouterr().out
    assert "classification: full clustering" in text and "steps: 1 " in text


def test_simulate_generic_is_unclassified(tmp_path, capsys):
    X = np.random.default_rng(1).normal(size=(5, 2)).tolist()
    cfg = write_json(tmp_path / "cfg.json", {"gamma": 0.5, "A": {"scaled_identity": 1.0}})
    x0 = write_json(tmp_path / "x0.json", {"tokens": X})
    assert run("simulate", "--config", cfg, "--x0", x0, "--steps", 5, "--out", tmp_path / "t.csv") == 0
    assert "classification: unclassified" in capsys.readouterr().out


def test_simulate_bad_config_exits_2(tmp_path):
    cfg = write_json(tmp_path / "cfg.json", {"gamma": 2.0, "A": {"scaled_identity": 1.0}})
    x0 = write_json(tmp_path / "x0.json", [[1.0, 0.0]])
    assert run("simulate", "--config", cfg, "--x0", x0, "--out", tmp_path / "t.csv") == 2


def test_train_demo_short_run(tmp_path, capsys):
    out = tmp_path / "run.csv"
    assert run("train-demo", "--steps", 30, "--out", out) == 0
    assert "threshold=" in capsys.readouterr().out
    lines = out.read_text().splitlines()
    assert lines[0] == "step,F_eps,data_fit,kappa" and len(lines) == 32


def test_train_demo_sweep_rows(tmp_path):
    out = tmp_path / "sweep.csv"
    assert run("train-demo", "--steps", 20, "--epsilon-sweep", "1e-1,1e-2,1e-3", "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "epsilon,min_F_eps,threshold,crossed_at" and len(lines) == 4


def test_plot_data_export(dataset_file, tmp_path):
    model, report, csv_path = tmp_path / "m.json", tmp_path / "r.json", tmp_path / "p.csv"
    run("construct", "--in", dataset_file, "--out", model, "--report", report)
    assert run("plot-data", "--report", report, "--out", csv_path) == 0
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "stage,sequence,token_index,coord_0,coord_1,coord_2"
    D = io.dataset_from_json(json.loads(dataset_file.read_text()))
    assert len(rows) == 1 + 5 * sum(len(X) for X in D.inputs)
    assert run("plot-data", "--report", dataset_file, "--out", csv_path) == 2


def test_module_entry_point(dataset_file):
    proc = subprocess.run([sys.executable, "-m", "interp_forge.cli", "validate", "--in", str(dataset_file)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "ok"
