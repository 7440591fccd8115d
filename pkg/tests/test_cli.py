import json

import jsonschema
import numpy as np
import pytest

from epprobit.cli import RunConfig, main
from epprobit.io import (
    DataFormatError,
    estimates_schema,
    iter_trace,
    read_estimates,
    read_long_csv,
    write_estimates,
    write_long_csv,
)
from epprobit.model import ChoiceObservation, ModelKind, ProbitModel
from epprobit.predict import choice_probabilities

OUT = ModelKind.outside()


def simulate(tmp_path, name="data.csv", **kw):
    path = tmp_path / name
    args = ["simulate", "--out", str(path)]
    for k, v in kw.items():
        args += [f"--{k}", str(v)]
    assert main(args) == 0
    return path


def test_simulate_shapes_and_determinism(tmp_path):
    a = simulate(tmp_path, "a.csv", n=1, m=3, p=2, seed=5)
    assert len(a.read_text().splitlines()) == 1 + 3
    b = simulate(tmp_path, "b.csv", n=40, m=3, p=2, seed=5)
    c = simulate(tmp_path, "c.csv", n=40, m=3, p=2, seed=5)
    assert b.read_bytes() == c.read_bytes()
    assert (tmp_path / "b.truth.json").read_bytes() == (tmp_path / "c.truth.json").read_bytes()
    truth = json.loads((tmp_path / "b.truth.json").read_text())
    assert truth["beta"] == [1.0, 1.0] and truth["sigma"]["dim"] == 3


def test_simulate_paper_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n": 2000, "m": 3, "p": 10, "seed": 1,
                                "sigma": {"type": "compound_symmetric", "diag": 1.0, "off": 0.5}}))
    out = tmp_path / "d.csv"
    assert main(["simulate", str(spec), "--out", str(out)]) == 0
    obs, ids = read_long_csv(out, OUT)
    assert len(obs) == 2000 and len(set(ids)) == 2000
    assert all(o.x.shape == (3, 10) for o in obs)
    assert len(out.read_text().splitlines()) == 1 + 6000


def test_simulate_invalid_spec(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n": 5, "m": 3, "p": 1, "sigma": {"type": "banded", "bandwidth": 1, "decay": 0.9}}))
    assert main(["simulate", str(spec), "--out", str(tmp_path / "x.csv")]) == 1
    assert "not positive definite" in capsys.readouterr().err
    spec.write_text(json.dumps({"n": 5, "m": 3, "p": 1, "colour": "red"}))
    assert main(["simulate", str(spec), "--out", str(tmp_path / "x.csv")]) == 1


def test_fit_end_to_end(tmp_path):
    data = simulate(tmp_path, n=300, m=3, p=2, seed=2)
    out = tmp_path / "est.json"
    assert main(["fit", str(data), "--out", str(out), "--tol-sigma", "1e-3"]) == 0
    doc = json.loads(out.read_text())
    jsonschema.validate(doc, estimates_schema())
    assert doc["convergence"]["converged"] is True
    model = read_estimates(out)
    assert np.trace(np.linalg.inv(model.sigma)) == pytest.approx(3.0, abs=1e-6 * 3)
    np.testing.assert_allclose(np.asarray(doc["omega"]["data"]).reshape(3, 3), np.linalg.inv(model.sigma),
                               rtol=1e-10, atol=1e-12)
    records = list(iter_trace(tmp_path / "est.trace.ndjson"))
    assert len(records) == doc["convergence"]["iterations"]
    assert [r["iteration"] for r in records] == list(range(1, len(records) + 1))
    assert {"max_abs_sigma_change", "q_lower_bound", "e_step_ms", "m_step_ms"} <= set(records[0])


def test_fit_max_iters_exit_two(tmp_path):
    data = simulate(tmp_path, n=50, m=3, p=2)
    out = tmp_path / "est.json"
    trace = tmp_path / "t.ndjson"
    assert main(["fit", str(data), "--out", str(out), "--max-iters", "1", "--trace", str(trace)]) == 2
    assert out.exists()
    assert len(trace.read_text().splitlines()) == 1
    assert json.loads(out.read_text())["convergence"]["converged"] is False


def test_fit_config_file_and_flags(tmp_path):
    data = simulate(tmp_path, n=50, m=3, p=2)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_iters": 1, "ep": {"tol": 1e-7}}))
    out = tmp_path / "e.json"
    assert main(["fit", str(data), "--config", str(cfg), "--out", str(out)]) == 2
    assert main(["fit", str(data), "--config", str(cfg), "--max-iters", "2", "--out", str(out)]) == 2
    assert json.loads(out.read_text())["convergence"]["iterations"] == 2
    cfg.write_text(json.dumps({"max_itrs": 1}))
    assert main(["fit", str(data), "--config", str(cfg), "--out", str(out)]) == 1


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("EPPROBIT_THREADS", "3")
    assert RunConfig.defaults().thread_count == 3
    assert RunConfig.defaults().update({"thread_count": 2}).em_config().thread_count == 2
    monkeypatch.setenv("EPPROBIT_THREADS", "many")
    with pytest.raises(ValueError):
        RunConfig.defaults()


def test_empty_and_malformed_files(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["fit", str(empty), "--out", str(tmp_path / "e.json")]) == 1
    assert "no observations" in capsys.readouterr().err
    header_only = tmp_path / "h.csv"
    header_only.write_text("obs_id,alt_id,chosen,cov_1\n")
    assert main(["fit", str(header_only), "--out", str(tmp_path / "e.json")]) == 1
    assert "no observations" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("obs_id,alt_id,chosen,cov_1\na,1,0,0.5\na,2,1,oops\n")
    with pytest.raises(DataFormatError, match=r"line 3, column 'cov_1'"):
        read_long_csv(bad, OUT)
    gap = tmp_path / "gap.csv"
    gap.write_text("obs_id,alt_id,chosen,cov_1\na,1,0,0.5\na,3,1,0.1\n")
    with pytest.raises(DataFormatError, match="alt_id"):
        read_long_csv(gap, OUT)
    two = tmp_path / "two.csv"
    two.write_text("obs_id,alt_id,chosen,cov_1\na,1,1,0.5\na,2,1,0.1\n")
    with pytest.raises(DataFormatError, match="2 chosen rows"):
        read_long_csv(two, OUT)
    with pytest.raises(DataFormatError, match="exactly one"):
        read_long_csv(two, ModelKind.reference(0))


def test_csv_round_trip_and_variable_sets(tmp_path, rng):
    obs = [ChoiceObservation(rng.normal(size=(3, 2)) * 1e-7 + 1 / 3, 1),
           ChoiceObservation(rng.normal(size=(3, 2)), None)]
    path = tmp_path / "rt.csv"
    write_long_csv(path, obs)
    back, ids = read_long_csv(path, OUT)
    assert ids == ["1", "2"]
    for a, b in zip(obs, back):
        np.testing.assert_array_equal(a.x, b.x)
        assert a.outcome == b.outcome
    path.write_text("obs_id,alt_id,chosen,cov_1\nq,1,0,0.1\nq,2,1,0.2\nr,1,1,0.3\n")
    back, _ = read_long_csv(path, OUT)
    assert list(back[0].positions) == [0, 1]
    assert list(back[1].positions) == [0]


def test_estimates_round_trip(tmp_path, rng):
    a = rng.normal(size=(3, 3))
    model = ProbitModel(rng.normal(size=4) / 3, a @ a.T + np.eye(3), ModelKind.reference(2))
    path = tmp_path / "m.json"
    doc = write_estimates(path, model)
    jsonschema.validate(doc, estimates_schema())
    back = read_estimates(path)
    np.testing.assert_array_equal(back.beta, model.beta)
    np.testing.assert_array_equal(back.sigma, model.sigma)
    assert back.kind == model.kind
    bad = dict(doc, schema_version=2)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, estimates_schema())


def test_predict(tmp_path, capsys):
    sigma = 0.5 * np.eye(3) + 0.5
    model = ProbitModel(np.array([0.0, 0.0]), sigma, OUT)
    est = tmp_path / "m.json"
    write_estimates(est, model)
    data = simulate(tmp_path, n=3, m=3, p=2)
    out = tmp_path / "pred.csv"
    assert main(["predict", str(est), str(data), "--out", str(out)]) == 0
    rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
    assert len(rows) == 3 * 4
    probs = np.array([float(r[3]) for r in rows]).reshape(3, 4)
    assert np.ptp(probs[:, 1:], axis=1).max() < 1e-6

    assert main(["predict", str(est), str(data), "--out", str(out), "--swap-item", "1"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].endswith("swapped_probability,uplift")
    assert all(float(line.split(",")[-1]) == 0.0 for line in lines[1:])

    wide = tmp_path / "wide.csv"
    write_long_csv(wide, [ChoiceObservation(np.zeros((3, 5)), 0)])
    assert main(["predict", str(est), str(wide), "--out", str(out)]) == 1
    assert "covariates" in capsys.readouterr().err


def test_predict_matches_library(tmp_path, rng):
    model = ProbitModel(np.array([0.8, -0.3]), np.array([[1.0, 0.4], [0.4, 2.0]]), OUT)
    est = tmp_path / "m.json"
    write_estimates(est, model)
    xs = [rng.uniform(-1, 1, size=(2, 2)) for _ in range(3)]
    data = tmp_path / "d.csv"
    write_long_csv(data, [ChoiceObservation(x, 0) for x in xs])
    out = tmp_path / "p.csv"
    assert main(["predict", str(est), str(data), "--out", str(out)]) == 0
    probs = np.array([float(line.split(",")[3]) for line in out.read_text().splitlines()[1:]]).reshape(3, 3)
    for x, row in zip(xs, probs):
        np.testing.assert_allclose(row, choice_probabilities(model, x).normalized, rtol=0, atol=1e-15)


def test_ep_check(tmp_path):
    region = tmp_path / "r.json"
    region.write_text(json.dumps({"mean": [0, 0], "cov": [[1, 0.5], [0.5, 1]], "lower": [0, 0],
                                  "upper": [None, "inf"]}))
    out = tmp_path / "rep.json"
    assert main(["ep-check", str(region), "--draws", "200000", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["agree"] and rep["oracle"]["method"] == "rejection"
    assert main(["ep-check", str(region), "--draws", "200000", "--mean-tol", "1e-9", "--out", str(out)]) == 2
    missing = tmp_path / "none.json"
    assert main(["ep-check", str(missing)]) == 1
