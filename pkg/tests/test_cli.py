import json

import numpy as np
import pytest

from metaeb import fit_mle
from metaeb.cli import main
from metaeb.data import spec_to_dict, write_dataset
from metaeb.simulation import generate, get_scenario


@pytest.fixture()
def workspace(tmp_path):
    data, specs, valid, _ = generate(get_scenario("I"), 0, 0)
    write_dataset(tmp_path / "internal.csv", data)
    write_dataset(tmp_path / "valid.csv", valid)
    ext = []
    for s in specs:
        path = tmp_path / f"{s.name}.json"
        path.write_text(json.dumps(spec_to_dict(s)))
        ext += ["--external", str(path)]
    base = ["fit", "--data", str(tmp_path / "internal.csv"), "--outcome", "y", "--b-cols", "B"]
    return tmp_path, data, base, ext


def test_fit_all_methods(workspace, capsys):
    tmp, data, base, ext = workspace
    out = tmp / "report.json"
    code = main(base + ext + ["--validation", str(tmp / "valid.csv"), "--seed", "1",
                              "--mc-draws", "500", "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    labels = [e["label"] for e in report["estimators"]]
    assert labels[0] == "mle" and {"ivw", "ocwe", "sclearner"} <= set(labels)
    ocwe = next(e for e in report["estimators"] if e["label"] == "ocwe")
    assert sum(ocwe["weights"]) == pytest.approx(1.0)
    assert all("metrics" in e for e in report["estimators"])
    assert "ocwe" in capsys.readouterr().out


def test_mle_only_matches_direct_fit(workspace):
    tmp, data, base, _ = workspace
    out = tmp / "mle.json"
    assert main(base + ["--methods", "mle", "--out", str(out)]) == 0
    est = json.loads(out.read_text())["estimators"][0]["estimate"]
    np.testing.assert_allclose(est, fit_mle(data).gamma_hat, atol=1e-12)


def test_fit_repeat_is_byte_identical(workspace):
    tmp, _, base, ext = workspace
    outs = []
    for run in "ab":
        path = tmp / f"{run}.json"
        assert main(base + ext + ["--seed", "4", "--mc-draws", "300", "--out", str(path)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


@pytest.mark.parametrize("extra", [
    ["--methods", "eb"],                       # no seed
    ["--methods", "bogus", "--seed", "1"],
    ["--seed", "1", "--mc-draws", "10"],
])
def test_config_errors(workspace, extra, capsys):
    tmp, _, base, ext = workspace
    assert main(base + ext + extra + ["--out", str(tmp / "x.json")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_missing_external_is_config_error(workspace):
    tmp, _, base, _ = workspace
    assert main(base + ["--methods", "cml", "--out", str(tmp / "x.json")]) == 2


def test_unknown_covariate_is_config_error(workspace):
    tmp, _, base, _ = workspace
    bad = tmp / "bad.json"
    bad.write_text(json.dumps({"name": "bad", "link": "logit", "covariates": ["Q"],
                               "coefficients": [0.0, 1.0]}))
    assert main(base + ["--methods", "cml", "--external", str(bad),
                        "--out", str(tmp / "x.json")]) == 2


def test_incompatible_external_is_numeric_error(workspace, capsys):
    tmp, _, base, _ = workspace
    bad = tmp / "far.json"
    bad.write_text(json.dumps({"name": "far", "link": "logit", "covariates": ["X1"],
                               "coefficients": [40.0, 0.0]}))
    assert main(base + ["--methods", "cml", "--external", str(bad),
                        "--out", str(tmp / "x.json")]) == 3
    assert "far" in capsys.readouterr().err


def test_simulate(tmp_path):
    with pytest.warns(UserWarning):
        code = main(["simulate", "--scenario", "I", "--reps", "3", "--seed", "2",
                     "--mc-draws", "200", "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "summary_I.csv").exists() and (tmp_path / "results_I.json").exists()


def test_simulate_unknown_scenario(tmp_path):
    assert main(["simulate", "--scenario", "IX", "--seed", "1", "--out", str(tmp_path)]) == 2
