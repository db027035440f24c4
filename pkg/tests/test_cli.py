import json

import numpy as np
import pytest

from bpfa.cli import main
from bpfa.data import load_dataset
from bpfa.nn import load_model
from bpfa.train import Threshold


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset, two models and thresholds produced through the CLI itself."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(d / "data.npz"), "--num-identities", "8",
                 "--images-per-identity", "6", "--image-shape", "1,8,8"]) == 0
    for arch in "AC":
        assert main(["train", "--data", str(d / "data.npz"), "--out", str(d / f"{arch}.npz"),
                     "--arch", arch, "--epochs", "2", "--holdout-per-identity", "2",
                     "--accuracy-floor", "0", "--embedding-dim", "8", "--log", str(d / f"{arch}.csv")]) == 0
        assert main(["calibrate", "--model", str(d / f"{arch}.npz"), "--data", str(d / "data.npz"),
                     "--out", str(d / f"{arch}_imp.json")]) == 0
    return d


def test_generated_artifacts(workspace):
    ds = load_dataset(workspace / "data.npz")
    assert ds.images.shape == (48, 1, 8, 8)
    assert load_model(workspace / "A.npz").name == "A"
    th = Threshold.load(workspace / "C_imp.json")
    assert th.far_target == 0.001 and th.n_negatives == 48 * 42 // 2
    assert (workspace / "A.csv").read_text().startswith("step,")


def test_calibrate_mode_picks_default_far(workspace, capsys):
    code, out, _ = _run(capsys, "calibrate", "--model", workspace / "A.npz", "--data", workspace / "data.npz",
                        "--mode", "dodging", "--out", workspace / "A_dod.json")
    assert code == 0 and json.loads(out)["far_target"] == 0.01


def test_attack_command(workspace, capsys):
    out_path = workspace / "adv.npz"
    code, out, _ = _run(capsys, "attack", "--model", workspace / "C.npz", "--data", workspace / "data.npz",
                        "--attack", "FIM+BPFA", "--eta", "0.1", "--n-max", "4", "--n-pairs", "3",
                        "--out", out_path, "--log", workspace / "adv.csv")
    assert code == 0 and json.loads(out)["pairs"] == 3
    adv = load_dataset(out_path)
    assert adv.metadata["attack"] == "FIM+BPFA" and adv.metadata["config"]["eta"] == 0.1
    src = load_dataset(workspace / "data.npz").images[[p[0] for p in adv.metadata["pairs"]]]
    assert np.abs(adv.images - src).max() <= 10.0
    lines = (workspace / "adv.csv").read_text().splitlines()
    assert lines[0] == "t,loss,bank_bytes" and len(lines) == 1 + 4


def test_config_file_overrides_flags(workspace, capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_max": 2, "n-pairs": 2}))
    code, _, _ = _run(capsys, "attack", "--model", workspace / "C.npz", "--data", workspace / "data.npz",
                      "--n-max", "50", "--n-pairs", "5", "--config", cfg,
                      "--out", tmp_path / "a.npz", "--log", tmp_path / "a.csv")
    assert code == 0
    meta = load_dataset(tmp_path / "a.npz").metadata
    assert meta["config"]["n_max"] == 2 and len(meta["pairs"]) == 2
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 1 + 2


def _plan(workspace, tmp_path, **extra):
    plan = {
        "version": 1, "seed": 1, "mode": "impersonation", "dataset": str(workspace / "data.npz"),
        "surrogates": {"A": str(workspace / "A.npz"), "C": str(workspace / "C.npz")},
        "thresholds": {"A": str(workspace / "A_imp.json"), "C": str(workspace / "C_imp.json")},
        "pairs": {"n": 3},
        "attacks": {"FIM": {"n_max": 3}, "FIM+BPFA": {"n_max": 3, "eta": 0.1}},
    }
    plan.update(extra)
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(plan))
    return path


def test_matrix_report_and_sweeps(workspace, capsys, tmp_path):
    plan = _plan(workspace, tmp_path)
    code, out, _ = _run(capsys, "matrix", "--plan", plan, "--out", tmp_path / "r.csv", "--adv-dir", tmp_path / "adv")
    assert code == 0 and json.loads(out)["rows"] == 2 * 2 * 2
    assert len(list((tmp_path / "adv").glob("adv_*.npz"))) == 4
    code, out, _ = _run(capsys, "report", "--in", tmp_path / "r.csv", "--format", "markdown")
    assert code == 0 and "FIM+BPFA" in out
    code, _, _ = _run(capsys, "report", "--input", tmp_path / "r.csv", "--format", "json", "--out", tmp_path / "r.json")
    assert code == 0 and len(json.loads((tmp_path / "r.json").read_text())["rows"]) == 8
    code, _, _ = _run(capsys, "sweep-eta", "--plan", plan, "--etas", "0,0.1", "--out", tmp_path / "e.csv")
    assert code == 0 and len((tmp_path / "e.csv").read_text().splitlines()) == 3
    code, _, _ = _run(capsys, "sweep-iters", "--plan", plan, "--baseline", "FIM", "--augmented", "FIM+BPFA",
                      "--grid", "0,2", "--out", tmp_path / "i.csv")
    assert code == 0 and len((tmp_path / "i.csv").read_text().splitlines()) == 3


def test_matrix_is_reproducible_through_cli(workspace, capsys, tmp_path):
    plan = _plan(workspace, tmp_path)
    for name in ("x.csv", "y.csv"):
        assert _run(capsys, "matrix", "--plan", plan, "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "x.csv").read_bytes() == (tmp_path / "y.csv").read_bytes()


def test_auto_eta_writes_tuning_trail(workspace, capsys, tmp_path):
    plan = _plan(workspace, tmp_path, attacks={"FIM+BPFA": {"n_max": 2, "eta": "auto"}},
                 eta_grid=[0.05, 0.1], tune_pairs=2)
    assert _run(capsys, "matrix", "--plan", plan, "--out", tmp_path / "r.csv")[0] == 0
    trail = json.loads((tmp_path / "r_eta.json").read_text())
    assert set(trail["FIM+BPFA"]) == {"A", "C"}


def _error(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.mark.parametrize("argv, code, name", [
    (["calibrate", "--data", "data.npz"], 2, "ValueError"),
    (["calibrate", "--model", "missing.npz", "--data", "data.npz"], 8, "FileNotFoundError"),
    (["attack", "--model", "C.npz", "--data", "data.npz", "--attack", "NOPE"], 2, "KeyError"),
    (["attack", "--model", "C.npz", "--data", "data.npz", "--hooks", "99"], 6, "HookError"),
    (["train", "--data", "data.npz", "--out", "m.npz", "--epochs", "1", "--accuracy-floor", "1.5"], 5, "TrainingError"),
])
def test_exit_codes_and_json_errors(workspace, capsys, monkeypatch, argv, code, name):
    monkeypatch.chdir(workspace)
    got, _, err = _run(capsys, *argv)
    assert got == code
    assert _error(err)["error"] == name


def test_plan_error_exit_code(workspace, capsys, tmp_path):
    plan = _plan(workspace, tmp_path, thresholds={"A": str(workspace / "A_imp.json")})
    code, _, err = _run(capsys, "matrix", "--plan", plan, "--out", tmp_path / "r.csv")
    assert code == 3 and _error(err)["error"] == "PlanError"


def test_corrupt_model_exit_code(workspace, capsys, tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a zip")
    code, _, err = _run(capsys, "calibrate", "--model", bad, "--data", workspace / "data.npz")
    assert code == 4 and _error(err)["error"] == "ModelFormatError"
