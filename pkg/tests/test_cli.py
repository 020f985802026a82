import json

import numpy as np
import pytest

from povl.cli import MANIFEST, PREDICTORS, digest, main, read_csv

COMMANDS = ("ingest", "generate", "train", "predict", "plan", "simulate", "report")

TINY = """
[povl]
seed = 7

[generator]
density = sparse

[data]
n_recordings = 2
stride = 8
eval_stride = 20

[model]
d_model = 16
n_heads = 2
d_ff = 32

[training]
lr = 1e-3
max_batches = 5
"""


def _manifests(directory):
    return sorted(p for p in directory.rglob(MANIFEST))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    assert main(["generate", "--config", str(root / "tiny.ini"), "--out", str(root / "gen")]) == 0
    return root


@pytest.fixture(scope="module")
def sims(work):
    for name, w in (("sim1", "1"), ("sim2", "2")):
        assert main(["simulate", "--config", str(work / "tiny.ini"), "--scenarios", str(work / "gen"),
                     "--predictor", "cv", "--workers", w, "--out", str(work / name)]) == 0
    assert main(["simulate", "--config", str(work / "tiny.ini"), "--scenarios", str(work / "gen"),
                 "--predictor", "gt", "--out", str(work / "sim_gt")]) == 0
    return work


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    assert "--out" in capsys.readouterr().out


def test_usage_errors_exit_nonzero(tmp_path, capsys):
    assert main([]) != 0
    assert main(["fly"]) != 0
    assert main(["simulate", "--out", str(tmp_path / "o")]) != 0        # missing --scenarios
    assert main(["simulate", "--scenarios", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1
    assert "not found" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[planner]\nhorizn = 3\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "g")]) == 1
    assert "unknown keys" in capsys.readouterr().err


def test_generate_layout(work):
    recs = sorted(p.name for p in (work / "gen").iterdir() if p.is_dir())
    assert recs == ["rec00007", "rec00008"]
    for r in recs:
        names = {p.name for p in (work / "gen" / r).iterdir()}
        assert {"map.json", "tracks.csv", f"{r}.scenario.json"} <= names
    man = json.loads((work / "gen" / MANIFEST).read_text())
    assert man["command"] == "generate" and man["seed"] == 7
    assert len(man["config_hash"]) == 16 and man["tool_version"]
    assert len(_manifests(work / "gen")) == 1


def test_nonempty_output_is_refused(work, capsys):
    before = digest(work / "gen")
    assert main(["generate", "--config", str(work / "tiny.ini"), "--out", str(work / "gen")]) == 1
    assert "not empty" in capsys.readouterr().err
    assert digest(work / "gen") == before


def test_generate_is_reproducible(work, tmp_path):
    assert main(["generate", "--config", str(work / "tiny.ini"), "--n", "1", "--out", str(tmp_path / "g")]) == 0
    a = (work / "gen" / "rec00007" / "tracks.csv").read_bytes()
    assert (tmp_path / "g" / "rec00007" / "tracks.csv").read_bytes() == a


def test_simulate_outputs_are_independent_of_workers(sims):
    for name in ("steps.csv", "inv_ttc.csv", "summary.csv", "planning.csv"):
        assert (sims / "sim1" / name).read_bytes() == (sims / "sim2" / name).read_bytes()
    steps = read_csv(sims / "sim1" / "steps.csv")
    assert {r["scenario"] for r in steps} == {"rec00007", "rec00008"}
    assert {r["predictor"] for r in steps} == {"cv"}
    for name in ("sim1", "sim2", "sim_gt"):
        assert len(_manifests(sims / name)) == 1


def test_simulate_leaves_inputs_untouched(sims):
    man = json.loads((sims / "sim1" / MANIFEST).read_text())
    assert man["inputs"][str(sims / "gen")] == digest(sims / "gen")


def test_report_tables_and_plots(sims):
    out = sims / "rep"
    scn = sims / "gen" / "rec00007" / "rec00007.scenario.json"
    assert main(["report", str(sims / "sim1"), str(sims / "sim_gt"), "--field-slice", str(scn),
                 "--nx", "21", "--ny", "9", "--out", str(out)]) == 0
    rows = read_csv(out / "planning_comparison.csv")
    assert rows and "<3" in rows[0] and "<50" in rows[0]
    assert len(read_csv(out / "field_slice.csv")) == 21 * 9
    for png in ("planning_comparison.png", "field_slice.png"):
        assert (out / png).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert len(_manifests(out)) == 1


def test_report_rejects_duplicate_predictor(sims, tmp_path):
    assert main(["report", str(sims / "sim1"), str(sims / "sim2"), "--out", str(tmp_path / "r")]) == 1


def test_train_predict_plan_with_model(work):
    cfg = str(work / "tiny.ini")
    assert main(["train", "--config", cfg, "--data", str(work / "gen"), "--out", str(work / "tr")]) == 0
    model = work / "tr" / "model.npz"
    assert model.is_file()
    losses = [float(r["nll"]) for r in read_csv(work / "tr" / "loss_curve.csv")]
    assert len(losses) == 5 and np.all(np.isfinite(losses))
    assert (work / "tr" / "rmse_horizon.csv").is_file()

    rec = work / "gen" / "rec00008"
    assert main(["predict", "--config", cfg, "--tracks", str(rec / "tracks.csv"), "--map", str(rec / "map.json"),
                 "--model", str(model), "--stride", "25", "--out", str(work / "pred")]) == 0
    preds = read_csv(work / "pred" / "predictions.csv")
    assert preds and {r["step"] for r in preds} == {str(k) for k in range(1, 26)}
    assert all(float(r["var_x"]) > 0 for r in preds)

    assert main(["plan", "--config", cfg, "--scenario", str(rec / "rec00008.scenario.json"),
                 "--predictor", "povl", "--model", str(model), "--out", str(work / "plan")]) == 0
    assert len(read_csv(work / "plan" / "plan.csv")) > 1
    assert (work / "plan" / "plan.png").is_file()


def test_povl_needs_a_model(work, tmp_path, capsys):
    scn = work / "gen" / "rec00007" / "rec00007.scenario.json"
    assert main(["plan", "--scenario", str(scn), "--predictor", "povl", "--out", str(tmp_path / "p")]) == 1
    assert "--model" in capsys.readouterr().err
    assert set(PREDICTORS) == {"cv", "gt", "povl"}
