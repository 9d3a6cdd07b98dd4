import json

import numpy as np
import pytest

from cli_runs import run_all
from lift3d.cli import main


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return root, run_all(root)


def test_every_subcommand_is_reproducible(runs):
    _, res = runs
    assert set(res) == {"gen-scene", "train", "render", "lift", "eval", "ablate", "viz-pca"}
    for name, (a, b) in res.items():
        assert a == b, name


def test_outputs_are_written(runs):
    root, _ = runs
    a = root / "a"
    assert (a / "scene" / "manifest.json").exists() and (a / "scene" / "run_config.json").exists()
    assert (a / "models" / "model_full" / "checkpoint" / "params.json").exists()
    assert (a / "models" / "model_full" / "metrics.csv").read_text().startswith("step,rgb_loss,feat_loss,lr")
    assert {p.name for p in (a / "render").iterdir()} >= {"rgb.png", "feature.lt3d", "labels.png", "labels.lt3d"}
    lift = json.loads((a / "lift" / "consistency.json").read_text())
    assert lift["targets"] == [0, 1] and "short" in lift["warped_rmse_3d"]
    assert (a / "lift" / "view_000_decoded.png").exists() and (a / "lift" / "view_001_decoded.png").exists()
    rep = json.loads((a / "eval" / "rep.json").read_text())
    assert rep["rows"][0]["mode"] == "full" and "iou_2d" in rep["rows"][0]
    abl = json.loads((a / "abl" / "ablation.json").read_text())
    assert [r["mode"] for r in abl] == ["full"]
    assert (a / "pca" / "pca.png").exists()
    cfg = json.loads((a / "render" / "run_config.json").read_text())
    assert cfg["seed"] == 0 and cfg["render_config"]["n_coarse"] == 4


def test_inputs_are_not_mutated(runs, tmp_path):
    from cli_runs import digest
    root, _ = runs
    scene = root / "a" / "scene"
    before = digest(scene)
    assert main(["viz-pca", "--scene", str(scene), "--operator", "colorquant", "--out", str(tmp_path / "x.png")]) == 0
    assert digest(scene) == before


def test_error_exit_codes(runs, tmp_path, capsys):
    root, _ = runs
    scene = str(root / "a" / "scene")
    with pytest.raises(SystemExit) as e:
        main(["render", "--scene", scene])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["no-such-command"])
    assert e.value.code == 2
    capsys.readouterr()
    assert main(["render", "--scene", str(tmp_path), "--checkpoint", "x", "--operator", "labelpaint",
                 "--target-view", "0", "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("lift3d: error:")
    assert main(["lift", "--scene", scene, "--checkpoint", str(root / "a" / "models"), "--operator", "nope",
                 "--out", str(tmp_path / "o")]) == 1
    assert main(["lift", "--scene", scene, "--checkpoint", str(root / "a" / "models"), "--operator", "labelpaint",
                 "--targets", "99", "--out", str(tmp_path / "o")]) == 1
    assert main(["gen-scene", "--operators", "bogus", "--out", str(tmp_path / "g")]) == 1


def test_resume_rejects_other_config(runs, tmp_path):
    root, _ = runs
    import shutil
    out = tmp_path / "m"
    shutil.copytree(root / "a" / "models" / "model_full", out)
    scene = str(root / "a" / "scene")
    argv = ["train", "--scenes", scene, "--operators", "colorquant", "--rays", "16", "--n-coarse", "4",
            "--n-fine", "4", "--resume", "--out", str(out)]
    assert main(argv + ["--steps", "3"]) == 1  # different schedule
    assert main(argv + ["--steps", "2"]) == 0  # already done, nothing to add
