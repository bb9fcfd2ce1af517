import json
import shutil

import pytest

from psychocnn.cli import load_config, main
from psychocnn.models import ModelSpec, build_model, make_checkpoint, save_checkpoint

BASE = {
    "seed": 3,
    "out": "run",
    "input_size": 64,
    "models": [{"name": "alexnet"}, {"name": "fe_alexnet"}],
    "data": {"synthetic": {"n_train": 12, "n_val": 6, "size": 72}},
    "train": {"epochs": 1, "random_crop": False, "horizontal_flip": False},
    "continuum": {"synthetic": {"n_levels": 21, "size": 72}},
    "human": {"synthetic": {"participants": 6, "reps": 10}},
    "cam": {"levels": [0, 1]},
}


def _write(tmp_path, doc, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root, BASE)
    assert main(["transfer", "--config", str(cfg)]) == 0
    return root


def _copy(trained, tmp_path):
    shutil.copytree(trained, tmp_path, dirs_exist_ok=True)
    return tmp_path / "c.json"


def test_transfer_artifacts(trained):
    run = trained / "run"
    for key in ("alexnet_object_based", "fe_alexnet_object_based"):
        assert (run / "checkpoints" / key / "manifest.json").is_file()
        rep = json.loads((run / "reports" / f"{key}.train.json").read_text())
        assert rep["seed"] == 3 and len(rep["config_sha256"]) == 64
        assert "wall_clock_seconds" not in rep
        assert rep["provenance"] == "randomly_initialized"


def test_experiment_bundles(trained, tmp_path):
    cfg = _copy(trained, tmp_path)
    for which in ("1", "2", "3"):
        assert main(["experiment", which, "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    exp1 = json.loads((run / "exp1" / "report.json").read_text())
    assert len(exp1["rows"]) == 2
    assert (run / "exp1" / "psychometric.png").is_file()
    assert (run / "exp1" / "cam_object_based.png").is_file()
    exp2 = json.loads((run / "exp2" / "object_based" / "report.json").read_text())
    assert [r["condition"] for r in exp2["rows"]] == ["eyes", "eyes", "nose", "nose", "mouth", "mouth"]
    exp3 = json.loads((run / "exp3" / "report.json").read_text())
    assert {r["model"] for r in exp3["rows"]} == {"fe_alexnet"} and len(exp3["rows"]) == 4
    assert "Model" in (run / "exp1" / "report.txt").read_text()
    for p in run.rglob("*.json"):
        if p.parent.parent.name != "checkpoints":
            doc = json.loads(p.read_text())
            assert doc["seed"] == 3 and "config_sha256" in doc


def test_rerun_is_byte_identical(trained, tmp_path):
    cfg = _copy(trained, tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["transfer", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["experiment", "1", "--config", str(cfg), "--out", str(out)]) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*.json"))
    assert files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_writes_stay_under_output(trained, tmp_path):
    cfg = _copy(trained, tmp_path)
    before = {p for p in tmp_path.rglob("*") if "run" not in p.relative_to(tmp_path).parts}
    assert main(["curve", "--config", str(cfg)]) == 0
    after = {p for p in tmp_path.rglob("*") if "run" not in p.relative_to(tmp_path).parts}
    assert before == after


def test_seed_override_changes_provenance(trained, tmp_path):
    cfg = _copy(trained, tmp_path)
    a = load_config(cfg)
    b = load_config(cfg, seed=4)
    assert b.seed == 4 and a.sha256 != b.sha256
    assert load_config(cfg, out=str(tmp_path / "x")).sha256 == a.sha256


def test_report_and_m_flag(trained, tmp_path, capsys):
    cfg = _copy(trained, tmp_path)
    assert main(["curve", "--config", str(cfg)]) == 0
    assert main(["report", "--config", str(cfg), "--m", "7"]) == 0
    doc = json.loads((tmp_path / "run" / "report" / "report.json").read_text())
    assert doc["bonferroni_m"] == 7
    assert "p-values Bonferroni corrected." in capsys.readouterr().out


def test_cam_layers(trained, tmp_path, capsys):
    cfg = _copy(trained, tmp_path)
    assert main(["cam", "--config", str(cfg), "--list-layers", "--model", "alexnet_object_based"]) == 0
    out = capsys.readouterr().out
    assert "features.10" in out and "default features.10" in out
    assert main(["cam", "--config", str(cfg), "--layer", "features.7", "--region", "mouth"]) == 0
    assert (tmp_path / "run" / "cam" / "mouth.png").is_file()
    assert main(["cam", "--config", str(cfg), "--layer", "nope"]) == 1


def test_mask_eval_single_region(trained, tmp_path):
    cfg = _copy(trained, tmp_path)
    assert main(["mask-eval", "--config", str(cfg), "--region", "eyes"]) == 0
    curves = sorted(p.name for p in (tmp_path / "run" / "curves").glob("*.json"))
    assert curves == ["alexnet_object_based__eyes.json", "fe_alexnet_object_based__eyes.json"]


def test_fit_human_summary(tmp_path):
    doc = dict(BASE, human={"summary": {"mean": 0.532, "sem": 0.018, "n": 50}})
    assert main(["fit-human", "--config", str(_write(tmp_path, doc))]) == 0
    base = json.loads((tmp_path / "run" / "human" / "baseline.json").read_text())
    assert base["n"] == 50 and base["mean"] == 0.532


def test_schema_error_exit_code(tmp_path, capsys):
    doc = dict(BASE, models=[{"name": "resnet"}])
    assert main(["transfer", "--config", str(_write(tmp_path, doc))]) == 1
    assert "models/0/name" in capsys.readouterr().err


def test_missing_dataset_fails_before_training(tmp_path, capsys):
    doc = dict(BASE, data={"train": "nowhere/train.csv", "val": "nowhere/val.csv"})
    assert main(["transfer", "--config", str(_write(tmp_path, doc))]) == 1
    assert "training set not found" in capsys.readouterr().err
    assert not (tmp_path / "run" / "checkpoints").exists()


def test_model_level_isolation(tmp_path):
    # an incompatible source checkpoint breaks one model, not the run
    vgg = build_model(ModelSpec("vgg11", input_size=64))
    save_checkpoint(make_checkpoint(vgg, "object_pretrained"), tmp_path / "vgg")
    doc = dict(BASE, models=[{"name": "alexnet", "init": "checkpoint", "checkpoint": "vgg"},
                             {"name": "fe_alexnet"}])
    assert main(["transfer", "--config", str(_write(tmp_path, doc))]) == 2
    assert (tmp_path / "run" / "checkpoints" / "fe_alexnet_object_based" / "manifest.json").is_file()
    assert not (tmp_path / "run" / "checkpoints" / "alexnet_object_based").exists()


def test_experiment3_names_missing_fe(tmp_path, capsys):
    doc = dict(BASE, models=[{"name": "alexnet"}])
    assert main(["experiment", "3", "--config", str(_write(tmp_path, doc))]) == 1
    assert "FE-AlexNet" in capsys.readouterr().err
    doc = dict(BASE)
    assert main(["experiment", "3", "--config", str(_write(tmp_path, doc))]) == 1
    assert "checkpoints/fe_alexnet_object_based/manifest.json" in capsys.readouterr().err


def test_missing_curves_and_baseline(tmp_path, capsys):
    assert main(["report", "--config", str(_write(tmp_path, BASE))]) == 1
    doc = {k: v for k, v in BASE.items() if k != "human"}
    assert main(["report", "--config", str(_write(tmp_path, doc))]) == 1
    assert "human" in capsys.readouterr().err


def test_duplicate_ids_rejected(tmp_path):
    doc = dict(BASE, models=[{"name": "alexnet"}, {"name": "alexnet"}])
    assert main(["transfer", "--config", str(_write(tmp_path, doc))]) == 1


def test_shipped_config_validates():
    from pathlib import Path
    cfg = load_config(Path(__file__).parents[1] / "configs" / "synthetic.json")
    assert [m.name for m in cfg.models] == ["alexnet", "vgg11", "vgg13", "vgg16", "fe_alexnet"]
