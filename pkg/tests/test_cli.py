import json
import os

import pytest
import yaml

from lmmvqa.cli import RunConfig, build_parser, load_run_config, main
from lmmvqa.synthetic import textured_video, write_video
from lmmvqa.training import Checkpoint, TrainConfig, build_model, module_fingerprint


def run(capsys, *argv):
    code = main(["--log-level", "WARNING", *argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(out[-1])


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("LMMVQA_CACHE_DIR", raising=False)
    rows = ["video_id,path,mos"]
    for i in range(5):
        video = textured_video("A", seed=i, n_frames=8, size=16, fps=4, blur=0.5 * i)
        write_video(tmp_path / f"c{i}.avi", video)
        rows.append(f"c{i},c{i}.avi,{70 - 10 * i}.0")
    (tmp_path / "train.csv").write_text("\n".join(rows) + "\n")
    (tmp_path / "three.csv").write_text("\n".join(rows[:4]) + "\n")
    config = {
        "train_manifest": "train.csv",
        "test_manifests": ["train.csv"],
        "spatial_backend": "toy-spatial-p8",
        "frame_size": [16, 16],
        "n_temporal_tokens": 4,
        "d_model": 16,
        "val_fraction": 0.0,
        "n_templates": 20,
        "max_images": 4,
        "max_new_tokens": 12,
        "epochs": 2,
        "batch_size": 10,
    }
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(config))
    return tmp_path


def test_help_lists_every_key_with_its_default(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    text = capsys.readouterr().out
    for key, default in RunConfig.keys().items():
        assert "--" + key.replace("_", "-") in text
    assert 'default: 32' in text and 'default: "toy-spatial"' in text


def test_config_layering(workspace, monkeypatch):
    parser = build_parser()
    args = parser.parse_args(["train", "-c", "run.yaml", "--epochs", "9"])
    monkeypatch.setenv("LMMVQA_CACHE_DIR", str(workspace / "elsewhere"))
    config = load_run_config(args)
    assert config.train.epochs == 9
    assert config.train.d_model == 16
    assert config.train.batch_size == 10
    assert config.cache_dir == str(workspace / "elsewhere")
    flagged = load_run_config(parser.parse_args(["train", "-c", "run.yaml", "--cache-dir", "mine"]))
    assert flagged.cache_dir == "mine"


def test_unknown_and_invalid_keys(workspace, capsys):
    (workspace / "bad.yaml").write_text("epochs: 3\nlearning_rat: 0.1\n")
    code, status = run(capsys, "train", "-c", "bad.yaml")
    assert code == 2 and status["error"] == "ConfigError" and "learning_rat" in status["message"]
    code, status = run(capsys, "train", "-c", "run.yaml", "--batch-size", "0")
    assert code == 2 and status["status"] == "error"


def test_preprocess_is_idempotent(workspace, capsys):
    code, status = run(capsys, "preprocess", "-c", "run.yaml", "--train-manifest", "three.csv", "--test-manifests", "three.csv")
    assert code == 0 and sorted(status["created"]) == ["c0", "c1", "c2"]
    entries = sorted(p.name for p in (workspace / "cache").iterdir() if p.is_dir())
    assert entries == ["c0", "c1", "c2"]
    stamps = {p: p.stat().st_mtime_ns for p in (workspace / "cache").rglob("*") if p.is_file()}
    code, status = run(capsys, "preprocess", "-c", "run.yaml", "--train-manifest", "three.csv", "--test-manifests", "three.csv")
    assert code == 0 and status["created"] == [] and sorted(status["skipped"]) == ["c0", "c1", "c2"]
    assert {p: p.stat().st_mtime_ns for p in stamps} == stamps


def test_preprocess_continues_past_a_corrupt_video(workspace, capsys):
    (workspace / "broken.avi").write_bytes(b"\x00garbage")
    (workspace / "mixed.csv").write_text("video_id,path,mos\nc0,c0.avi,50\nbad,broken.avi,40\nc1,c1.avi,30\n")
    code, status = run(capsys, "preprocess", "-c", "run.yaml", "--train-manifest", "mixed.csv", "--test-manifests", "mixed.csv")
    assert code != 0
    assert sorted(status["created"]) == ["c0", "c1"]
    assert list(status["failed"]) == ["bad"]
    assert not (workspace / "cache" / "bad" / "chunks.json").exists()


def test_build_prompts(workspace, capsys):
    code, status = run(capsys, "build-prompts", "-c", "run.yaml")
    assert code == 2 and status["error"] == "MissingCache"
    assert run(capsys, "preprocess", "-c", "run.yaml")[0] == 0
    code, status = run(capsys, "build-prompts", "-c", "run.yaml")
    assert code == 0 and status["count"] == 10
    first = (workspace / "prompts.jsonl").read_bytes()
    assert len(first.decode().splitlines()) == 10
    run(capsys, "build-prompts", "-c", "run.yaml")
    assert (workspace / "prompts.jsonl").read_bytes() == first


def test_train_with_zero_epochs_saves_the_initialisation(workspace, capsys):
    run(capsys, "preprocess", "-c", "run.yaml")
    run(capsys, "build-prompts", "-c", "run.yaml")
    code, status = run(capsys, "train", "-c", "run.yaml", "--epochs", "0")
    assert code == 0 and status["outputs"] == ["checkpoint"]
    ckpt = Checkpoint.load(workspace / "checkpoint")
    from lmmvqa.cli import _cached_features

    config = load_run_config(build_parser().parse_args(["train", "-c", "run.yaml", "--epochs", "0"]))
    fresh = build_model(config.train, _cached_features(config, config_manifest(config)))
    assert module_fingerprint(ckpt.model) == module_fingerprint(fresh)


def config_manifest(config):
    from lmmvqa.prompting import read_manifest

    return read_manifest(config.train_manifest)


def test_evaluate_without_checkpoint(workspace, capsys):
    code, status = run(capsys, "evaluate", "-c", "run.yaml")
    assert code == 2 and status["error"] == "CheckpointMissing"


def test_full_run_and_memorised_prediction(workspace, capsys):
    assert run(capsys, "preprocess", "-c", "run.yaml", "--train-manifest", "three.csv", "--test-manifests", "three.csv")[0] == 0
    assert run(capsys, "build-prompts", "-c", "run.yaml", "--train-manifest", "three.csv")[0] == 0
    code, status = run(capsys, "train", "-c", "run.yaml", "--train-manifest", "three.csv", "--epochs", "150",
                       "--batch-size", "6", "--d-model", "32")
    assert code == 0
    code, status = run(capsys, "predict", "-c", "run.yaml", str(workspace / "cache" / "c1"))
    assert code == 0
    assert status["prediction"]["score"] == 60.0
    assert status["prediction"]["level"] == "fair"
    code, status = run(capsys, "evaluate", "-c", "run.yaml", "--test-manifests", "three.csv")
    assert code == 0
    report = status["reports"][0]
    assert report["n"] == 3 and report["srcc"] == pytest.approx(1.0)
    assert (workspace / "reports" / "reports.json").exists() and (workspace / "reports" / "reports.txt").exists()
    code, status = run(capsys, "predict", "-c", "run.yaml", str(workspace / "c2.avi"))
    assert code == 0 and status["video_id"] == "c2"


def test_finetune_evaluation_dumps_folds(workspace, capsys):
    run(capsys, "preprocess", "-c", "run.yaml")
    run(capsys, "build-prompts", "-c", "run.yaml")
    run(capsys, "train", "-c", "run.yaml", "--epochs", "1")
    code, status = run(capsys, "evaluate", "-c", "run.yaml", "--protocol", "finetune", "--epochs", "1")
    assert code == 0
    assert [r["fold_id"] for r in status["reports"]] == [0, 1, 2, 3, 4, "mean"]
    folds = json.loads((workspace / "reports" / "folds.json").read_text())
    assert sorted(v for ids in folds.values() for v in ids) == [f"c{i}" for i in range(5)]


def test_locked_directory_is_refused(workspace, capsys):
    from filelock import FileLock

    (workspace / "cache").mkdir()
    with FileLock(str(workspace / "cache" / ".lmmvqa.lock")):
        code, status = run(capsys, "preprocess", "-c", "run.yaml", "--lock-timeout", "0.1")
    assert code == 2 and "locked" in status["message"]
