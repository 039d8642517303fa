import json
import math

import numpy as np
import pytest

from lmmvqa.decoder import QualityPrediction
from lmmvqa.encoders import encode_video
from lmmvqa.evaluation import (
    EvalReport,
    PredictionSet,
    QualityLabel,
    evaluate_predictions,
    format_table,
    kfold_split,
    level_accuracy,
    mean_report,
    plcc,
    run_protocol,
    srcc,
)
from lmmvqa.exceptions import CheckpointMissing, ConfigError, DegenerateInput, ManifestMissing, TooFewSamples
from lmmvqa.prompting import DatasetManifest, ManifestRecord
from lmmvqa.synthetic import textured_video
from lmmvqa.training import TrainConfig


def test_srcc_examples():
    assert srcc([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert srcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert srcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)


def test_plcc_examples():
    assert plcc([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert plcc([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0)
    assert plcc([0, 1, 2], [0, 1, 4]) == pytest.approx(0.9608, abs=1e-4)


def test_ties_use_average_ranks():
    # ranks (1.5, 1.5, 3) vs (1, 2, 3)
    expected = np.corrcoef([1.5, 1.5, 3], [1, 2, 3])[0, 1]
    assert srcc([5, 5, 9], [1, 2, 3]) == pytest.approx(expected, abs=1e-12)


def test_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        srcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateInput):
        plcc([1, 2, 3], [4, 4, 4])
    with pytest.raises(DegenerateInput):
        srcc([1], [2])
    with pytest.raises(ValueError):
        plcc([1, 2], [1, 2, 3])


def test_symmetry_and_invariances():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(40), rng.standard_normal(40)
    assert srcc(x, y) == pytest.approx(srcc(y, x), abs=1e-15)
    assert plcc(x, y) == pytest.approx(plcc(y, x), abs=1e-15)
    assert srcc(np.exp(x), y) == srcc(x, y)
    assert plcc(3 * x + 2, y) == pytest.approx(plcc(x, y), abs=1e-12)
    assert plcc(-2 * x + 1, y) == pytest.approx(-plcc(x, y), abs=1e-12)


def pred(score=None, level=None):
    return QualityPrediction(score=score, level=level)


def test_level_accuracy_example():
    preds = PredictionSet([
        ("a", pred(level="good"), QualityLabel(80, "good")),
        ("b", pred(level="poor"), QualityLabel(75, "good")),
        ("c", pred(level="fair"), QualityLabel(50, "fair")),
    ])
    acc = level_accuracy(preds)
    assert acc["good"] == 0.5 and acc["fair"] == 1.0 and acc["poor"] is None
    assert acc["total"] == pytest.approx(0.6667, abs=1e-4)


def test_level_accuracy_extremes_and_confusion_trace():
    levels = ["poor", "fair", "good"]
    rng = np.random.default_rng(1)
    gts = rng.choice(levels, 30)
    outs = rng.choice(levels, 30)
    preds = PredictionSet([(str(i), pred(level=o), QualityLabel(0, g)) for i, (o, g) in enumerate(zip(outs, gts))])
    confusion = np.zeros((3, 3))
    for o, g in zip(outs, gts):
        confusion[levels.index(g), levels.index(o)] += 1
    assert level_accuracy(preds)["total"] == pytest.approx(np.trace(confusion) / 30)
    right = PredictionSet([(str(i), pred(level=g), QualityLabel(0, g)) for i, g in enumerate(gts)])
    assert all(v == 1.0 for v in level_accuracy(right).values() if v is not None)
    wrong = PredictionSet([(str(i), pred(level=None), QualityLabel(0, g)) for i, g in enumerate(gts)])
    assert level_accuracy(wrong)["total"] == 0.0


def test_prediction_set_rejects_duplicates():
    with pytest.raises(ValueError):
        PredictionSet([("a", pred(1), QualityLabel(1)), ("a", pred(2), QualityLabel(2))])


def test_report_excludes_unparsed_scores():
    preds = PredictionSet([
        ("a", pred(1.0, "poor"), QualityLabel(10, "poor")),
        ("b", pred(None, "fair"), QualityLabel(20, "fair")),
        ("c", pred(2.0, "good"), QualityLabel(30, "good")),
        ("d", pred(3.0, "good"), QualityLabel(40, "good")),
    ], parse_failures=1)
    report = evaluate_predictions(preds, dataset="toy")
    assert report.srcc == pytest.approx(1.0) and report.n == 4 and report.parse_failures == 1
    assert report.accuracy["total"] == 1.0
    assert json.loads(report.to_json())["dataset"] == "toy"
    table = format_table([report])
    assert "toy" in table and "1.0000" in table


def test_mean_report():
    a = EvalReport(0.5, 0.7, {"poor": 1.0, "fair": None, "good": 0.0, "total": 0.5}, 2, 0, 0, "fp", "d", ["x", "y"])
    b = EvalReport(0.7, 0.9, {"poor": 0.0, "fair": 1.0, "good": None, "total": 0.5}, 3, 1, 1, "fp", "d", ["z"])
    m = mean_report([a, b])
    assert m.srcc == pytest.approx(0.6) and m.plcc == pytest.approx(0.8)
    assert m.accuracy == {"poor": 0.5, "fair": 1.0, "good": 0.0, "total": 0.5}
    assert (m.n, m.parse_failures, m.fold_id) == (5, 1, "mean")


def manifest(n):
    return DatasetManifest([ManifestRecord(f"v{i:02d}", "", float(i)) for i in range(n)], name="toy")


def test_kfold_sizes():
    folds = kfold_split(manifest(10), 5, seed=0)
    assert [len(f) for f in folds] == [2] * 5
    sizes = sorted(len(f) for f in kfold_split(manifest(11), 5, seed=0))
    assert sizes == [2, 2, 2, 2, 3]
    ids = [v for f in kfold_split(manifest(11), 5, seed=0) for v in f.video_ids]
    assert sorted(ids) == manifest(11).video_ids
    assert [f.video_ids for f in kfold_split(manifest(11), 5, 4)] == [f.video_ids for f in kfold_split(manifest(11), 5, 4)]
    with pytest.raises(TooFewSamples):
        kfold_split(manifest(3), 5)


def tiny_corpus(n):
    videos = {}
    records = []
    for i in range(n):
        v = textured_video("A", seed=i, n_frames=8, size=16, fps=4, blur=0.3 * i, source_id=f"t{i}")
        videos[v.source_id] = encode_video(v, "toy-spatial-p8", "toy-motion")
        records.append(ManifestRecord(v.source_id, "", 70.0 - 5 * i))
    return DatasetManifest(records, name="tiny"), videos


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=8, d_model=16, n_temporal_tokens=4, spatial_backend="toy-spatial-p8",
                val_fraction=0.0, n_templates=20, max_images=4, max_new_tokens=12)
    base.update(kw)
    return TrainConfig(**base)


def test_in_sample_and_ood_protocols(tmp_path):
    m, videos = tiny_corpus(6)
    train_m, test_m = m.subset(m.video_ids[:4], "train"), m.subset(m.video_ids[4:], "test")
    loader = lambda r: videos[r.video_id]
    saved = []
    reports = run_protocol("in_sample", tiny_config(), {"train": train_m, "test": [test_m]}, loader=loader,
                           on_checkpoint=saved.append)
    assert len(reports) == 1 and reports[0].n == 2 and reports[0].dataset == "test"
    saved[0].save(tmp_path / "ck")
    ood = run_protocol("ood", tiny_config(), {"test": [test_m]}, checkpoint=str(tmp_path / "ck"), loader=loader)
    assert ood[0].n == 2
    again = run_protocol("ood", tiny_config(), {"test": [test_m]}, checkpoint=str(tmp_path / "ck"), loader=loader)
    assert again[0].to_dict() == ood[0].to_dict()
    with pytest.raises(ConfigError):
        run_protocol("ood", tiny_config(), {"test": [train_m]}, checkpoint=str(tmp_path / "ck"), loader=loader)


def test_protocol_errors():
    m, videos = tiny_corpus(3)
    with pytest.raises(CheckpointMissing):
        run_protocol("ood", tiny_config(), {"test": [m]})
    with pytest.raises(ManifestMissing):
        run_protocol("in_sample", tiny_config(), {"train": m})
    with pytest.raises(ManifestMissing):
        run_protocol("finetune", tiny_config(), {})
    with pytest.raises(ConfigError):
        run_protocol("zero-shot", tiny_config(), {"train": m})
