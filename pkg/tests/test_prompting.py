import json
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmmvqa.decoder import parse_answer
from lmmvqa.exceptions import GrammarExhausted, TooFewSamples
from lmmvqa.prompting import (
    CLASSIFICATION,
    REGRESSION,
    DatasetManifest,
    ManifestRecord,
    build_dataset,
    build_qa_pairs,
    bucket_levels,
    export_prompts,
    generate_templates,
    import_prompts,
    read_manifest,
    render_answer,
    render_question,
    write_manifest,
)


def manifest_of(scores, prefix="v"):
    return DatasetManifest([ManifestRecord(f"{prefix}{i:04d}", f"{prefix}{i}.mp4", float(s)) for i, s in enumerate(scores)])


def test_two_thousand_distinct_templates():
    templates = generate_templates(2000, seed=7)
    assert len(templates) == 2000
    assert len({t.instruction for t in templates}) == 2000
    assert len({t.template_id for t in templates}) == 2000


def test_single_template_and_determinism():
    assert len(generate_templates(1, seed=0)) == 1
    assert generate_templates(50, seed=3) == generate_templates(50, seed=3)
    assert generate_templates(50, seed=3) != generate_templates(50, seed=4)


def test_grammar_limit():
    with pytest.raises(GrammarExhausted):
        generate_templates(10**6)
    with pytest.raises(ValueError):
        generate_templates(0)


def test_equal_tertiles():
    levels = bucket_levels(manifest_of([10, 20, 30, 40, 50, 60]))
    assert [levels[f"v{i:04d}"] for i in range(6)] == ["poor", "poor", "fair", "fair", "good", "good"]


def test_remainder_goes_to_poor():
    levels = bucket_levels(manifest_of(range(7)))
    counts = {lv: list(levels.values()).count(lv) for lv in ("poor", "fair", "good")}
    assert counts == {"poor": 3, "fair": 2, "good": 2}
    eight = bucket_levels(manifest_of(range(8)))
    assert [list(eight.values()).count(lv) for lv in ("poor", "fair", "good")] == [3, 3, 2]


def test_ties_break_by_video_id():
    levels = bucket_levels(manifest_of([5.0] * 6))
    assert [levels[f"v{i:04d}"] for i in range(6)] == ["poor", "poor", "fair", "fair", "good", "good"]
    assert bucket_levels(manifest_of([5.0] * 6)) == levels


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        bucket_levels(manifest_of([1, 2]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1000).map(lambda v: v / 10), min_size=3, max_size=60))
def test_buckets_partition_and_resist_monotone_maps(scores):
    m = manifest_of(scores)
    levels = bucket_levels(m)
    assert set(levels) == set(m.video_ids)
    sizes = [list(levels.values()).count(lv) for lv in ("poor", "fair", "good")]
    assert max(sizes) - min(sizes) <= 1
    warped = manifest_of([np.exp(s / 10.0) * 3 + 1 for s in scores])
    assert bucket_levels(warped) == levels


def test_qa_pair_answers():
    templates = generate_templates(100, seed=0)
    reg, cls = build_qa_pairs(ManifestRecord("clip", "clip.mp4", 67.5), "good", templates, 8, seed=0)
    assert reg.task == REGRESSION and cls.task == CLASSIFICATION
    assert reg.answer == "The quality score of the video is 67.5."
    assert cls.answer == "The quality of the video is good."
    for pair in (reg, cls):
        found = re.findall(r"<image-(\d+)>", pair.question)
        assert found == [str(i) for i in range(1, 9)]
        assert pair.question.endswith("<image-8> <temporal>")


def test_placeholders_follow_the_prompt_text():
    t = generate_templates(1)[0]
    q = render_question(t, REGRESSION, 3)
    assert q.index(t.instruction) < q.index("<image-1>") < q.index("<image-3>") < q.index("<temporal>")
    assert "one decimal" in q
    assert "poor, fair and good" in render_question(t, CLASSIFICATION, 3)


def test_dataset_size_and_determinism():
    m = manifest_of(np.linspace(1, 5, 1200))
    templates = generate_templates(2000, seed=0)
    n_chunks = {vid: 8 for vid in m.video_ids}
    pairs = build_dataset(m, templates, n_chunks, seed=0)
    assert len(pairs) == 2400
    assert build_dataset(m, templates, n_chunks, seed=0) == pairs


def test_export_round_trip(tmp_path):
    m = manifest_of([10.0, 55.25, 90.0])
    pairs = build_dataset(m, generate_templates(20), {v: 2 for v in m.video_ids}, seed=1)[:2]
    path = export_prompts(pairs, tmp_path / "p.jsonl")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    assert set(json.loads(lines[0])) == {"video_id", "task", "question", "answer", "template_id"}
    assert import_prompts(path) == pairs


def test_export_errors(tmp_path):
    with pytest.raises(OSError):
        export_prompts(build_qa_pairs(ManifestRecord("a", "a", 1.0), "poor", generate_templates(2), 1, 0),
                       tmp_path / "missing-dir" / "p.jsonl")
    with pytest.raises(ValueError):
        export_prompts([], tmp_path / "empty.jsonl")


@pytest.mark.parametrize("score", [0.0, 1.2, 67.5, 99.9, 4.25])
def test_answer_round_trip(score):
    text = render_answer(REGRESSION, score=score)
    assert parse_answer(text, REGRESSION).score == round(score, 1)


@pytest.mark.parametrize("level", ["poor", "fair", "good"])
def test_level_round_trip(level):
    assert parse_answer(render_answer(CLASSIFICATION, level=level), CLASSIFICATION).level == level


def test_manifest_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        DatasetManifest([ManifestRecord("a", "x", 1.0), ManifestRecord("a", "y", 2.0)])
    with pytest.raises(ValueError):
        DatasetManifest([ManifestRecord("a", "x", 7.0)], scale=(1.0, 5.0))
    m = manifest_of([1.5, 2.5, 3.5])
    write_manifest(m, tmp_path / "m.csv")
    back = read_manifest(tmp_path / "m.csv")
    assert back.video_ids == m.video_ids
    assert np.array_equal(back.mos, m.mos)
    assert back["v0001"].path == str(tmp_path / "v1.mp4")
    (tmp_path / "m.jsonl").write_text(
        '{"video_id": "é1", "path": "/abs/a.mp4", "mos": 3}\n{"video_id": "b", "path": "b.mp4", "mos": 4.5}\n',
        encoding="utf-8",
    )
    j = read_manifest(tmp_path / "m.jsonl")
    assert j.video_ids == ["é1", "b"]
    assert j["é1"].path == "/abs/a.mp4"
