"""Q&A instruction data: templates, tertile quality levels and answer frames.

Every (video, MOS) record yields two prompts: one asking for the score and
one asking for the poor / fair / good level.  Questions are assembled from
a fixed slot-filling grammar so that thousands of distinct instructions
are available without any external text generator.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import GrammarExhausted, TooFewSamples

REGRESSION = "regression"
CLASSIFICATION = "classification"
TASKS = (REGRESSION, CLASSIFICATION)
LEVELS = ("poor", "fair", "good")

TEMPORAL_MARKER = "<temporal>"

SYSTEM_PROMPTS = (
    "You are an expert in video quality assessment.",
    "You are a helpful assistant that evaluates the perceptual quality of videos.",
    "You are a video quality assessment model that rates user generated videos.",
    "You are a careful judge of visual quality who inspects videos frame by frame.",
    "You are an assistant specialised in spotting blur, noise and stutter in videos.",
    "You are a professional video quality rater.",
)
# (opener, takes a question mark)
OPENERS = (
    ("Could you", True),
    ("Can you", True),
    ("Would you", True),
    ("Will you", True),
    ("Please", False),
    ("Kindly", False),
    ("I would like you to", False),
    ("I need you to", False),
    ("Your task is to", False),
    ("Go ahead and", False),
)
VERBS = ("estimate", "assess", "rate", "evaluate", "judge", "determine", "predict", "measure")
TARGETS = (
    "the perceptual quality of this video",
    "the visual quality of the clip",
    "the overall quality of the given video",
    "how good this video looks",
    "the quality of this footage",
    "the viewing quality of this video",
)
FRAME_REFERENCES = (
    "based on these frames",
    "using the key frames below",
    "with the help of these frames",
    "from the sampled frames",
    "given the frames and motion cues",
    "by looking at the frames that follow",
    "according to the provided frames",
    "considering its spatial and temporal content",
)
RESTRICTIONS = (
    "Answer in one sentence that gives {format}.",
    "Reply with a single sentence containing {format}.",
    "Respond only with {format}.",
    "Keep the answer short and state {format}.",
    "Your response must contain {format}.",
)
ANSWER_FORMATS = {
    REGRESSION: "a quality score with one decimal place",
    CLASSIFICATION: "one quality level among poor, fair and good",
}
REGRESSION_ANSWER = "The quality score of the video is {score:.1f}."
CLASSIFICATION_ANSWER = "The quality of the video is {level}."


@dataclass(frozen=True)
class PromptTemplate:
    system_prompt: str
    instruction: str
    response_restriction: str
    template_id: int

    def __post_init__(self):
        if not (self.system_prompt and self.instruction and self.response_restriction):
            raise ValueError("template parts must be nonempty")


@dataclass(frozen=True)
class QAInstruction:
    video_id: str
    task: str
    question: str
    answer: str
    template_id: int


@dataclass(frozen=True)
class ManifestRecord:
    video_id: str
    path: str
    mos: float
    split: str | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    scale: tuple[float, float] | None = None
    name: str = ""
    _by_id: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.records = list(self.records)
        ids = [r.video_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate video ids in manifest: {dupes[:5]}")
        for r in self.records:
            if not math.isfinite(r.mos):
                raise ValueError(f"{r.video_id}: MOS must be finite")
        if self.scale is None and self.records:
            self.scale = (min(r.mos for r in self.records), max(r.mos for r in self.records))
        if self.scale is not None:
            lo, hi = self.scale
            bad = [r.video_id for r in self.records if not lo <= r.mos <= hi]
            if bad:
                raise ValueError(f"MOS outside declared scale {self.scale}: {bad[:5]}")
        self._by_id = {r.video_id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def video_ids(self) -> list[str]:
        return [r.video_id for r in self.records]

    @property
    def mos(self) -> np.ndarray:
        return np.array([r.mos for r in self.records], dtype=float)

    def __getitem__(self, video_id: str) -> ManifestRecord:
        return self._by_id[video_id]

    def subset(self, video_ids: Iterable[str], name: str | None = None) -> "DatasetManifest":
        return DatasetManifest([self._by_id[i] for i in video_ids], self.scale, name or self.name)


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_manifest(path, scale: tuple[float, float] | None = None) -> DatasetManifest:
    """Read a CSV (``video_id,path,mos[,split]``) or JSON-lines manifest.

    Relative video paths are resolved against the manifest's directory.
    """
    path = Path(path)
    rows: list[dict] = []
    with open(path, encoding="utf-8", newline="") as fh:
        if path.suffix.lower() in (".jsonl", ".json", ".ndjson"):
            rows = [json.loads(line) for line in fh if line.strip()]
        else:
            rows = list(csv.DictReader(fh))
    records = []
    for row in rows:
        missing = {"video_id", "path", "mos"} - set(row)
        if missing:
            raise ValueError(f"{path}: manifest row lacks {sorted(missing)}")
        if not _is_float(str(row["mos"])):
            raise ValueError(f"{path}: MOS {row['mos']!r} is not a number")
        video_path = Path(row["path"])
        if not video_path.is_absolute():
            video_path = path.parent / video_path
        records.append(ManifestRecord(str(row["video_id"]), str(video_path), float(row["mos"]), row.get("split") or None))
    return DatasetManifest(records, scale, name=path.stem)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video_id", "path", "mos", "split"])
        for r in manifest:
            writer.writerow([r.video_id, r.path, repr(r.mos), r.split or ""])


def _instruction_grammar() -> list[str]:
    out = []
    for (opener, question), verb, target, ref in itertools.product(OPENERS, VERBS, TARGETS, FRAME_REFERENCES):
        out.append(f"{opener} {verb} {target} {ref}{'?' if question else '.'}")
    return out


def generate_templates(count: int = 2000, seed: int = 0) -> list[PromptTemplate]:
    if count < 1:
        raise ValueError("count must be >= 1")
    instructions = _instruction_grammar()
    if count > len(instructions):
        raise GrammarExhausted(f"grammar yields {len(instructions)} distinct instructions, {count} requested")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(instructions))[:count]
    systems = rng.integers(len(SYSTEM_PROMPTS), size=count)
    restrictions = rng.integers(len(RESTRICTIONS), size=count)
    return [
        PromptTemplate(SYSTEM_PROMPTS[s], instructions[i], RESTRICTIONS[r], t)
        for t, (i, s, r) in enumerate(zip(order, systems, restrictions))
    ]


def grammar_text() -> list[str]:
    """Every literal text fragment the prompt and answer grammar can emit."""
    parts = list(SYSTEM_PROMPTS) + [o for o, _ in OPENERS] + list(VERBS) + list(TARGETS)
    parts += list(FRAME_REFERENCES) + [r.format(format="") for r in RESTRICTIONS]
    parts += list(ANSWER_FORMATS.values()) + ["? ."]
    parts += [REGRESSION_ANSWER.format(score=0.0), CLASSIFICATION_ANSWER.format(level="")]
    return parts + list(LEVELS)


def bucket_levels(manifest: DatasetManifest) -> dict[str, str]:
    """Equal-tertile poor/fair/good labels; remainders go to poor, then fair."""
    n = len(manifest)
    if n < 3:
        raise TooFewSamples(f"need at least 3 records to form tertiles, got {n}")
    ordered = sorted(manifest.records, key=lambda r: (r.mos, r.video_id))
    base, rem = divmod(n, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    levels = {}
    start = 0
    for level, size in zip(LEVELS, sizes):
        for r in ordered[start : start + size]:
            levels[r.video_id] = level
        start += size
    return levels


def render_question(template: PromptTemplate, task: str, n_chunks: int) -> str:
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    restriction = template.response_restriction.format(format=ANSWER_FORMATS[task])
    images = " ".join(f"<image-{i}>" for i in range(1, n_chunks + 1))
    return f"{template.system_prompt} {template.instruction} {restriction} {images} {TEMPORAL_MARKER}"


def render_answer(task: str, *, score: float | None = None, level: str | None = None) -> str:
    if task == REGRESSION:
        return REGRESSION_ANSWER.format(score=float(score))
    if task == CLASSIFICATION:
        if level not in LEVELS:
            raise ValueError(f"unknown level {level!r}")
        return CLASSIFICATION_ANSWER.format(level=level)
    raise ValueError(f"unknown task {task!r}")


def record_rng(seed: int, video_id: str) -> np.random.Generator:
    """Per-record stream, so records can be processed in any order."""
    return np.random.default_rng([int(seed), zlib.crc32(video_id.encode("utf-8"))])


def select_templates(video_id: str, templates: Sequence[PromptTemplate], seed: int) -> dict[str, PromptTemplate]:
    if not templates:
        raise ValueError("templates must be nonempty")
    picks = record_rng(seed, video_id).integers(len(templates), size=len(TASKS))
    return {task: templates[i] for task, i in zip(TASKS, picks)}


def build_qa_pairs(record: ManifestRecord, level: str, templates: Sequence[PromptTemplate], n_chunks: int,
                   seed: int) -> list[QAInstruction]:
    chosen = select_templates(record.video_id, templates, seed)
    return [
        QAInstruction(
            record.video_id,
            REGRESSION,
            render_question(chosen[REGRESSION], REGRESSION, n_chunks),
            render_answer(REGRESSION, score=record.mos),
            chosen[REGRESSION].template_id,
        ),
        QAInstruction(
            record.video_id,
            CLASSIFICATION,
            render_question(chosen[CLASSIFICATION], CLASSIFICATION, n_chunks),
            render_answer(CLASSIFICATION, level=level),
            chosen[CLASSIFICATION].template_id,
        ),
    ]


def build_dataset(manifest: DatasetManifest, templates: Sequence[PromptTemplate], n_chunks: Mapping[str, int],
                  seed: int, levels: Mapping[str, str] | None = None) -> list[QAInstruction]:
    """Two prompts per record; levels default to the manifest's own tertiles."""
    levels = bucket_levels(manifest) if levels is None else levels
    pairs = []
    for record in manifest:
        pairs.extend(build_qa_pairs(record, levels[record.video_id], templates, n_chunks[record.video_id], seed))
    return pairs


def export_prompts(pairs: Sequence[QAInstruction], path) -> Path:
    if not pairs:
        raise ValueError("no prompts to export")
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            fh.write(json.dumps(asdict(pair), ensure_ascii=False) + "\n")
    return path


def import_prompts(path) -> list[QAInstruction]:
    with open(path, encoding="utf-8") as fh:
        return [QAInstruction(**json.loads(line)) for line in fh if line.strip()]
