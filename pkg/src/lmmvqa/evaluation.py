"""SRCC / PLCC, per-level accuracy, k-fold splits and evaluation protocols."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .exceptions import CheckpointMissing, ConfigError, DegenerateInput, ManifestMissing, TooFewSamples
from .prompting import LEVELS, DatasetManifest, bucket_levels

logger = logging.getLogger(__name__)

IN_SAMPLE, OOD, FINETUNE = "in_sample", "ood", "finetune"
PROTOCOLS = (IN_SAMPLE, OOD, FINETUNE)


def _paired(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float).ravel()
    gt = np.asarray(gt, dtype=float).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {gt.size} targets")
    if pred.size < 2:
        raise DegenerateInput("need at least two samples")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise ValueError("inputs must be finite")
    if np.all(pred == pred[0]) or np.all(gt == gt[0]):
        raise DegenerateInput("correlation is undefined for a constant vector")
    return pred, gt


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    r = float(np.dot(xc, yc) / math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc))))
    return min(1.0, max(-1.0, r))


def plcc(pred, gt) -> float:
    """Pearson linear correlation, no nonlinear pre-fit."""
    return _pearson(*_paired(pred, gt))


def srcc(pred, gt) -> float:
    """Spearman rank correlation with average ranks for ties."""
    pred, gt = _paired(pred, gt)
    return _pearson(rankdata(pred), rankdata(gt))


@dataclass(frozen=True)
class QualityLabel:
    mos: float
    level: str | None = None


@dataclass
class PredictionSet:
    pairs: list = field(default_factory=list)  # (video_id, QualityPrediction, QualityLabel)
    parse_failures: int = 0

    def __post_init__(self):
        ids = [vid for vid, _, _ in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("video ids in a prediction set must be unique")

    def scored(self) -> tuple[np.ndarray, np.ndarray]:
        """Predicted and true scores over pairs whose score parsed."""
        rows = [(p.score, gt.mos) for _, p, gt in self.pairs if p.score is not None]
        if not rows:
            return np.empty(0), np.empty(0)
        pred, gt = zip(*rows)
        return np.array(pred, dtype=float), np.array(gt, dtype=float)


def level_accuracy(preds: PredictionSet) -> dict[str, float | None]:
    """Accuracy within each ground-truth level and overall.

    A prediction with no parsed level counts as wrong.  Levels with no
    ground-truth samples map to ``None``.
    """
    correct = dict.fromkeys(LEVELS, 0)
    count = dict.fromkeys(LEVELS, 0)
    for _, pred, gt in preds.pairs:
        if gt.level is None:
            raise ValueError("every pair needs a ground-truth level")
        count[gt.level] += 1
        correct[gt.level] += int(pred.level == gt.level)
    out: dict[str, float | None] = {lv: (correct[lv] / count[lv] if count[lv] else None) for lv in LEVELS}
    n = sum(count.values())
    out["total"] = sum(correct.values()) / n if n else None
    return out


@dataclass
class EvalReport:
    srcc: float | None
    plcc: float | None
    accuracy: dict | None
    n: int
    parse_failures: int = 0
    fold_id: int | str | None = None
    config_fingerprint: str = ""
    dataset: str = ""
    video_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def format_table(reports: Sequence[EvalReport]) -> str:
    header = f"{'dataset':<24}{'fold':>6}{'n':>6}{'SRCC':>9}{'PLCC':>9}{'poor':>8}{'fair':>8}{'good':>8}{'total':>8}{'fail':>6}"
    lines = [header, "-" * len(header)]
    for r in reports:
        acc = r.accuracy or {}
        lines.append(
            f"{r.dataset[:24]:<24}{str(r.fold_id if r.fold_id is not None else ''):>6}{r.n:>6}"
            f"{_fmt(r.srcc):>9}{_fmt(r.plcc):>9}"
            + "".join(f"{_fmt(acc.get(k)):>8}" for k in (*LEVELS, "total"))
            + f"{r.parse_failures:>6}"
        )
    return "\n".join(lines)


def evaluate_predictions(preds: PredictionSet, dataset: str = "", fold_id=None, config_fingerprint: str = "",
                         with_levels: bool = True) -> EvalReport:
    pred, gt = preds.scored()
    s = p = None
    if pred.size >= 2:
        try:
            s, p = srcc(pred, gt), plcc(pred, gt)
        except DegenerateInput:
            logger.warning("%s: correlations undefined (constant predictions or targets)", dataset)
    acc = None
    if with_levels and preds.pairs and all(gt.level is not None for _, _, gt in preds.pairs):
        acc = level_accuracy(preds)
    return EvalReport(s, p, acc, len(preds.pairs), preds.parse_failures, fold_id, config_fingerprint, dataset,
                      [vid for vid, _, _ in preds.pairs])


def mean_report(reports: Sequence[EvalReport], dataset: str = "") -> EvalReport:
    def avg(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    acc = None
    if any(r.accuracy for r in reports):
        keys = (*LEVELS, "total")
        acc = {k: avg([r.accuracy.get(k) for r in reports if r.accuracy]) for k in keys}
    return EvalReport(
        avg([r.srcc for r in reports]),
        avg([r.plcc for r in reports]),
        acc,
        sum(r.n for r in reports),
        sum(r.parse_failures for r in reports),
        "mean",
        reports[0].config_fingerprint if reports else "",
        dataset or (reports[0].dataset if reports else ""),
        [vid for r in reports for vid in r.video_ids],
    )


def kfold_split(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> list[DatasetManifest]:
    """Shuffle once by seed and cut into ``k`` folds whose sizes differ by at most one."""
    n = len(manifest)
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise TooFewSamples(f"cannot split {n} records into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    base, rem = divmod(n, k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < rem else 0)
        ids = [manifest.records[j].video_id for j in order[start : start + size]]
        folds.append(manifest.subset(ids, name=f"{manifest.name}-fold{i}"))
        start += size
    return folds


def _default_loader(frame_size):
    from .preprocess import load_video

    def load(record):
        return load_video(record.path, tuple(frame_size))

    return load


def _load_videos(manifest: DatasetManifest, loader) -> list:
    return [loader(r) for r in manifest]


def evaluate_manifest(estimator, manifest: DatasetManifest, loader, fold_id=None,
                      levels: Mapping[str, str] | None = None) -> EvalReport:
    """Run the fitted estimator on a manifest.

    Ground-truth levels default to the manifest's own tertiles.
    """
    videos = _load_videos(manifest, loader)
    preds = estimator.predict_quality(videos, manifest.video_ids)
    config = estimator.checkpoint_.config
    if levels is None:
        levels = bucket_levels(manifest) if len(manifest) >= 3 else {}
    failures = 0
    pairs = []
    for vid, pred in preds:
        if pred.score is None:
            failures += 1
        if config.multi_task and pred.level is None:
            failures += 1
        pairs.append((vid, pred, QualityLabel(manifest[vid].mos, levels.get(vid))))
    return evaluate_predictions(
        PredictionSet(pairs, failures), manifest.name, fold_id, config.fingerprint(),
        with_levels=config.multi_task and bool(levels),
    )


def run_protocol(protocol: str, config, manifests: Mapping[str, object], *, checkpoint=None, k: int = 5,
                 loader: Callable | None = None, seed: int | None = None,
                 on_checkpoint: Callable | None = None) -> list[EvalReport]:
    """Run one of the evaluation protocols.

    ``manifests`` maps ``"train"`` to a :class:`DatasetManifest` and
    ``"test"`` to a list of manifests.

    * ``in_sample`` trains once on ``train`` and evaluates each test set.
    * ``ood`` evaluates ``checkpoint`` (a :class:`Checkpoint` or directory)
      on each unseen test set.
    * ``finetune`` runs ``k``-fold cross-validation over ``train``, warm
      starting every fold from ``checkpoint`` when one is given, and
      appends the mean over folds.

    ``loader`` maps a manifest record to a video (frame sequence or encoded
    features); by default the record's path is decoded.
    """
    from .estimator import LMMVQARegressor
    from .training import Checkpoint, TrainConfig

    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if not isinstance(config, TrainConfig):
        config = TrainConfig.from_dict(config)
    config.validate()
    loader = loader or _default_loader(config.frame_size)
    seed = config.seed if seed is None else seed
    tests = manifests.get("test") or []
    if isinstance(tests, DatasetManifest):
        tests = [tests]

    if protocol == IN_SAMPLE:
        train_manifest = manifests.get("train")
        if train_manifest is None or not tests:
            raise ManifestMissing("in_sample needs a 'train' manifest and at least one 'test' manifest")
        est = LMMVQARegressor.from_config(config)
        est.fit(_load_videos(train_manifest, loader), train_manifest.mos, video_ids=train_manifest.video_ids)
        if on_checkpoint:
            on_checkpoint(est.checkpoint_)
        return [evaluate_manifest(est, m, loader) for m in tests]

    if protocol == OOD:
        if checkpoint is None:
            raise CheckpointMissing("ood evaluation needs a trained checkpoint")
        if not tests:
            raise ManifestMissing("ood needs at least one 'test' manifest")
        est = LMMVQARegressor.from_checkpoint(checkpoint)
        seen = set(est.checkpoint_.train_video_ids)
        for m in tests:
            overlap = seen & set(m.video_ids)
            if overlap:
                raise ConfigError(f"{m.name}: {len(overlap)} test videos were used for training")
        return [evaluate_manifest(est, m, loader) for m in tests]

    dataset = manifests.get("train")
    if dataset is None:
        raise ManifestMissing("finetune needs a 'train' manifest to cross-validate")
    if checkpoint is not None and not isinstance(checkpoint, Checkpoint):
        checkpoint_dir = checkpoint
        checkpoint = None
    else:
        checkpoint_dir = None
    folds = kfold_split(dataset, k, seed)
    dataset_levels = bucket_levels(dataset) if len(dataset) >= 3 else {}
    videos = dict(zip(dataset.video_ids, _load_videos(dataset, loader)))
    reports = []
    for i, held_out in enumerate(folds):
        train_ids = [vid for j, fold in enumerate(folds) if j != i for vid in fold.video_ids]
        if checkpoint_dir is not None:
            est = LMMVQARegressor.from_checkpoint(checkpoint_dir, warm_start=True)
            est.set_params(**{f.name: getattr(config, f.name) for f in fields(config)})
        elif checkpoint is not None:
            import copy

            est = LMMVQARegressor.from_checkpoint(copy.deepcopy(checkpoint), warm_start=True)
            est.set_params(**{f.name: getattr(config, f.name) for f in fields(config)})
        else:
            est = LMMVQARegressor.from_config(config)
        est.fit([videos[v] for v in train_ids], dataset.subset(train_ids).mos, video_ids=train_ids)
        reports.append(evaluate_manifest(est, held_out, lambda r: videos[r.video_id], fold_id=i,
                                         levels=dataset_levels))
    reports.append(mean_report(reports, dataset.name))
    return reports
