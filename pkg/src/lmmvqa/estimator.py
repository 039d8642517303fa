"""scikit-learn style front end: ``fit(videos, mos)`` / ``predict(videos)``."""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_consistent_length, column_or_1d

from .decoder import QualityPrediction, parse_answer
from .encoders import EncodedVideo, VideoFeatureExtractor
from .evaluation import srcc
from .exceptions import ParseError
from .prompting import (
    CLASSIFICATION,
    REGRESSION,
    DatasetManifest,
    ManifestRecord,
    build_dataset,
    bucket_levels,
    generate_templates,
    render_question,
    select_templates,
)
from .training import Checkpoint, TrainConfig, subsample, train


def check_videos(X, video_ids=None) -> tuple[list, list[str]]:
    """Validate a batch of videos and settle on one id per video.

    Ids come from ``video_ids`` when given, else from the encoded record or
    the frame sequence's ``source_id``, else ``video-<index>``.
    """
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError("X must be a sequence of videos (paths, FrameSequence or EncodedVideo)")
    X = list(X)
    if not X:
        raise ValueError("X is empty")
    if video_ids is None:
        video_ids = []
        for i, v in enumerate(X):
            vid = getattr(v, "video_id", None) or getattr(v, "source_id", None)
            video_ids.append(str(vid) if vid else f"video-{i}")
        if len(set(video_ids)) != len(video_ids):
            video_ids = [f"video-{i}" for i in range(len(X))]
    else:
        video_ids = [str(v) for v in video_ids]
        check_consistent_length(X, video_ids)
        if len(set(video_ids)) != len(video_ids):
            raise ValueError("video_ids must be unique")
    return X, video_ids


def check_scores(y, n: int) -> np.ndarray:
    y = column_or_1d(np.asarray(y, dtype=float), warn=True)
    if len(y) != n:
        raise ValueError(f"got {len(y)} scores for {n} videos")
    if not np.all(np.isfinite(y)):
        raise ValueError("scores must be finite")
    return y


class LMMVQARegressor(RegressorMixin, BaseEstimator):
    """Video quality assessor that answers quality questions with a decoder.

    ``fit`` encodes the videos with frozen backends, builds two instruction
    prompts per video (score and tertile level) and tunes the projectors
    (plus the toy decoder unless ``train_projectors_only``).  ``predict``
    asks the score question and parses the generated sentence; videos
    whose answer cannot be parsed get ``nan``.

    All constructor arguments mirror :class:`~lmmvqa.training.TrainConfig`,
    except ``warm_start``: when true, a refit continues from the current
    weights instead of re-initialising.
    """

    def __init__(self, *, batch_size=32, learning_rate=1e-3, epochs=6, multi_task=True,
                 train_projectors_only=None, seed=0, data_fraction=1.0, val_fraction=0.1,
                 n_temporal_tokens=64, tau=None, d_model=64, spatial_backend="toy-spatial",
                 temporal_backend="toy-motion", spatial_projector="vit", use_temporal=True, decoder="toy",
                 decoder_layers=2, decoder_heads=4, projector_heads=4, n_templates=2000, max_images=256,
                 max_new_tokens=24, grad_clip=1.0, frame_size=(224, 224), warm_start=False):
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.multi_task = multi_task
        self.train_projectors_only = train_projectors_only
        self.seed = seed
        self.data_fraction = data_fraction
        self.val_fraction = val_fraction
        self.n_temporal_tokens = n_temporal_tokens
        self.tau = tau
        self.d_model = d_model
        self.spatial_backend = spatial_backend
        self.temporal_backend = temporal_backend
        self.spatial_projector = spatial_projector
        self.use_temporal = use_temporal
        self.decoder = decoder
        self.decoder_layers = decoder_layers
        self.decoder_heads = decoder_heads
        self.projector_heads = projector_heads
        self.n_templates = n_templates
        self.max_images = max_images
        self.max_new_tokens = max_new_tokens
        self.grad_clip = grad_clip
        self.frame_size = frame_size
        self.warm_start = warm_start

    @classmethod
    def from_config(cls, config: TrainConfig, **kwargs) -> "LMMVQARegressor":
        return cls(**{f.name: getattr(config, f.name) for f in dataclasses.fields(config)}, **kwargs)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint | str, **kwargs) -> "LMMVQARegressor":
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = Checkpoint.load(checkpoint)
        est = cls.from_config(checkpoint.config, **kwargs)
        est._set_fitted(checkpoint)
        return est

    def to_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names}).validate()

    def _extractor(self) -> VideoFeatureExtractor:
        return VideoFeatureExtractor(self.spatial_backend, self.temporal_backend, self.tau, tuple(self.frame_size))

    def encode(self, X, video_ids=None) -> list[EncodedVideo]:
        """Encode videos, tagging each with its resolved id."""
        X, ids = check_videos(X, video_ids)
        encoded = self._extractor().transform(X)
        return [e if e.video_id == vid else dataclasses.replace(e, video_id=vid) for e, vid in zip(encoded, ids)]

    def _set_fitted(self, checkpoint: Checkpoint):
        self.checkpoint_ = checkpoint
        self.model_ = checkpoint.model
        self.loss_curve_ = checkpoint.loss_curve
        self.templates_ = generate_templates(checkpoint.config.n_templates, checkpoint.config.seed)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def fit(self, X, y, video_ids=None):
        config = self.to_config()
        encoded = self.encode(X, video_ids)
        y = check_scores(y, len(encoded))
        manifest = DatasetManifest(
            [ManifestRecord(e.video_id, "", float(s)) for e, s in zip(encoded, y)], name="fit"
        )
        manifest = subsample(manifest, config.data_fraction, config.seed)
        features = {e.video_id: e for e in encoded if e.video_id in set(manifest.video_ids)}
        levels = bucket_levels(manifest) if len(manifest) >= 3 or config.multi_task else {
            vid: "fair" for vid in manifest.video_ids
        }
        templates = generate_templates(config.n_templates, config.seed)
        prompts = build_dataset(manifest, templates, {k: v.n_chunks for k, v in features.items()}, config.seed, levels)
        init = self.model_ if self.warm_start and hasattr(self, "model_") else None
        checkpoint, _ = train(config, prompts, features, model=init)
        self._set_fitted(checkpoint)
        self.prompts_ = prompts
        self.levels_ = levels
        return self

    def question(self, video_id: str, task: str, n_chunks: int) -> str:
        self._check_fitted()
        template = select_templates(video_id, self.templates_, self.checkpoint_.config.seed)[task]
        return render_question(template, task, n_chunks)

    def generate_answers(self, X, task: str = REGRESSION, video_ids=None) -> list[tuple[str, str]]:
        """``(video_id, generated text)`` for each video."""
        self._check_fitted()
        out = []
        for video in self.encode(X, video_ids):
            q = self.question(video.video_id, task, video.n_chunks)
            gen = self.model_.answer(video, q, self.checkpoint_.config.max_new_tokens)
            out.append((video.video_id, gen.text))
        return out

    def predict_quality(self, X, video_ids=None, tasks: Sequence[str] | None = None) -> list[tuple[str, QualityPrediction]]:
        """Score and (if trained multi-task) level per video; failed parses leave fields ``None``."""
        self._check_fitted()
        if tasks is None:
            tasks = (REGRESSION, CLASSIFICATION) if self.checkpoint_.config.multi_task else (REGRESSION,)
        encoded = self.encode(X, video_ids)
        results = {e.video_id: QualityPrediction() for e in encoded}
        texts = {e.video_id: [] for e in encoded}
        for task in tasks:
            for vid, text in self.generate_answers(encoded, task):
                texts[vid].append(text)
                try:
                    parsed = parse_answer(text, task)
                except ParseError:
                    continue
                if task == REGRESSION:
                    results[vid].score = parsed.score
                else:
                    results[vid].level = parsed.level
        for vid, pred in results.items():
            pred.raw_text = " | ".join(texts[vid])
        return list(results.items())

    def predict(self, X, video_ids=None) -> np.ndarray:
        preds = self.predict_quality(X, video_ids, tasks=(REGRESSION,))
        return np.array([np.nan if p.score is None else p.score for _, p in preds], dtype=float)

    def predict_level(self, X, video_ids=None) -> np.ndarray:
        preds = self.predict_quality(X, video_ids, tasks=(CLASSIFICATION,))
        return np.array([p.level for _, p in preds], dtype=object)

    def score(self, X, y, sample_weight=None) -> float:
        """Spearman rank correlation between predicted and true scores (unparsed answers dropped)."""
        pred = self.predict(X)
        y = check_scores(y, len(pred))
        ok = ~np.isnan(pred)
        return srcc(pred[ok], y[ok])

    def save(self, directory):
        self._check_fitted()
        return self.checkpoint_.save(directory)
