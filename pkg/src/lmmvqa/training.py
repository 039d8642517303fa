"""Instruction tuning of the projectors (and, at toy scale, the decoder)."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .decoder import Vocabulary
from .encoders import EncodedVideo, registry
from .exceptions import ConfigError, DivergenceError, MissingTask, UnknownBackend
from .model import VQAModel
from .projectors import TEMPORAL_TOKEN_TIERS
from .prompting import CLASSIFICATION, REGRESSION, DatasetManifest, QAInstruction

logger = logging.getLogger(__name__)

OPTIMIZER = "adam(beta1=0.0, beta2=0.999, eps=1e-8), constant lr, clip global norm"
CHECKPOINT_FILE = "checkpoint.json"
WEIGHTS_FILE = "model.pt"
VOCAB_FILE = "vocab.txt"
LOSS_FILE = "loss_curve.csv"


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 6
    multi_task: bool = True
    # None: freeze the decoder only when it is an external pretrained model
    train_projectors_only: bool | None = None
    seed: int = 0
    data_fraction: float = 1.0
    val_fraction: float = 0.1
    n_temporal_tokens: int = 64
    tau: int | None = None
    d_model: int = 64
    spatial_backend: str = "toy-spatial"
    temporal_backend: str = "toy-motion"
    spatial_projector: str = "vit"
    use_temporal: bool = True
    decoder: str = "toy"
    decoder_layers: int = 2
    decoder_heads: int = 4
    projector_heads: int = 4
    n_templates: int = 2000
    max_images: int = 256
    max_new_tokens: int = 24
    grad_clip: float = 1.0
    frame_size: tuple[int, int] = (224, 224)

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)

    def validate(self) -> "TrainConfig":
        checks = [
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.learning_rate >= 0 and math.isfinite(self.learning_rate), "learning_rate must be finite and >= 0"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (0 < self.data_fraction <= 1, "data_fraction must lie in (0, 1]"),
            (0 <= self.val_fraction < 1, "val_fraction must lie in [0, 1)"),
            (self.n_temporal_tokens >= 1, "n_temporal_tokens must be >= 1"),
            (self.tau is None or self.tau >= 1, "tau must be >= 1"),
            (self.d_model >= 1 and self.d_model % self.decoder_heads == 0, "d_model must be divisible by decoder_heads"),
            (self.spatial_projector in ("vit", "mlp"), "spatial_projector must be 'vit' or 'mlp'"),
            (self.decoder == "toy", "only the 'toy' decoder ships with this package"),
            (self.decoder_layers >= 1, "decoder_layers must be >= 1"),
            (self.n_templates >= 1, "n_templates must be >= 1"),
            (self.max_images >= 1, "max_images must be >= 1"),
            (self.max_new_tokens >= 1, "max_new_tokens must be >= 1"),
            (self.grad_clip > 0, "grad_clip must be positive"),
            (len(self.frame_size) == 2 and min(self.frame_size) >= 1, "frame_size must be (H, W)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.n_temporal_tokens not in TEMPORAL_TOKEN_TIERS:
            logger.debug("n_temporal_tokens=%d is outside the ablation tiers %s", self.n_temporal_tokens,
                         TEMPORAL_TOKEN_TIERS)
        return self

    @property
    def freeze_decoder(self) -> bool:
        if self.train_projectors_only is None:
            return self.decoder != "toy"
        return bool(self.train_projectors_only)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frame_size"] = list(self.frame_size)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**dict(d))

    def fingerprint(self) -> str:
        payload = json.dumps({"config": self.to_dict(), "optimizer": OPTIMIZER}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


def module_fingerprint(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def encoder_fingerprints(config: TrainConfig) -> dict[str, str]:
    out = {}
    for name in (config.spatial_backend, config.temporal_backend):
        try:
            out[name] = registry.resolve(name).fingerprint()
        except UnknownBackend:
            pass
    return out


@dataclass
class Checkpoint:
    model: VQAModel
    config: TrainConfig
    epoch: int = 0
    loss_curve: list[dict] = field(default_factory=list)
    frozen_fingerprints: dict[str, str] = field(default_factory=dict)
    train_video_ids: list[str] = field(default_factory=list)

    @property
    def config_fingerprint(self) -> str:
        return self.config.fingerprint()

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), directory / WEIGHTS_FILE)
        self.model.vocab.save(directory / VOCAB_FILE)
        meta = {
            "config": self.config.to_dict(),
            "config_fingerprint": self.config_fingerprint,
            "optimizer": OPTIMIZER,
            "architecture": self.model.architecture,
            "epoch": self.epoch,
            "frozen_fingerprints": self.frozen_fingerprints,
            "vocab_file": VOCAB_FILE,
            "vocab_fingerprint": self.model.vocab.fingerprint(),
            "train_video_ids": self.train_video_ids,
        }
        (directory / CHECKPOINT_FILE).write_text(json.dumps(meta, indent=2), encoding="utf-8")
        with open(directory / LOSS_FILE, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss"], lineterminator="\n")
            writer.writeheader()
            for row in self.loss_curve:
                writer.writerow({k: row.get(k, "") for k in writer.fieldnames})
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        meta = json.loads((directory / CHECKPOINT_FILE).read_text(encoding="utf-8"))
        config = TrainConfig.from_dict(meta["config"])
        vocab = Vocabulary.load(directory / meta.get("vocab_file", VOCAB_FILE))
        model = VQAModel(vocab, **meta["architecture"])
        model.load_state_dict(torch.load(directory / WEIGHTS_FILE, map_location="cpu", weights_only=True))
        frozen = meta.get("frozen_fingerprints", {})
        current = encoder_fingerprints(config)
        for name, fp in frozen.items():
            if name in current and current[name] != fp:
                raise ConfigError(f"encoder {name!r} differs from the one this checkpoint was trained with")
        if "decoder" in frozen and module_fingerprint(model.decoder) != frozen["decoder"]:
            raise ConfigError("frozen decoder weights do not match their recorded fingerprint")
        curve = []
        loss_path = directory / LOSS_FILE
        if loss_path.exists():
            with open(loss_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    curve.append({
                        "epoch": int(row["epoch"]),
                        "train_loss": float(row["train_loss"]),
                        "val_loss": float(row["val_loss"]) if row["val_loss"] else None,
                    })
        return cls(model, config, meta.get("epoch", 0), curve, frozen, meta.get("train_video_ids", []))


class TaskStream:
    """Per-epoch, seed-determined ordering of the training prompts."""

    def __init__(self, prompts: Sequence[QAInstruction], seed: int):
        self.prompts = list(prompts)
        self.seed = seed

    def __len__(self):
        return len(self.prompts)

    def epoch(self, index: int) -> list[QAInstruction]:
        order = np.random.default_rng([self.seed, index]).permutation(len(self.prompts))
        return [self.prompts[i] for i in order]


def mix_tasks(prompts: Sequence[QAInstruction], multi_task: bool, seed: int) -> TaskStream:
    """Regression prompts only, or both tasks interleaved 1:1 as built."""
    tasks = {p.task for p in prompts}
    if multi_task:
        missing = {REGRESSION, CLASSIFICATION} - tasks
        if missing:
            raise MissingTask(f"multi-task training needs {sorted(missing)} prompts")
        return TaskStream(prompts, seed)
    if REGRESSION not in tasks:
        raise MissingTask("no regression prompts to train on")
    return TaskStream([p for p in prompts if p.task == REGRESSION], seed)


def subsample(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """``ceil(fraction * n)`` records drawn without replacement, original order kept."""
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    n = len(manifest)
    keep = min(n, math.ceil(fraction * n - 1e-9))
    if keep == n:
        return manifest
    chosen = np.sort(np.random.default_rng(seed).choice(n, size=keep, replace=False))
    return manifest.subset([manifest.records[i].video_id for i in chosen])


def validation_split(video_ids: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Hold out ``floor(fraction * n)`` videos, chosen by seed."""
    ids = list(video_ids)
    n_val = int(math.floor(fraction * len(ids) + 1e-9))
    if n_val == 0:
        return ids, []
    held = set(np.random.default_rng([seed, 1]).choice(len(ids), size=n_val, replace=False).tolist())
    return [v for i, v in enumerate(ids) if i not in held], [v for i, v in enumerate(ids) if i in held]


def build_model(config: TrainConfig, features: Mapping[str, EncodedVideo], vocab: Vocabulary | None = None) -> VQAModel:
    sample = next(iter(features.values()))
    torch.manual_seed(config.seed)
    return VQAModel(
        vocab or Vocabulary.build(config.max_images),
        spatial_width=sample.spatial.width,
        temporal_width=sample.temporal.width,
        d_model=config.d_model,
        n_temporal_tokens=config.n_temporal_tokens,
        spatial_projector=config.spatial_projector,
        use_temporal=config.use_temporal,
        decoder_layers=config.decoder_layers,
        decoder_heads=config.decoder_heads,
        projector_heads=config.projector_heads,
    )


def _mean_loss(model, batches, features, qcache, tcache) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in batches:
            loss = model.loss([features[p.video_id] for p in batch], [qcache[p.question] for p in batch],
                              [tcache[p.answer] for p in batch])
            total += loss.item() * len(batch)
            count += len(batch)
    return total / max(count, 1)


def train(config: TrainConfig, prompts: Sequence[QAInstruction], features: Mapping[str, EncodedVideo],
          model: VQAModel | None = None) -> tuple[Checkpoint, list[dict]]:
    """Optimise the permitted parameters on the prompt dataset.

    ``model`` warm-starts from existing weights (fine-tuning); otherwise a
    fresh model is built from ``config.seed``.  Returns the checkpoint and
    the per-epoch ``{epoch, train_loss, val_loss}`` curve.
    """
    config.validate()
    if not prompts:
        raise ConfigError("prompt dataset is empty")
    missing = sorted({p.video_id for p in prompts} - set(features))
    if missing:
        raise ConfigError(f"no encoded features for videos {missing[:5]}")
    if model is None:
        model = build_model(config, features)
    torch.manual_seed(config.seed)

    video_ids = list(dict.fromkeys(p.video_id for p in prompts))
    train_ids, val_ids = validation_split(video_ids, config.val_fraction, config.seed)
    train_set, val_set = set(train_ids), set(val_ids)
    stream = mix_tasks([p for p in prompts if p.video_id in train_set], config.multi_task, config.seed)
    val_prompts = mix_tasks([p for p in prompts if p.video_id in val_set], config.multi_task, config.seed).prompts \
        if val_ids else []

    if len(stream) == 0:
        raise ConfigError("no training prompts left after the validation split")
    qcache = {p.question: model.question_ids(p.question, strict=True) for p in prompts}
    tcache = {p.answer: model.target_ids(p.answer) for p in prompts}

    for param in model.parameters():
        param.requires_grad_(True)
    frozen: dict[str, str] = dict(encoder_fingerprints(config))
    if config.freeze_decoder:
        model.decoder.requires_grad_(False)
        frozen["decoder"] = module_fingerprint(model.decoder)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=config.learning_rate, betas=(0.0, 0.999), eps=1e-8)

    bs = config.batch_size
    val_batches = [val_prompts[i : i + bs] for i in range(0, len(val_prompts), bs)]
    curve: list[dict] = []
    model.train()
    for epoch in range(config.epochs):
        order = stream.epoch(epoch)
        total = 0.0
        for start in range(0, len(order), bs):
            batch = order[start : start + bs]
            loss = model.loss([features[p.video_id] for p in batch], [qcache[p.question] for p in batch],
                              [tcache[p.answer] for p in batch])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
            optimizer.step()
            total += loss.item() * len(batch)
        row = {"epoch": epoch + 1, "train_loss": total / len(order), "val_loss": None}
        if val_batches:
            row["val_loss"] = _mean_loss(model, val_batches, features, qcache, tcache)
        curve.append(row)
        logger.info("epoch %d train_loss %.4f val_loss %s", row["epoch"], row["train_loss"], row["val_loss"])
    model.eval()

    if "decoder" in frozen and module_fingerprint(model.decoder) != frozen["decoder"]:
        raise RuntimeError("frozen decoder weights changed during training")
    for name, fp in encoder_fingerprints(config).items():
        if frozen.get(name) != fp:
            raise RuntimeError(f"encoder {name!r} changed during training")
    ckpt = Checkpoint(model, config, config.epochs, curve, frozen, video_ids)
    return ckpt, curve
