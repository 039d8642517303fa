"""Command-line entry point: ``lmmvqa {preprocess,build-prompts,train,evaluate,predict}``.

Settings come from a flat YAML (or JSON) run config, then the
``LMMVQA_CACHE_DIR`` environment variable, then command-line flags, with
later sources winning.  Every command prints one JSON status object on
stdout and logs to stderr.  Exit codes: 0 success, 1 internal error,
2 user or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml
from filelock import FileLock, Timeout

from .encoders import (
    EncodedVideo,
    SpatialFeatures,
    TemporalFeatures,
    encode_spatial,
    encode_temporal,
    read_features,
    resolve_backend,
    write_features,
)
from .evaluation import (
    FINETUNE,
    IN_SAMPLE,
    OOD,
    PROTOCOLS,
    evaluate_manifest,
    format_table,
    kfold_split,
    run_protocol,
)
from .exceptions import CheckpointMissing, ConfigError, LMMVQAError, ManifestMissing, MissingCache
from .preprocess import CHUNK_INDEX, load_video, preprocess_video, read_cache_index, write_cache
from .prompting import DatasetManifest, build_dataset, export_prompts, generate_templates, import_prompts, read_manifest
from .training import Checkpoint, TrainConfig, train

log = logging.getLogger("lmmvqa")

CACHE_ENV = "LMMVQA_CACHE_DIR"
LOCK_NAME = ".lmmvqa.lock"
SPATIAL_FILE = "spatial.f32"
TEMPORAL_FILE = "temporal.f32"
FEATURE_INDEX = "features.json"

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2


@dataclasses.dataclass
class RunConfig:
    """Training settings plus every path a command reads or writes."""

    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    train_manifest: str | None = None
    test_manifests: list[str] = dataclasses.field(default_factory=list)
    cache_dir: str = "cache"
    checkpoint_dir: str = "checkpoint"
    report_dir: str = "reports"
    prompts_path: str = "prompts.jsonl"
    protocol: str = IN_SAMPLE
    k_folds: int = 5
    lock_timeout: float = 10.0

    PATH_KEYS = ("train_manifest", "test_manifests", "cache_dir", "checkpoint_dir", "report_dir",
                 "prompts_path", "protocol", "k_folds", "lock_timeout")

    @classmethod
    def keys(cls) -> dict[str, Any]:
        """Every accepted key mapped to its default."""
        out = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
        base = cls()
        out.update({k: getattr(base, k) for k in cls.PATH_KEYS})
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        train_names = {f.name for f in dataclasses.fields(TrainConfig)}
        train_values = {k: v for k, v in values.items() if k in train_names}
        if "frame_size" in train_values:
            train_values["frame_size"] = tuple(train_values["frame_size"])
        rest = {k: v for k, v in values.items() if k not in train_names}
        if isinstance(rest.get("test_manifests"), str):
            rest["test_manifests"] = [rest["test_manifests"]]
        config = cls(train=TrainConfig(**train_values), **rest)
        return config.validate()

    def validate(self) -> "RunConfig":
        self.train.validate()
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not isinstance(self.k_folds, int) or self.k_folds < 2:
            raise ConfigError("k_folds must be an integer >= 2")
        if not isinstance(self.test_manifests, list):
            raise ConfigError("test_manifests must be a list of paths")
        return self

    def to_dict(self) -> dict:
        out = self.train.to_dict()
        out.update({k: getattr(self, k) for k in self.PATH_KEYS})
        return out


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_optional(kind: Callable) -> Callable:
    def parse(text: str):
        return None if text.strip().lower() in ("none", "null", "") else kind(text)

    return parse


def _flag_type(name: str, default):
    if name in ("train_projectors_only", "tau", "train_manifest"):
        return _parse_optional({"train_projectors_only": _parse_bool, "tau": int}.get(name, str))
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config keys (override the config file)")
    for name, default in RunConfig.keys().items():
        flag = "--" + name.replace("_", "-")
        shown = list(default) if isinstance(default, tuple) else default
        help_text = f"default: {json.dumps(shown)}"
        if name in ("frame_size",):
            group.add_argument(flag, dest=name, type=int, nargs=2, metavar=("H", "W"),
                               default=argparse.SUPPRESS, help=help_text)
        elif name == "test_manifests":
            group.add_argument(flag, dest=name, nargs="+", default=argparse.SUPPRESS, help=help_text)
        else:
            group.add_argument(flag, dest=name, type=_flag_type(name, default), default=argparse.SUPPRESS,
                               help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmmvqa",
        description="Video quality assessment with an instruction-tuned multimodal decoder.",
    )
    parser.add_argument("--log-level", default="INFO", help="stderr log level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "preprocess": "decode manifest videos and cache key frames, chunk indices and encoder features",
        "build-prompts": "write the question/answer JSON-lines file from the manifest and cache",
        "train": "train a checkpoint from the prompt file and cached features",
        "evaluate": "evaluate a checkpoint and write JSON reports and a table",
        "predict": "score a single video with a checkpoint",
    }
    for name, help_text in commands.items():
        cmd = sub.add_parser(name, help=help_text, description=help_text)
        cmd.add_argument("-c", "--config", help="YAML or JSON run config file")
        if name == "predict":
            cmd.add_argument("video", help="video file, or a cache entry directory written by preprocess")
            cmd.add_argument("--video-id", help="id used for prompt selection (default: file stem or cache entry name)")
        _add_config_flags(cmd)
    return parser


def load_run_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    values: dict[str, Any] = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping of config keys")
        values.update(loaded)
    if environ.get(CACHE_ENV):
        values["cache_dir"] = environ[CACHE_ENV]
    flag_names = RunConfig.keys()
    values.update({k: v for k, v in vars(args).items() if k in flag_names})
    try:
        return RunConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


class _DirLock:
    """Advisory lock on a directory the command writes into."""

    def __init__(self, directory: Path, timeout: float):
        directory.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(directory / LOCK_NAME), timeout=timeout)
        self.directory = directory

    def __enter__(self):
        try:
            self.lock.acquire()
        except Timeout as exc:
            raise ConfigError(f"{self.directory} is locked by another lmmvqa command") from exc
        return self

    def __exit__(self, *exc):
        self.lock.release()


def _require_manifest(path: str | None, what: str) -> DatasetManifest:
    if not path:
        raise ManifestMissing(f"no {what} manifest configured")
    if not Path(path).is_file():
        raise ManifestMissing(f"{what} manifest {path} does not exist")
    return read_manifest(path)


def _entry_dir(config: RunConfig, video_id: str) -> Path:
    return Path(config.cache_dir) / video_id


def _feature_meta(config: RunConfig) -> dict:
    t = config.train
    return {
        "spatial_backend": t.spatial_backend,
        "temporal_backend": t.temporal_backend,
        "tau": t.tau,
        "frame_size": list(t.frame_size),
    }


def _entry_complete(entry: Path, meta: dict) -> bool:
    files = [entry / CHUNK_INDEX, entry / SPATIAL_FILE, entry / TEMPORAL_FILE, entry / FEATURE_INDEX]
    if not all(f.is_file() for f in files):
        return False
    try:
        return json.loads((entry / FEATURE_INDEX).read_text(encoding="utf-8")) == meta
    except ValueError:
        return False


def cache_video(config: RunConfig, video_id: str, path) -> Path:
    """Decode, chunk and encode one video into its cache entry."""
    t = config.train
    entry = _entry_dir(config, video_id)
    video = load_video(path, tuple(t.frame_size))
    chunks, keys = preprocess_video(video, t.tau)
    spatial = encode_spatial(keys, t.spatial_backend)
    temporal = encode_temporal(chunks, t.temporal_backend)
    write_cache(entry, video, chunks, keys)
    write_features(entry / SPATIAL_FILE, spatial.data)
    write_features(entry / TEMPORAL_FILE, temporal.data)
    tmp = entry / (FEATURE_INDEX + ".tmp")
    tmp.write_text(json.dumps(_feature_meta(config), indent=2), encoding="utf-8")
    os.replace(tmp, entry / FEATURE_INDEX)
    return entry


def load_cached_features(entry: Path, video_id: str | None = None, patch_size: int | None = None) -> EncodedVideo:
    entry = Path(entry)
    if not (entry / SPATIAL_FILE).is_file() or not (entry / TEMPORAL_FILE).is_file():
        raise MissingCache(f"no cached features under {entry}")
    meta = json.loads((entry / FEATURE_INDEX).read_text(encoding="utf-8"))
    if patch_size is None:
        patch_size = resolve_backend(meta["spatial_backend"]).patch_size
    return EncodedVideo(
        video_id or entry.name,
        SpatialFeatures(read_features(entry / SPATIAL_FILE), patch_size),
        TemporalFeatures(read_features(entry / TEMPORAL_FILE)),
    )


def _cached_features(config: RunConfig, manifest: DatasetManifest) -> dict[str, EncodedVideo]:
    meta = _feature_meta(config)
    missing = [vid for vid in manifest.video_ids if not _entry_complete(_entry_dir(config, vid), meta)]
    if missing:
        raise MissingCache(
            f"{len(missing)} videos have no cache entry matching the current backends "
            f"(first: {missing[0]}); run 'lmmvqa preprocess'"
        )
    patch = resolve_backend(config.train.spatial_backend).patch_size
    return {vid: load_cached_features(_entry_dir(config, vid), vid, patch) for vid in manifest.video_ids}


def cmd_preprocess(config: RunConfig) -> tuple[dict, int]:
    manifests = [_require_manifest(p, "input") for p in [config.train_manifest, *config.test_manifests] if p]
    if not manifests:
        raise ManifestMissing("set train_manifest or test_manifests")
    meta = _feature_meta(config)
    created, skipped, failed = [], [], {}
    with _DirLock(Path(config.cache_dir), config.lock_timeout):
        for manifest in manifests:
            for record in manifest:
                entry = _entry_dir(config, record.video_id)
                if record.video_id in created or record.video_id in skipped:
                    continue
                if _entry_complete(entry, meta):
                    skipped.append(record.video_id)
                    continue
                try:
                    cache_video(config, record.video_id, record.path)
                except Exception as exc:  # keep going; the failure is reported below
                    log.error("preprocess failed for %s: %s", record.video_id, exc)
                    failed[record.video_id] = f"{type(exc).__name__}: {exc}"
                    continue
                created.append(record.video_id)
                log.info("cached %s", record.video_id)
    status = {
        "status": "error" if failed else "ok",
        "command": "preprocess",
        "cache_dir": str(config.cache_dir),
        "created": created,
        "skipped": skipped,
        "failed": failed,
        "outputs": [str(_entry_dir(config, v)) for v in created + skipped],
    }
    return status, EXIT_USER if failed else EXIT_OK


def cmd_build_prompts(config: RunConfig) -> tuple[dict, int]:
    manifest = _require_manifest(config.train_manifest, "train")
    missing = [vid for vid in manifest.video_ids if not (_entry_dir(config, vid) / CHUNK_INDEX).is_file()]
    if missing:
        raise MissingCache(f"{len(missing)} videos are not preprocessed (first: {missing[0]})")
    n_chunks = {vid: read_cache_index(_entry_dir(config, vid))["K"] for vid in manifest.video_ids}
    t = config.train
    templates = generate_templates(t.n_templates, t.seed)
    prompts = build_dataset(manifest, templates, n_chunks, t.seed)
    out = Path(config.prompts_path)
    with _DirLock(out.parent if str(out.parent) else Path("."), config.lock_timeout):
        export_prompts(prompts, out)
    return {"status": "ok", "command": "build-prompts", "count": len(prompts), "outputs": [str(out)]}, EXIT_OK


def cmd_train(config: RunConfig) -> tuple[dict, int]:
    manifest = _require_manifest(config.train_manifest, "train")
    prompts_path = Path(config.prompts_path)
    if not prompts_path.is_file():
        raise MissingCache(f"prompt file {prompts_path} does not exist; run 'lmmvqa build-prompts'")
    prompts = import_prompts(prompts_path)
    unknown = sorted({p.video_id for p in prompts} - set(manifest.video_ids))
    if unknown:
        raise ConfigError(f"prompt file mentions videos absent from the manifest (first: {unknown[0]})")
    features = _cached_features(config, manifest.subset({p.video_id for p in prompts}))
    out = Path(config.checkpoint_dir)
    with _DirLock(out, config.lock_timeout):
        checkpoint, curve = train(config.train, prompts, features)
        checkpoint.save(out)
    status = {
        "status": "ok",
        "command": "train",
        "epochs": config.train.epochs,
        "final_train_loss": curve[-1]["train_loss"] if curve else None,
        "config_fingerprint": checkpoint.config_fingerprint,
        "outputs": [str(out)],
    }
    return status, EXIT_OK


def _load_checkpoint(config: RunConfig) -> Checkpoint:
    path = Path(config.checkpoint_dir)
    if not (path / "checkpoint.json").is_file():
        raise CheckpointMissing(f"no checkpoint found in {path}")
    return Checkpoint.load(path)


def _manifest_loader(config: RunConfig) -> Callable:
    """Load cached features when the entry exists, otherwise decode the video."""
    meta = _feature_meta(config)
    patch = resolve_backend(config.train.spatial_backend).patch_size

    def load(record):
        entry = _entry_dir(config, record.video_id)
        if _entry_complete(entry, meta):
            return load_cached_features(entry, record.video_id, patch)
        return load_video(record.path, tuple(config.train.frame_size))

    return load


def cmd_evaluate(config: RunConfig) -> tuple[dict, int]:
    from .estimator import LMMVQARegressor

    checkpoint = _load_checkpoint(config)
    loader = _manifest_loader(config)
    tests = [_require_manifest(p, "test") for p in config.test_manifests]
    for path, manifest in zip(config.test_manifests, tests):
        manifest.name = manifest.name or Path(path).stem
    folds = None
    if config.protocol == FINETUNE:
        dataset = _require_manifest(config.train_manifest, "train")
        dataset.name = dataset.name or Path(config.train_manifest).stem
        reports = run_protocol(FINETUNE, config.train, {"train": dataset}, checkpoint=checkpoint,
                               k=config.k_folds, loader=loader)
        folds = [fold.video_ids for fold in kfold_split(dataset, config.k_folds, config.train.seed)]
    elif config.protocol == OOD:
        reports = run_protocol(OOD, checkpoint.config, {"test": tests}, checkpoint=checkpoint, loader=loader)
    else:
        if not tests:
            raise ManifestMissing("set test_manifests to evaluate a checkpoint")
        est = LMMVQARegressor.from_checkpoint(checkpoint)
        reports = [evaluate_manifest(est, m, loader) for m in tests]

    out = Path(config.report_dir)
    outputs = []
    with _DirLock(out, config.lock_timeout):
        report_path = out / "reports.json"
        report_path.write_text(json.dumps([r.to_dict() for r in reports], indent=2), encoding="utf-8")
        table_path = out / "reports.txt"
        table_path.write_text(format_table(reports) + "\n", encoding="utf-8")
        outputs += [str(report_path), str(table_path)]
        if folds is not None:
            fold_path = out / "folds.json"
            fold_path.write_text(json.dumps({str(i): ids for i, ids in enumerate(folds)}, indent=2), encoding="utf-8")
            outputs.append(str(fold_path))
    log.info("\n%s", format_table(reports))
    status = {
        "status": "ok",
        "command": "evaluate",
        "protocol": config.protocol,
        "reports": [r.to_dict() for r in reports],
        "outputs": outputs,
    }
    return status, EXIT_OK


def cmd_predict(config: RunConfig, video: str, video_id: str | None = None) -> tuple[dict, int]:
    from .estimator import LMMVQARegressor

    checkpoint = _load_checkpoint(config)
    path = Path(video)
    if path.is_dir():
        if not (path / CHUNK_INDEX).is_file():
            raise MissingCache(f"{path} is not a cache entry")
        vid = video_id or path.name
        item = load_cached_features(path, vid)
    elif path.is_file():
        vid = video_id or path.stem
        item = load_video(path, tuple(checkpoint.config.frame_size))
    else:
        raise ConfigError(f"{path} does not exist")
    est = LMMVQARegressor.from_checkpoint(checkpoint)
    ((_, pred),) = est.predict_quality([item], [vid])
    status = {
        "status": "ok",
        "command": "predict",
        "video_id": vid,
        "prediction": {"score": pred.score, "level": pred.level, "raw_text": pred.raw_text},
        "outputs": [],
    }
    return status, EXIT_OK


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_run_config(args)
        if args.command == "preprocess":
            status, code = cmd_preprocess(config)
        elif args.command == "build-prompts":
            status, code = cmd_build_prompts(config)
        elif args.command == "train":
            status, code = cmd_train(config)
        elif args.command == "evaluate":
            status, code = cmd_evaluate(config)
        else:
            status, code = cmd_predict(config, args.video, args.video_id)
    except (LMMVQAError, FileNotFoundError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        status = {"status": "error", "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        code = EXIT_USER
    except Exception as exc:
        log.error("internal error\n%s", traceback.format_exc())
        status = {"status": "error", "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        code = EXIT_INTERNAL
    print(json.dumps(status, default=_json_default, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
