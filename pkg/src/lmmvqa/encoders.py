"""Frozen spatial / temporal feature extractors behind a name registry.

Two toy backends are always registered so the pipeline runs without
pretrained weights:

``toy-spatial``
    Per-patch descriptor (2x2 pooled colour, luminance contrast, log
    gradient and Laplacian energy) lifted to ``output_width`` by a fixed
    random orthogonal matrix.
``toy-motion``
    Per-chunk statistics of inter-frame luminance differences, lifted the
    same way.

Pretrained encoders plug in through TorchScript adapters whose weights
live in an external directory.
"""
from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import BackendError, DuplicateBackend, ShapeError, UnknownBackend
from .preprocess import ChunkSet, KeyFrameSet, as_frame_sequence, preprocess_video

SPATIAL = "spatial"
TEMPORAL = "temporal"

_LUMA = np.array([0.299, 0.587, 0.114])
_BUILD_SEED = 20240607


@dataclass(frozen=True)
class SpatialFeatures:
    """``data`` has shape ``(K, N_p, C_sp)``."""

    data: np.ndarray
    patch_size: int

    @property
    def n_patches(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class TemporalFeatures:
    """``data`` has shape ``(K, 1, C_tp)``."""

    data: np.ndarray

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class EncodedVideo:
    video_id: str
    spatial: SpatialFeatures
    temporal: TemporalFeatures

    @property
    def n_chunks(self) -> int:
        return self.spatial.data.shape[0]


def _orthogonal(n_in: int, n_out: int, seed: int) -> np.ndarray:
    """``(n_in, n_out)`` matrix with orthonormal rows or columns, whichever fits."""
    rng = np.random.default_rng(seed)
    if n_out >= n_in:
        q, _ = np.linalg.qr(rng.standard_normal((n_out, n_in)))
        return q.T.copy()
    q, _ = np.linalg.qr(rng.standard_normal((n_in, n_out)))
    return q


def _log_energy(x: np.ndarray) -> np.ndarray:
    return 0.25 * np.log(1e-4 + x)


class EncoderBackend:
    """Base class: subclasses set the attributes and implement :meth:`encode`.

    ``encode`` receives a stacked uint8 array -- ``(K, H, W, 3)`` key frames
    for spatial backends, ``(K, tau, H, W, 3)`` chunks for temporal ones --
    and returns ``(K, N_p, C_sp)`` or ``(K, C_tp)`` floats.
    """

    name: str = ""
    kind: str = ""
    output_width: int = 0
    deterministic: bool = True
    patch_size: int | None = None

    def encode(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> dict[str, np.ndarray]:
        return {}

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.name}:{self.kind}:{self.output_width}".encode())
        for key, value in sorted(self.parameters().items()):
            h.update(key.encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, kind={self.kind!r}, output_width={self.output_width})"


class ToyPatchEncoder(EncoderBackend):
    kind = SPATIAL
    descriptor_size = 16

    def __init__(self, name: str = "toy-spatial", patch_size: int = 14, output_width: int = 32):
        if patch_size < 1 or output_width < 1:
            raise ValueError("patch_size and output_width must be positive")
        self.name = name
        self.patch_size = patch_size
        self.output_width = output_width
        self._projection = _orthogonal(self.descriptor_size, output_width, _BUILD_SEED)
        self._projection.setflags(write=False)

    def parameters(self):
        return {"projection": self._projection}

    def describe(self, frames: np.ndarray) -> np.ndarray:
        """Raw ``(K, N_p, 16)`` patch descriptors before the orthogonal lift."""
        p = self.patch_size
        k, h, w, _ = frames.shape
        x = frames.astype(np.float64) / 255.0
        patches = x.reshape(k, h // p, p, w // p, p, 3).transpose(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(k, (h // p) * (w // p), p, p, 3)
        if p > 1:
            half = p // 2
            pooled = [
                patches[:, :, rows, cols].mean(axis=(2, 3))
                for rows in (slice(0, half), slice(half, None))
                for cols in (slice(0, half), slice(half, None))
            ]
        else:
            pooled = [patches[:, :, 0, 0]] * 4
        luma = patches @ _LUMA
        dx = np.abs(np.diff(luma, axis=3)).mean(axis=(2, 3)) if p > 1 else np.zeros(luma.shape[:2])
        dy = np.abs(np.diff(luma, axis=2)).mean(axis=(2, 3)) if p > 1 else np.zeros(luma.shape[:2])
        if p > 2:
            lap = (
                4 * luma[:, :, 1:-1, 1:-1]
                - luma[:, :, :-2, 1:-1]
                - luma[:, :, 2:, 1:-1]
                - luma[:, :, 1:-1, :-2]
                - luma[:, :, 1:-1, 2:]
            )
            lap = np.abs(lap).mean(axis=(2, 3))
        else:
            lap = np.zeros(luma.shape[:2])
        stats = np.stack(
            [luma.std(axis=(2, 3)), _log_energy(dx), _log_energy(dy), _log_energy(lap)], axis=-1
        )
        return np.concatenate(pooled + [stats], axis=-1)

    def encode(self, batch):
        return (self.describe(batch) @ self._projection).astype(np.float32)


class ToyMotionEncoder(EncoderBackend):
    kind = TEMPORAL
    descriptor_size = 13

    def __init__(self, name: str = "toy-motion", output_width: int = 64):
        if output_width < 1:
            raise ValueError("output_width must be positive")
        self.name = name
        self.output_width = output_width
        self._projection = _orthogonal(self.descriptor_size, output_width, _BUILD_SEED + 1)
        self._projection.setflags(write=False)

    def parameters(self):
        return {"projection": self._projection}

    def describe(self, chunks: np.ndarray) -> np.ndarray:
        """Raw ``(K, 13)`` motion descriptors of ``(K, tau, H, W, 3)`` chunks."""
        luma = (chunks.astype(np.float64) / 255.0) @ _LUMA
        k, tau, h, w = luma.shape
        if tau > 1:
            diff = np.diff(luma, axis=1)
        else:
            diff = np.zeros((k, 1, h, w))
        absdiff = np.abs(diff)
        per_step = absdiff.mean(axis=(2, 3))
        if h > 1 and w > 1:
            grid = [
                absdiff[:, :, rows, cols].mean(axis=(1, 2, 3))
                for rows in (slice(0, h // 2), slice(h // 2, None))
                for cols in (slice(0, w // 2), slice(w // 2, None))
            ]
        else:
            grid = [absdiff.mean(axis=(1, 2, 3))] * 4
        feats = [
            absdiff.mean(axis=(1, 2, 3)),
            diff.std(axis=(1, 2, 3)),
            diff.mean(axis=(1, 2, 3)),
            per_step.max(axis=1),
            per_step.min(axis=1),
            *grid,
            luma.var(axis=1).mean(axis=(1, 2)),
            luma.mean(axis=(1, 2, 3)),
            luma.std(axis=(1, 2, 3)),
            _log_energy(absdiff.mean(axis=(1, 2, 3))),
        ]
        return np.stack(feats, axis=-1)

    def encode(self, batch):
        return (self.describe(batch) @ self._projection).astype(np.float32)


class TorchScriptSpatialAdapter(EncoderBackend):
    """Spatial encoder loaded from ``<weights_dir>/<filename>`` (TorchScript).

    The scripted module takes ``(K, 3, H, W)`` floats in ``[0, 1]`` and
    returns ``(K, N_p, C)`` patch tokens; a leading class token
    (``N_p + 1`` rows) is dropped.  A CLIP ViT-L/14 exported this way is
    the full-scale configuration (``patch_size=14``, ``output_width=1024``).
    """

    kind = SPATIAL

    def __init__(self, name, weights_dir, patch_size=14, output_width=1024, filename="spatial.pt"):
        self.name = name
        self.patch_size = patch_size
        self.output_width = output_width
        self.weights_path = Path(weights_dir) / filename
        self._module = None
        self._lock = threading.Lock()

    def _load(self):
        import torch

        with self._lock:
            if self._module is None:
                if not self.weights_path.is_file():
                    raise BackendError(f"{self.name}: weights not found at {self.weights_path}")
                try:
                    self._module = torch.jit.load(str(self.weights_path), map_location="cpu").eval()
                except Exception as exc:
                    raise BackendError(f"{self.name}: cannot load {self.weights_path}: {exc}") from exc
        return self._module

    def parameters(self):
        return {k: v.detach().numpy() for k, v in self._load().state_dict().items()}

    def encode(self, batch):
        import torch

        module = self._load()
        x = torch.from_numpy(batch).float().div(255.0).permute(0, 3, 1, 2).contiguous()
        with torch.no_grad():
            out = module(x)
        out = out.numpy()
        n_patches = (batch.shape[1] // self.patch_size) * (batch.shape[2] // self.patch_size)
        if out.ndim == 3 and out.shape[1] == n_patches + 1:
            out = out[:, 1:]
        return out.astype(np.float32)


class SlowFastAdapter(EncoderBackend):
    """Two-pathway temporal encoder loaded from TorchScript.

    The scripted module is called as ``module([slow, fast])`` with
    ``(K, 3, T, H, W)`` tensors (the slow pathway keeps every ``alpha``-th
    frame) and returns pooled ``(slow_features, fast_features)``; their
    concatenation is the temporal feature, so ``output_width`` must equal
    ``C_slow + C_fast`` (2048 + 256 for SlowFast-R50).
    """

    kind = TEMPORAL

    def __init__(self, name, weights_dir, output_width=2304, alpha=4, filename="slowfast.pt"):
        self.name = name
        self.output_width = output_width
        self.alpha = alpha
        self.weights_path = Path(weights_dir) / filename
        self._module = None
        self._lock = threading.Lock()

    _load = TorchScriptSpatialAdapter._load
    parameters = TorchScriptSpatialAdapter.parameters

    def encode(self, batch):
        import torch

        module = self._load()
        fast = torch.from_numpy(batch).float().div(255.0).permute(0, 4, 1, 2, 3).contiguous()
        slow = fast[:, :, :: self.alpha].contiguous()
        with torch.no_grad():
            slow_feat, fast_feat = module([slow, fast])
        out = torch.cat([slow_feat.flatten(1), fast_feat.flatten(1)], dim=1)
        return out.numpy().astype(np.float32)


class BackendRegistry:
    """Name -> backend map, one namespace per kind."""

    def __init__(self):
        self._backends: dict[tuple[str, str], EncoderBackend] = {}
        self._lock = threading.Lock()

    def register(self, backend: EncoderBackend) -> EncoderBackend:
        if backend.kind not in (SPATIAL, TEMPORAL):
            raise ValueError(f"unknown backend kind {backend.kind!r}")
        key = (backend.kind, backend.name)
        with self._lock:
            if key in self._backends:
                raise DuplicateBackend(f"{backend.kind} backend {backend.name!r} already registered")
            self._backends[key] = backend
        return backend

    def resolve(self, name: str, kind: str | None = None) -> EncoderBackend:
        kinds = (kind,) if kind else (SPATIAL, TEMPORAL)
        for k in kinds:
            if (k, name) in self._backends:
                return self._backends[(k, name)]
        raise UnknownBackend(f"no backend named {name!r}" + (f" of kind {kind}" if kind else ""))

    def list(self, kind: str | None = None) -> list[EncoderBackend]:
        return [b for (k, _), b in sorted(self._backends.items()) if kind is None or k == kind]

    def __contains__(self, name):
        return any(n == name for _, n in self._backends)


registry = BackendRegistry()
registry.register(ToyPatchEncoder())
registry.register(ToyPatchEncoder("toy-spatial-p8", patch_size=8))
registry.register(ToyMotionEncoder())


def register_backend(backend: EncoderBackend) -> EncoderBackend:
    return registry.register(backend)


def resolve_backend(name: str, kind: str | None = None) -> EncoderBackend:
    return registry.resolve(name, kind)


def _as_backend(backend, kind):
    if isinstance(backend, str):
        backend = registry.resolve(backend, kind)
    if backend.kind != kind:
        raise BackendError(f"backend {backend.name!r} is {backend.kind}, expected {kind}")
    return backend


def encode_spatial(key_frames: KeyFrameSet, backend) -> SpatialFeatures:
    backend = _as_backend(backend, SPATIAL)
    frames = np.asarray(key_frames.key_frames)
    k, h, w = frames.shape[:3]
    p = backend.patch_size
    if h % p or w % p:
        raise ShapeError(f"frame size {h}x{w} is not divisible by patch size {p}")
    try:
        data = np.asarray(backend.encode(frames))
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"{backend.name} failed: {exc}") from exc
    expected = (k, (h // p) * (w // p), backend.output_width)
    if data.shape != expected:
        raise BackendError(f"{backend.name} returned shape {data.shape}, expected {expected}")
    if not np.all(np.isfinite(data)):
        raise BackendError(f"{backend.name} returned non-finite features")
    return SpatialFeatures(data, p)


def encode_temporal(chunks: ChunkSet, backend) -> TemporalFeatures:
    backend = _as_backend(backend, TEMPORAL)
    k = len(chunks)
    try:
        data = np.asarray(backend.encode(np.asarray(chunks.chunks)))
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"{backend.name} failed: {exc}") from exc
    if data.shape == (k, backend.output_width):
        data = data[:, None, :]
    if data.shape != (k, 1, backend.output_width):
        raise BackendError(
            f"{backend.name} returned shape {data.shape}, expected {(k, 1, backend.output_width)}"
        )
    if not np.all(np.isfinite(data)):
        raise BackendError(f"{backend.name} returned non-finite features")
    return TemporalFeatures(data)


# Feature files: b"LVQF", uint32 version, uint32 ndim, ndim x uint32 dims,
# then the float32 payload in C order; every field little-endian.
_MAGIC = b"LVQF"
_VERSION = 1


def write_features(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = _MAGIC + struct.pack("<II", _VERSION, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a feature file")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    shape = struct.unpack_from(f"<{ndim}I", raw, 12)
    offset = 12 + 4 * ndim
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


def encode_video(video, spatial_backend="toy-spatial", temporal_backend="toy-motion", tau=None,
                 video_id=None, target_size=(224, 224)) -> EncodedVideo:
    video = as_frame_sequence(video, target_size)
    chunks, keys = preprocess_video(video, tau)
    return EncodedVideo(
        video_id if video_id is not None else video.source_id,
        encode_spatial(keys, spatial_backend),
        encode_temporal(chunks, temporal_backend),
    )


class VideoFeatureExtractor(TransformerMixin, BaseEstimator):
    """Map videos (frame sequences or paths) to :class:`EncodedVideo` records.

    Already-encoded inputs pass through unchanged, so the extractor can sit
    in front of an estimator that also accepts cached features.
    """

    def __init__(self, spatial_backend="toy-spatial", temporal_backend="toy-motion", tau=None,
                 target_size=(224, 224)):
        self.spatial_backend = spatial_backend
        self.temporal_backend = temporal_backend
        self.tau = tau
        self.target_size = target_size

    def fit(self, X, y=None):
        return self

    def transform(self, X: Sequence) -> list[EncodedVideo]:
        out = []
        for i, video in enumerate(X):
            if isinstance(video, EncodedVideo):
                out.append(video)
                continue
            video = as_frame_sequence(video, self.target_size)
            out.append(
                encode_video(video, self.spatial_backend, self.temporal_backend, self.tau,
                             video_id=video.source_id or f"video-{i}")
            )
        return out
