"""Video decoding and the chunk / key-frame decomposition.

A video of ``N`` frames is cut into ``K = N // tau`` consecutive,
non-overlapping chunks of ``tau`` frames; the first frame of every chunk
is its key frame.  Key frames feed the spatial encoder, whole chunks feed
the temporal encoder.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DecodeError, EmptyVideo

CHUNK_INDEX = "chunks.json"
KEYFRAME_DIR = "keyframes"


@dataclass(frozen=True)
class FrameSequence:
    """Decoded video: ``frames`` is an ``(N, H, W, 3)`` uint8 RGB array."""

    frames: np.ndarray
    frame_rate: float
    source_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"frames must have shape (N, H, W, 3), got {frames.shape}")
        if frames.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {frames.dtype}")
        if frames.shape[0] < 1:
            raise EmptyVideo(f"{self.source_id or 'video'} has no frames")
        if not self.frame_rate > 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    @property
    def default_tau(self) -> int:
        """One chunk per second of video."""
        return max(1, int(round(self.frame_rate)))


@dataclass(frozen=True)
class ChunkSet:
    """``chunks`` has shape ``(K, tau, H, W, 3)`` and views the source frames."""

    chunks: np.ndarray
    tau: int

    def __len__(self) -> int:
        return self.chunks.shape[0]

    def __getitem__(self, j: int) -> np.ndarray:
        return self.chunks[j]


@dataclass(frozen=True)
class KeyFrameSet:
    key_frames: np.ndarray
    source_indices: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.key_frames.shape[0]


def load_video(path, target_size: tuple[int, int] = (224, 224)) -> FrameSequence:
    """Decode every frame of ``path`` and resize it bilinearly to ``(H, W)``."""
    path = Path(path)
    if not path.is_file():
        raise DecodeError(f"no such video file: {path}")
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise DecodeError(f"cannot open {path}")
    try:
        fps = float(cap.get(cv2.CAP_PROP_FPS))
        height, width = target_size
        frames = []
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            if frame.shape[:2] != (height, width):
                frame = cv2.resize(frame, (width, height), interpolation=cv2.INTER_LINEAR)
            frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    finally:
        cap.release()
    if not frames:
        raise EmptyVideo(f"{path} decoded to zero frames")
    if not fps > 0:
        raise DecodeError(f"{path} carries no frame rate")
    return FrameSequence(np.stack(frames), fps, source_id=path.stem)


def slice_chunks(video: FrameSequence, tau: int) -> ChunkSet:
    tau = int(tau)
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    n_chunks = video.n_frames // tau
    if n_chunks == 0:
        raise EmptyVideo(
            f"{video.source_id or 'video'} has {video.n_frames} frames, fewer than tau={tau}"
        )
    # trailing N mod tau frames are dropped
    usable = video.frames[: n_chunks * tau]
    return ChunkSet(usable.reshape((n_chunks, tau) + usable.shape[1:]), tau)


def select_key_frames(chunks: ChunkSet) -> KeyFrameSet:
    if len(chunks) == 0:
        raise EmptyVideo("cannot select key frames from an empty chunk set")
    return KeyFrameSet(
        key_frames=chunks.chunks[:, 0],
        source_indices=[chunks.tau * j for j in range(len(chunks))],
    )


def preprocess_video(video: FrameSequence, tau: int | None = None) -> tuple[ChunkSet, KeyFrameSet]:
    chunks = slice_chunks(video, video.default_tau if tau is None else tau)
    return chunks, select_key_frames(chunks)


def write_cache(directory, video: FrameSequence, chunks: ChunkSet, key_frames: KeyFrameSet) -> Path:
    """Store key frames as PNG plus a JSON chunk index under ``directory``.

    The index is written last, so its presence marks a complete entry.
    """
    directory = Path(directory)
    frame_dir = directory / KEYFRAME_DIR
    frame_dir.mkdir(parents=True, exist_ok=True)
    for j, frame in enumerate(key_frames.key_frames):
        if not cv2.imwrite(str(frame_dir / f"{j:05d}.png"), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR)):
            raise OSError(f"failed to write key frame {j} under {frame_dir}")
    index = {
        "source_id": video.source_id,
        "frame_rate": video.frame_rate,
        "n_frames": video.n_frames,
        "height": video.size[0],
        "width": video.size[1],
        "tau": chunks.tau,
        "K": len(chunks),
        "source_indices": key_frames.source_indices,
    }
    tmp = directory / (CHUNK_INDEX + ".tmp")
    tmp.write_text(json.dumps(index, indent=2), encoding="utf-8")
    os.replace(tmp, directory / CHUNK_INDEX)
    return directory


def read_cache_index(directory) -> dict:
    return json.loads((Path(directory) / CHUNK_INDEX).read_text(encoding="utf-8"))


def read_cached_key_frames(directory) -> KeyFrameSet:
    index = read_cache_index(directory)
    frames = []
    for j in range(index["K"]):
        bgr = cv2.imread(str(Path(directory) / KEYFRAME_DIR / f"{j:05d}.png"), cv2.IMREAD_COLOR)
        if bgr is None:
            raise DecodeError(f"missing cached key frame {j} in {directory}")
        frames.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
    return KeyFrameSet(np.stack(frames), list(index["source_indices"]))


def as_frame_sequence(video, target_size: tuple[int, int] = (224, 224)) -> FrameSequence:
    if isinstance(video, FrameSequence):
        return video
    if isinstance(video, (str, os.PathLike)):
        return load_video(video, target_size)
    raise TypeError(f"expected a FrameSequence or a path, got {type(video).__name__}")


class VideoPreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping videos to ``(ChunkSet, KeyFrameSet)`` pairs.

    Parameters
    ----------
    tau : int or None
        Frames per chunk.  ``None`` uses the rounded frame rate of each video.
    target_size : tuple of int
        ``(H, W)`` used when a path has to be decoded.
    """

    def __init__(self, tau: int | None = None, target_size: tuple[int, int] = (224, 224)):
        self.tau = tau
        self.target_size = target_size

    def fit(self, X, y=None):
        return self

    def transform(self, X: Sequence) -> list[tuple[ChunkSet, KeyFrameSet]]:
        return [preprocess_video(as_frame_sequence(v, self.target_size), self.tau) for v in X]
