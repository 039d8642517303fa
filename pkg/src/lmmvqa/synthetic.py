"""Procedural videos with a known quality mapping, for smoke tests and demos.

Two content families are available.  ``"A"`` is band-limited colour noise,
``"B"`` a sum of six oriented colour gratings at the same contrast.  Both drift a little every frame
so chunks carry motion.  Quality is degraded with a Gaussian blur and the
synthetic MOS is a fixed decreasing function of the blur radius.
"""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .preprocess import FrameSequence

FAMILIES = ("A", "B")
MAX_BLUR = 3.0


def mos_from_blur(radius: float) -> float:
    """80 for a sharp video down to 20 at ``MAX_BLUR``, rounded to one decimal."""
    return round(80.0 - 20.0 * float(radius), 1)


def _canvas(family: str, rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    if family == "A":
        noise = rng.standard_normal((height, width, 3))
        img = gaussian_filter(noise, sigma=(1.0, 1.0, 0))
        img = img / (img.std() + 1e-8) * 0.18 + rng.uniform(0.35, 0.65, size=3)
    elif family == "B":
        yy, xx = np.mgrid[0:height, 0:width].astype(float)
        img = np.zeros((height, width, 3))
        for _ in range(6):
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(5.0, 9.0)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
            img += wave[..., None] * rng.uniform(0.5, 1.0, size=3)
        img = img / (img.std() + 1e-8) * 0.18 + rng.uniform(0.35, 0.65, size=3)
    else:
        raise ValueError(f"unknown content family {family!r}")
    return img


def textured_video(family: str = "A", seed: int = 0, n_frames: int = 8, size: int = 32, fps: float = 4.0,
                   blur: float = 0.0, motion: int = 1, source_id: str = "") -> FrameSequence:
    rng = np.random.default_rng(seed)
    margin = motion * n_frames
    canvas = _canvas(family, rng, size + margin, size + margin)
    frames = []
    for t in range(n_frames):
        frame = canvas[t * motion : t * motion + size, t * motion : t * motion + size]
        if blur > 0:
            frame = gaussian_filter(frame, sigma=(blur, blur, 0))
        frames.append(np.clip(frame * 255.0, 0, 255).round().astype(np.uint8))
    return FrameSequence(np.stack(frames), fps, source_id=source_id or f"{family}-{seed}")


def blur_corpus(family: str, n: int, seed: int = 0, **kwargs) -> tuple[list[FrameSequence], np.ndarray]:
    """``n`` videos of one family with uniform random blur and the matching MOS."""
    rng = np.random.default_rng([seed, FAMILIES.index(family)])
    radii = rng.uniform(0.0, MAX_BLUR, size=n)
    videos = [
        textured_video(family, seed=int(rng.integers(2**31)), blur=r, source_id=f"{family}-{i:03d}", **kwargs)
        for i, r in enumerate(radii)
    ]
    return videos, np.array([mos_from_blur(r) for r in radii])


def write_video(path, video: FrameSequence, fourcc: str = "FFV1") -> Path:
    """Write losslessly (FFV1 in AVI by default) so decoding returns the same pixels."""
    path = Path(path)
    h, w = video.size
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*fourcc), float(video.frame_rate), (w, h))
    if not writer.isOpened():
        raise OSError(f"cannot open a {fourcc} writer for {path}")
    try:
        for frame in video.frames:
            writer.write(cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    finally:
        writer.release()
    return path
