"""Synthetic moving-dot videos with motion-correlated labels, for tests and demos.

Each video holds bright blobs on a faint static texture.  A blob is progressive
(straight runs), non-progressive (jitter in place) or immotile (still); the
motility label is the percentage of each class.  Morphology labels come from
per-blob shape defects (larger head, dim tail, elongated midpiece).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import LABEL_COLUMNS, LabelRecord, write_fold_file
from .media import write_image_sequence, write_raw_stream


@dataclass(frozen=True)
class SyntheticVideo:
    video_id: str
    frames: np.ndarray  # (T, H, W, 3) uint8
    label: LabelRecord


def moving_dots(
    video_id: str,
    rng: np.random.Generator,
    n_frames: int = 32,
    size: int = 96,
    n_dots: int = 20,
    speed: float = 1.5,
    progressive: float | None = None,
) -> SyntheticVideo:
    progressive = rng.uniform(0.1, 0.8) if progressive is None else progressive
    n_prog = int(round(progressive * n_dots))
    n_non = int(round(rng.uniform(0.0, 1.0 - n_prog / n_dots) * n_dots))
    kinds = np.array([0] * n_prog + [1] * n_non + [2] * (n_dots - n_prog - n_non))
    defect = rng.choice(4, size=n_dots, p=[0.55, 0.2, 0.15, 0.1])

    pos = rng.uniform(0, size, (n_dots, 2))
    heading = rng.uniform(0, 2 * np.pi, n_dots)
    vel = np.where(kinds[:, None] == 0, speed * np.stack([np.cos(heading), np.sin(heading)], 1), 0.0)
    radius = np.where(defect == 1, 3.0, 2.0)
    amp = np.where(defect == 2, 0.45, 0.85)
    stretch = np.where(defect == 3, 2.0, 1.0)

    texture = ndimage.gaussian_filter(rng.random((size, size)), 3.0, mode="wrap")
    texture = 0.15 + 0.2 * (texture - texture.min()) / (np.ptp(texture) + 1e-12)
    tint = rng.uniform(0.8, 1.0, 3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    frames = np.empty((n_frames, size, size, 3), dtype=np.uint8)
    for t in range(n_frames):
        img = texture.copy()
        for (x, y), r, a, s in zip(pos, radius, amp, stretch):
            dx = (xx - x + size / 2) % size - size / 2
            dy = (yy - y + size / 2) % size - size / 2
            img += a * np.exp(-(dx**2 / (s * s) + dy**2) / (2 * r * r))
        frames[t] = np.clip(np.rint(np.clip(img, 0, 1)[..., None] * tint * 255), 0, 255).astype(np.uint8)
        jitter = np.where(kinds[:, None] == 1, rng.normal(0.0, 0.8, (n_dots, 2)), 0.0)
        pos = (pos + vel + jitter) % size

    motility = np.bincount(kinds, minlength=3) / n_dots * 100.0
    morphology = np.array([(defect == k).mean() * 100.0 for k in (1, 2, 3)])
    label = LabelRecord(video_id, tuple(float(m) for m in motility), tuple(float(m) for m in morphology))
    return SyntheticVideo(video_id, frames, label)


def make_corpus(
    out_dir,
    n_videos: int = 6,
    seed: int = 0,
    n_frames: int = 32,
    size: int = 96,
    raw: bool = False,
) -> dict:
    """Write videos, ``labels.csv`` and ``folds.csv`` (round-robin folds) under ``out_dir``."""
    out_dir = Path(out_dir)
    videos = out_dir / "videos"
    videos.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels, folds = [], {}
    for i in range(n_videos):
        vid = f"v{i + 1:02d}"
        prog = 0.1 + 0.7 * i / max(n_videos - 1, 1)
        video = moving_dots(vid, rng, n_frames=n_frames, size=size, progressive=prog, speed=0.5 + 2.5 * prog)
        if raw:
            write_raw_stream(video.frames, videos / f"{vid}.rgb24")
        else:
            write_image_sequence(video.frames, videos / vid)
        labels.append(video.label)
        folds[vid] = i % 3

    with open(out_dir / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_COLUMNS)
        for r in labels:
            w.writerow([r.video_id, *(f"{v:g}" for v in r.motility + r.morphology)])
    write_fold_file(folds, out_dir / "folds.csv")
    return {"videos": videos, "labels": out_dir / "labels.csv", "folds": out_dir / "folds.csv"}
