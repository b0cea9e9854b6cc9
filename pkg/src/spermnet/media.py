"""Frame sequence ingest: decoding, grayscale conversion and resizing.

Two on-disk layouts are understood:

* a directory of lossless images named ``000000.png``, ``000001.png``, ...
* a raw ``<name>.rgb24`` stream next to a ``<name>.meta.json`` sidecar holding
  ``{"width": ..., "height": ..., "frames": ...}``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
_FRAME_NAME = re.compile(r"^(\d{6})\.(png|bmp|tif|tiff|ppm|pgm)$", re.IGNORECASE)


class MediaError(ValueError):
    pass


@dataclass(frozen=True)
class PixelFrame:
    """Interleaved 8-bit RGB image, ``data`` shaped (height, width, 3)."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise MediaError(f"frame dimensions must be positive, got {self.width}x{self.height}")
        if self.data.dtype != np.uint8 or self.data.shape != (self.height, self.width, 3):
            raise MediaError(
                f"PixelFrame data must be uint8 of shape {(self.height, self.width, 3)}, "
                f"got {self.data.dtype} {self.data.shape}"
            )

    @classmethod
    def from_array(cls, arr) -> "PixelFrame":
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        return cls(arr.shape[1], arr.shape[0], arr)


@dataclass(frozen=True)
class GrayFrame:
    """Single-channel luma in [0, 1], ``data`` shaped (height, width)."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise MediaError(f"frame dimensions must be positive, got {self.width}x{self.height}")
        if self.data.shape != (self.height, self.width):
            raise MediaError(f"GrayFrame data must have shape {(self.height, self.width)}, got {self.data.shape}")

    @classmethod
    def from_array(cls, arr) -> "GrayFrame":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr.shape[1], arr.shape[0], arr)


@dataclass(frozen=True)
class VideoSource:
    id: str
    frame_count: int
    frame_size: tuple[int, int]
    path: Path
    kind: str  # "images" | "raw"
    frame_files: tuple[Path, ...] = field(default=(), repr=False)

    @property
    def width(self) -> int:
        return self.frame_size[0]

    @property
    def height(self) -> int:
        return self.frame_size[1]


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def open_video(path) -> VideoSource:
    """Open an image-sequence directory or a raw ``.rgb24`` stream."""
    path = Path(path)
    if not path.exists():
        raise MediaError(f"no such video: {path}")

    if path.is_dir():
        files = sorted(p for p in path.iterdir() if _FRAME_NAME.match(p.name))
        if not files:
            raise MediaError(f"no frames in {path}")
        size = _image_size(files[0])
        for f in files[1:]:
            if _image_size(f) != size:
                raise MediaError(f"inconsistent frame dimensions: {f.name} is {_image_size(f)}, expected {size}")
        return VideoSource(path.name, len(files), size, path, "images", tuple(files))

    if path.suffix == ".meta.json" or path.name.endswith(".meta.json"):
        path = path.with_name(path.name[: -len(".meta.json")] + ".rgb24")
    meta_path = path.with_name(path.stem + ".meta.json")
    if not meta_path.exists():
        raise MediaError(f"raw stream {path} has no sidecar header {meta_path.name}")
    meta = json.loads(meta_path.read_text())
    try:
        width, height = int(meta["width"]), int(meta["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MediaError(f"malformed sidecar header {meta_path}: {exc}") from None
    if width < 1 or height < 1:
        raise MediaError(f"invalid frame size in {meta_path}: {width}x{height}")
    nbytes = path.stat().st_size
    frame_bytes = width * height * 3
    if nbytes % frame_bytes:
        raise MediaError(f"{path} holds {nbytes} bytes, not a multiple of the {width}x{height} RGB frame size")
    count = nbytes // frame_bytes
    if count == 0:
        raise MediaError(f"no frames in {path}")
    if "frames" in meta and int(meta["frames"]) != count:
        raise MediaError(f"{meta_path} declares {meta['frames']} frames but the payload holds {count}")
    return VideoSource(path.stem, count, (width, height), path, "raw")


def read_frame(src: VideoSource, index: int) -> PixelFrame:
    if not 0 <= index < src.frame_count:
        raise IndexError(f"frame index {index} out of range [0, {src.frame_count}) for {src.id}")
    w, h = src.frame_size
    if src.kind == "raw":
        frame_bytes = w * h * 3
        with open(src.path, "rb") as fh:
            fh.seek(index * frame_bytes)
            buf = fh.read(frame_bytes)
        if len(buf) != frame_bytes:
            raise MediaError(f"short read of frame {index} in {src.path}")
        arr = np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3).copy()
    else:
        with Image.open(src.frame_files[index]) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        if arr.shape[:2] != (h, w):
            raise MediaError(f"frame {index} of {src.id} changed size on disk")
    arr.flags.writeable = False
    return PixelFrame(w, h, arr)


def to_grayscale(frame: PixelFrame) -> GrayFrame:
    rgb = frame.data.astype(np.float64)
    luma = rgb @ np.array(LUMA_WEIGHTS) / 255.0
    return GrayFrame(frame.width, frame.height, np.clip(luma, 0.0, 1.0))


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, clamped at the edges
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_plane(plane: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of a float array shaped (H, W) or (H, W, C)."""
    if out_w < 1 or out_h < 1:
        raise MediaError(f"output size must be positive, got {out_w}x{out_h}")
    h, w = plane.shape[:2]
    plane = np.asarray(plane, dtype=np.float64)
    if (w, h) == (out_w, out_h):
        return plane.copy()
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    extra = (None,) * (plane.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    rows = plane[y0] * (1.0 - fy) + plane[y1] * fy
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def resize_bilinear(frame, out_w: int, out_h: int):
    if isinstance(frame, PixelFrame):
        out = resize_plane(frame.data, out_w, out_h)
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
        return PixelFrame(out_w, out_h, out)
    if isinstance(frame, GrayFrame):
        out = np.clip(resize_plane(frame.data, out_w, out_h), 0.0, 1.0)
        return GrayFrame(out_w, out_h, out)
    raise TypeError(f"cannot resize {type(frame).__name__}")


def write_image_sequence(frames, directory) -> Path:
    """Write RGB arrays (H, W, 3) as a ``%06d.png`` image sequence."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, arr in enumerate(frames):
        Image.fromarray(np.asarray(arr, dtype=np.uint8), "RGB").save(directory / f"{i:06d}.png")
    return directory


def write_raw_stream(frames, path) -> Path:
    """Write RGB arrays as ``<name>.rgb24`` plus its ``.meta.json`` sidecar."""
    path = Path(path)
    frames = [np.asarray(f, dtype=np.uint8) for f in frames]
    if not frames:
        raise MediaError("cannot write an empty stream")
    h, w = frames[0].shape[:2]
    with open(path, "wb") as fh:
        for f in frames:
            if f.shape != (h, w, 3):
                raise MediaError("all frames in a stream must share one size")
            fh.write(np.ascontiguousarray(f).tobytes())
    meta = {"width": w, "height": h, "frames": len(frames)}
    path.with_name(path.stem + ".meta.json").write_text(json.dumps(meta))
    return path


def load_image(path) -> PixelFrame:
    with Image.open(path) as im:
        return PixelFrame.from_array(np.asarray(im.convert("RGB")))


def save_image(frame: PixelFrame, path) -> None:
    Image.fromarray(frame.data, "RGB").save(path)
