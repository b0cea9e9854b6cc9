"""Labels, chunk sampling, D1/D2 sample construction, folds and the dataset file.

D1 stacks nine consecutive grayscale frames.  D2 stacks the RGB first frame of a
chunk with two flow images (stride 1 and stride 10).  Both kinds are built from
the same 11-frame chunk list so their samples line up one-to-one.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .flow import FarnebackParams, estimate_flow, flow_to_rgb
from .media import GrayFrame, VideoSource, read_frame, resize_bilinear, to_grayscale

INPUT_SIZE = 256
CHANNELS = 9
CHUNK_LEN = 11
N_CHUNKS = 250
FLOW_STRIDES = (1, 10)

TASKS = ("motility", "morphology")
KINDS = ("D1", "D2")
LABEL_COLUMNS = (
    "video_id",
    "progressive",
    "non_progressive",
    "immotile",
    "head_defects",
    "tail_defects",
    "midpiece_neck_defects",
)

MAGIC = b"SPRM"
VERSION = 1
_HEADER = struct.Struct("<4sHB")
_FLOW_BLOCK = struct.Struct("<dIIIId")
_COUNT = struct.Struct("<I")
TENSOR_BYTES = CHANNELS * INPUT_SIZE * INPUT_SIZE * 4


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabelRecord:
    video_id: str
    motility: tuple[float, float, float]
    morphology: tuple[float, float, float]

    def __post_init__(self):
        for name, value in zip(LABEL_COLUMNS[1:], self.motility + self.morphology):
            if not (0.0 <= value <= 100.0):
                raise DatasetError(f"{self.video_id}: {name}={value} outside [0, 100]")
        total = sum(self.motility)
        if abs(total - 100.0) > 1.0:
            raise DatasetError(f"{self.video_id}: motility percentages sum to {total:g}, expected 100 +/- 1")

    def target(self, task: str) -> tuple[float, float, float]:
        if task == "motility":
            return self.motility
        if task == "morphology":
            return self.morphology
        raise DatasetError(f"unknown task {task!r}")


@dataclass(frozen=True)
class ChunkSpec:
    video_id: str
    start_frame: int
    length: int = CHUNK_LEN


@dataclass(frozen=True, eq=False)
class SampleTensor:
    video_id: str
    start_frame: int
    task: str
    dataset_kind: str
    target: np.ndarray  # (3,) float32
    data: np.ndarray  # (9, 256, 256) float32


def load_labels(path) -> list[LabelRecord]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != LABEL_COLUMNS:
            raise DatasetError(f"{path}: unexpected header {header}; expected {','.join(LABEL_COLUMNS)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(LABEL_COLUMNS):
                raise DatasetError(f"{path}:{lineno}: expected {len(LABEL_COLUMNS)} fields, got {len(row)}")
            try:
                values = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            records.append(LabelRecord(row[0].strip(), tuple(values[:3]), tuple(values[3:])))
    return records


def sample_chunk_positions(
    frame_count: int,
    n_chunks: int = N_CHUNKS,
    chunk_len: int = CHUNK_LEN,
    video_id: str = "",
    rng: np.random.Generator | None = None,
) -> list[ChunkSpec]:
    """Chunk starts spread uniformly over the video, or drawn from ``rng`` when given."""
    if frame_count < chunk_len:
        raise DatasetError(f"video {video_id!r} has {frame_count} frames, fewer than the chunk length {chunk_len}")
    if n_chunks < 1:
        raise DatasetError("n_chunks must be positive")
    last = frame_count - chunk_len
    if rng is not None:
        starts = sorted(int(s) for s in rng.integers(0, last + 1, size=n_chunks))
    elif n_chunks == 1:
        starts = [0]
    else:
        starts = [int(math.floor(i * last / (n_chunks - 1) + 0.5)) for i in range(n_chunks)]
    return [ChunkSpec(video_id, s, chunk_len) for s in starts]


class FrameCache:
    """Memoized per-video derived planes; chunk starts repeat heavily on short videos."""

    def __init__(self, src: VideoSource, params: FarnebackParams | None = None, maxsize: int = 64):
        self.src = src
        self.params = params or FarnebackParams()
        self.gray = lru_cache(maxsize=maxsize)(self._gray)
        self.rgb = lru_cache(maxsize=maxsize)(self._rgb)
        self.flow_image = lru_cache(maxsize=maxsize)(self._flow_image)

    def _gray(self, index: int) -> GrayFrame:
        g = to_grayscale(read_frame(self.src, index))
        return resize_bilinear(g, INPUT_SIZE, INPUT_SIZE)

    def _rgb(self, index: int) -> np.ndarray:
        frame = resize_bilinear(read_frame(self.src, index), INPUT_SIZE, INPUT_SIZE)
        return frame.data.transpose(2, 0, 1).astype(np.float32) / 255.0

    def _flow_image(self, i: int, j: int) -> np.ndarray:
        flow = estimate_flow(self.gray(i), self.gray(j), self.params)
        return flow_to_rgb(flow).data.transpose(2, 0, 1).astype(np.float32) / 255.0


def _check_chunk(src: VideoSource, chunk: ChunkSpec, min_len: int):
    if chunk.length < min_len:
        raise DatasetError(f"chunk length {chunk.length} < {min_len}")
    if chunk.start_frame < 0 or chunk.start_frame + chunk.length > src.frame_count:
        raise DatasetError(
            f"chunk [{chunk.start_frame}, {chunk.start_frame + chunk.length}) exceeds {src.frame_count} frames of {src.id}"
        )


def _target(label: LabelRecord | None, task: str) -> np.ndarray:
    if task not in TASKS:
        raise DatasetError(f"unknown task {task!r}")
    if label is None:
        return np.zeros(3, dtype=np.float32)
    return np.asarray(label.target(task), dtype=np.float32)


def build_d1_sample(
    src: VideoSource,
    chunk: ChunkSpec,
    label: LabelRecord | None = None,
    task: str = "motility",
    cache: FrameCache | None = None,
) -> SampleTensor:
    _check_chunk(src, chunk, CHANNELS)
    cache = cache or FrameCache(src)
    data = np.stack([cache.gray(chunk.start_frame + c).data for c in range(CHANNELS)]).astype(np.float32)
    return SampleTensor(chunk.video_id or src.id, chunk.start_frame, task, "D1", _target(label, task), data)


def build_d2_sample(
    src: VideoSource,
    chunk: ChunkSpec,
    params: FarnebackParams | None = None,
    label: LabelRecord | None = None,
    task: str = "motility",
    cache: FrameCache | None = None,
) -> SampleTensor:
    _check_chunk(src, chunk, FLOW_STRIDES[-1] + 1)
    if cache is None:
        cache = FrameCache(src, params)
    elif params is not None and cache.params != params:
        raise DatasetError("frame cache was built with different flow parameters")
    s = chunk.start_frame
    parts = [cache.rgb(s)] + [cache.flow_image(s, s + k) for k in FLOW_STRIDES]
    data = np.concatenate(parts).astype(np.float32)
    return SampleTensor(chunk.video_id or src.id, s, task, "D2", _target(label, task), data)


def participant_id(video_id: str) -> str:
    """Participant part of a video id: everything before the first underscore."""
    return video_id.split("_", 1)[0]


def _hash_fold(pid: str) -> int:
    return int.from_bytes(hashlib.sha256(pid.encode("utf-8")).digest()[:8], "little") % 3


def load_fold_file(path) -> dict[str, int]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["video_id", "fold"]:
            raise DatasetError(f"{path}: expected header video_id,fold")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                fold = int(row["fold"])
            except (TypeError, ValueError):
                raise DatasetError(f"{path}:{lineno}: bad fold value {row['fold']!r}") from None
            if fold not in (0, 1, 2):
                raise DatasetError(f"{path}:{lineno}: fold {fold} outside {{0, 1, 2}}")
            out[row["video_id"].strip()] = fold
    return out


def assign_folds(labels: Iterable[LabelRecord], fold_file=None) -> dict[str, int]:
    ids = [r.video_id if isinstance(r, LabelRecord) else str(r) for r in labels]
    if fold_file is None:
        return {vid: _hash_fold(participant_id(vid)) for vid in ids}
    given = load_fold_file(fold_file) if not isinstance(fold_file, dict) else dict(fold_file)
    missing = [vid for vid in ids if vid not in given]
    if missing:
        raise DatasetError(f"labeled videos missing from fold file: {', '.join(missing)}")
    for vid, f in given.items():
        if f not in (0, 1, 2):
            raise DatasetError(f"fold {f} for {vid} outside {{0, 1, 2}}")
    return {vid: given[vid] for vid in ids}


def write_fold_file(folds: dict[str, int], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "fold"])
        for vid in sorted(folds):
            w.writerow([vid, folds[vid]])


# -- dataset file ----------------------------------------------------------


def _pack_header(kind: str, params: FarnebackParams, count: int) -> bytes:
    return (
        _HEADER.pack(MAGIC, VERSION, KINDS.index(kind) + 1)
        + _FLOW_BLOCK.pack(
            params.pyr_scale, params.levels, params.winsize, params.iterations, params.poly_n, params.poly_sigma
        )
        + _COUNT.pack(count)
    )


def _pack_sample(s: SampleTensor) -> bytes:
    vid = s.video_id.encode("utf-8")
    data = np.ascontiguousarray(s.data, dtype="<f4")
    if data.shape != (CHANNELS, INPUT_SIZE, INPUT_SIZE):
        raise DatasetError(f"sample tensor has shape {data.shape}, expected {(CHANNELS, INPUT_SIZE, INPUT_SIZE)}")
    return b"".join([
        struct.pack("<I", len(vid)),
        vid,
        struct.pack("<IB", s.start_frame, TASKS.index(s.task)),
        np.asarray(s.target, dtype="<f4").tobytes(),
        data.tobytes(),
    ])


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.json")


def write_dataset(samples: Iterable[SampleTensor], path, params: FarnebackParams | None = None, extra=None) -> dict:
    """Stream samples to ``path``; returns (and writes alongside) the manifest."""
    params = params or FarnebackParams()
    path = Path(path)
    kind = None
    per_video: dict[str, int] = {}
    count = 0
    ch_sum = np.zeros(CHANNELS, np.float64)
    ch_sq = np.zeros(CHANNELS, np.float64)
    with open(path, "wb") as fh:
        fh.write(_pack_header("D1", params, 0))
        for s in samples:
            if kind is None:
                kind = s.dataset_kind
            elif s.dataset_kind != kind:
                raise DatasetError(f"mixed dataset kinds: {kind} and {s.dataset_kind}")
            if not np.isfinite(s.data).all() or s.data.min() < 0 or s.data.max() > 1:
                raise DatasetError(f"sample {s.video_id}@{s.start_frame} has values outside [0, 1]")
            fh.write(_pack_sample(s))
            d = s.data.astype(np.float64).reshape(CHANNELS, -1)
            ch_sum += d.sum(axis=1)
            ch_sq += (d * d).sum(axis=1)
            per_video[s.video_id] = per_video.get(s.video_id, 0) + 1
            count += 1
        kind = kind or "D1"
        fh.seek(0)
        fh.write(_pack_header(kind, params, count))
    n_px = max(count, 1) * INPUT_SIZE * INPUT_SIZE
    mean = ch_sum / n_px
    std = np.sqrt(np.maximum(ch_sq / n_px - mean * mean, 0.0))
    manifest = {
        "format": "SPRM",
        "version": VERSION,
        "dataset_kind": kind,
        "flow_params": params.as_dict(),
        "resize": {"kernel": "bilinear", "coordinates": "half-pixel", "size": [INPUT_SIZE, INPUT_SIZE]},
        "scaling": "divide-by-255",
        "sample_count": count,
        "standardize": False,
        "channel_mean": mean.tolist(),
        "channel_std": std.tolist(),
        "per_video_counts": dict(sorted(per_video.items())),
    }
    if extra:
        manifest.update(extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


class DatasetFile:
    """Random-access reader over a dataset file; tensors are read lazily."""

    def __init__(self, path):
        self.path = Path(path)
        size = self.path.stat().st_size
        with open(self.path, "rb") as fh:
            head = fh.read(_HEADER.size + _FLOW_BLOCK.size + _COUNT.size)
            if len(head) < _HEADER.size or head[:4] != MAGIC:
                raise DatasetError(f"{self.path}: not a dataset file (bad magic)")
            if len(head) < _HEADER.size + _FLOW_BLOCK.size + _COUNT.size:
                raise DatasetError(f"{self.path}: truncated header")
            _, version, kind = _HEADER.unpack_from(head)
            if version != VERSION:
                raise DatasetError(f"{self.path}: unsupported version {version}")
            if kind not in (1, 2):
                raise DatasetError(f"{self.path}: unknown dataset kind {kind}")
            self.dataset_kind = KINDS[kind - 1]
            fp = _FLOW_BLOCK.unpack_from(head, _HEADER.size)
            self.flow_params = FarnebackParams(fp[0], fp[1], fp[2], fp[3], fp[4], fp[5])
            (n,) = _COUNT.unpack_from(head, _HEADER.size + _FLOW_BLOCK.size)

            video_ids, starts, tasks, targets, offsets = [], [], [], [], []
            pos = len(head)
            for i in range(n):
                fh.seek(pos)
                raw = fh.read(4)
                if len(raw) < 4:
                    raise DatasetError(f"{self.path}: truncated at sample {i}")
                (ln,) = struct.unpack("<I", raw)
                rest = fh.read(ln + 5 + 12)
                if len(rest) < ln + 17:
                    raise DatasetError(f"{self.path}: truncated at sample {i}")
                video_ids.append(rest[:ln].decode("utf-8"))
                start, task = struct.unpack_from("<IB", rest, ln)
                if task >= len(TASKS):
                    raise DatasetError(f"{self.path}: bad task code {task} at sample {i}")
                starts.append(start)
                tasks.append(TASKS[task])
                targets.append(np.frombuffer(rest, dtype="<f4", count=3, offset=ln + 5))
                pos += 4 + ln + 17
                offsets.append(pos)
                pos += TENSOR_BYTES
                if pos > size:
                    raise DatasetError(f"{self.path}: truncated at sample {i}")
        self.video_ids = video_ids
        self.start_frames = np.asarray(starts, dtype=np.int64)
        self.tasks = tasks
        self.targets = np.asarray(targets, dtype=np.float32).reshape(-1, 3)
        self._offsets = offsets
        self.manifest = {}
        self.channel_norm = None
        mpath = manifest_path(self.path)
        if mpath.is_file():
            self.manifest = json.loads(mpath.read_text())
            if self.manifest.get("standardize"):
                mean = np.asarray(self.manifest["channel_mean"], np.float32).reshape(CHANNELS, 1, 1)
                std = np.asarray(self.manifest["channel_std"], np.float32).reshape(CHANNELS, 1, 1)
                self.channel_norm = (mean, np.maximum(std, 1e-6))

    def __len__(self) -> int:
        return len(self._offsets)

    def tensor(self, i: int) -> np.ndarray:
        arr = np.fromfile(self.path, dtype="<f4", count=TENSOR_BYTES // 4, offset=self._offsets[i])
        return arr.reshape(CHANNELS, INPUT_SIZE, INPUT_SIZE).astype(np.float32)

    def batch(self, indices) -> np.ndarray:
        """Model inputs; per-channel standardized when the manifest asks for it."""
        x = np.stack([self.tensor(int(i)) for i in indices])
        if self.channel_norm is not None:
            x = (x - self.channel_norm[0]) / self.channel_norm[1]
        return x

    def __getitem__(self, i: int) -> SampleTensor:
        return SampleTensor(
            self.video_ids[i], int(self.start_frames[i]), self.tasks[i], self.dataset_kind,
            self.targets[i].copy(), self.tensor(i),
        )

    def __iter__(self) -> Iterator[SampleTensor]:
        for i in range(len(self)):
            yield self[i]

    @property
    def task(self) -> str:
        return self.tasks[0] if self.tasks else "motility"


def read_dataset(path) -> Iterator[SampleTensor]:
    return iter(DatasetFile(path))


class InMemoryDataset:
    """Same read surface as :class:`DatasetFile`, backed by arrays."""

    def __init__(self, samples: Iterable[SampleTensor]):
        samples = list(samples)
        if not samples:
            raise DatasetError("empty dataset")
        self.dataset_kind = samples[0].dataset_kind
        self.video_ids = [s.video_id for s in samples]
        self.start_frames = np.asarray([s.start_frame for s in samples], dtype=np.int64)
        self.tasks = [s.task for s in samples]
        self.targets = np.stack([np.asarray(s.target, dtype=np.float32) for s in samples])
        self._data = np.stack([s.data for s in samples]).astype(np.float32)

    def __len__(self) -> int:
        return len(self.video_ids)

    def tensor(self, i: int) -> np.ndarray:
        return self._data[i]

    def batch(self, indices) -> np.ndarray:
        return self._data[np.asarray(indices, dtype=np.intp)]

    @property
    def task(self) -> str:
        return self.tasks[0]


# -- whole-corpus build ----------------------------------------------------


def build_video_samples(
    src: VideoSource,
    kind: str,
    label: LabelRecord | None,
    task: str = "motility",
    params: FarnebackParams | None = None,
    n_chunks: int = N_CHUNKS,
    rng: np.random.Generator | None = None,
    threads: int = 1,
) -> Iterator[SampleTensor]:
    if kind not in KINDS:
        raise DatasetError(f"unknown dataset kind {kind!r}")
    params = params or FarnebackParams()
    chunks = sample_chunk_positions(src.frame_count, n_chunks, CHUNK_LEN, src.id, rng)
    cache = FrameCache(src, params)

    def make(chunk):
        if kind == "D1":
            return build_d1_sample(src, chunk, label, task, cache)
        return build_d2_sample(src, chunk, params, label, task, cache)

    if threads <= 1:
        yield from map(make, chunks)
        return
    window = threads * 2
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for lo in range(0, len(chunks), window):
            # map() preserves submission order, so output stays sorted by start frame
            yield from pool.map(make, chunks[lo : lo + window])


def render_counts(per_video: dict[str, int]) -> str:
    buf = io.StringIO()
    for vid, n in sorted(per_video.items()):
        buf.write(f"{vid}\t{n}\n")
    return buf.getvalue()

