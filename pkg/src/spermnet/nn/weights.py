"""Named-tensor weight files (``SPWT``)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .layers import Module

MAGIC = b"SPWT"
VERSION = 1
FIRST_CONV = "conv1.weight"


class WeightError(ValueError):
    pass


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise WeightError(f"{path}: not a weight file (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", raw, 4)
        if version != VERSION:
            raise WeightError(f"{path}: unsupported version {version}")
        pos = 10
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + ln].decode("utf-8")
            pos += 4 + ln
            (rank,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{rank}I", raw, pos + 1)
            pos += 1 + 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(raw):
                raise WeightError(f"{path}: truncated in entry {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
    except struct.error:
        raise WeightError(f"{path}: truncated") from None
    return out


def export_weights(model: Module, path) -> None:
    save_tensors(model.state_dict(), path)


def _adapt_first_conv(arr: np.ndarray, target_shape) -> np.ndarray | None:
    # (K, 3, kh, kw) -> (K, 3m, kh, kw): tile the RGB kernel m times, scale by 3/(3m)
    k, c, kh, kw = arr.shape
    tk, tc, tkh, tkw = target_shape
    if (k, kh, kw) != (tk, tkh, tkw) or tc % c:
        return None
    reps = tc // c
    return np.tile(arr, (1, reps, 1, 1)) * (c / tc)


def import_weights(model: Module, path, strict: bool = True) -> list[str]:
    """Load named tensors into ``model``; returns the names that were set.

    With ``strict`` every model parameter and buffer must be present in the file
    and every file entry must belong to the model.  A 3-channel first conv is
    adapted to a wider input by channel tiling.
    """
    tensors = load_tensors(path)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    known = set(params) | set(buffers)

    if strict:
        for name in tensors:
            if name not in known:
                raise WeightError(f"weight file entry {name!r} does not match any model parameter")
        for name in known:
            if name not in tensors:
                raise WeightError(f"model parameter {name!r} missing from weight file")

    loaded = []
    for name, arr in tensors.items():
        if name not in known:
            continue
        current = params[name].data if name in params else buffers[name]
        if arr.shape != current.shape:
            adapted = _adapt_first_conv(arr, current.shape) if name == FIRST_CONV else None
            if adapted is None:
                raise WeightError(f"shape mismatch for {name!r}: file {arr.shape}, model {current.shape}")
            arr = adapted
        current[...] = arr.astype(current.dtype)
        loaded.append(name)
    return loaded
