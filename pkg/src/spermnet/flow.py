"""Dense optical flow by polynomial expansion (Farnebäck), plus visualization.

Every pixel neighbourhood is approximated by a quadratic polynomial
``f(x) ~ x^T A x + b^T x + c``.  When the second frame is a translated copy of
the first, ``b2 = b1 - 2 A d``, so the displacement ``d`` follows from a small
linear system.  Normal equations are averaged over a window and the estimate is
refined coarse-to-fine over an image pyramid.

Coordinates: ``x`` is the column (horizontal) axis, ``y`` the row axis; flow
``u`` is horizontal displacement and ``v`` vertical, both in pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .media import GrayFrame, PixelFrame, resize_plane

# det regularizer; equals 1e-3 on an 8-bit intensity scale (det ~ intensity^4)
_DET_EPS = 1e-3 / 255.0**4
_MIN_LEVEL_SIZE = 32


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class FarnebackParams:
    pyr_scale: float = 0.5
    levels: int = 3
    winsize: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.2

    def __post_init__(self):
        if not 0.0 < self.pyr_scale < 1.0:
            raise FlowError(f"pyr_scale must lie in (0, 1), got {self.pyr_scale}")
        if self.levels < 1:
            raise FlowError(f"levels must be >= 1, got {self.levels}")
        if self.winsize < 3 or self.winsize % 2 == 0:
            raise FlowError(f"winsize must be odd and >= 3, got {self.winsize}")
        if self.iterations < 1:
            raise FlowError(f"iterations must be >= 1, got {self.iterations}")
        if self.poly_n not in (5, 7):
            raise FlowError(f"poly_n must be 5 or 7, got {self.poly_n}")
        if not self.poly_sigma > 0:
            raise FlowError(f"poly_sigma must be positive, got {self.poly_sigma}")

    def as_dict(self) -> dict:
        return {
            "pyr_scale": self.pyr_scale,
            "levels": self.levels,
            "winsize": self.winsize,
            "iterations": self.iterations,
            "poly_n": self.poly_n,
            "poly_sigma": self.poly_sigma,
        }


@dataclass(frozen=True)
class PolyExpansion:
    """Per-pixel quadratic model; each coefficient plane is shaped (height, width)."""

    c: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray

    @property
    def width(self) -> int:
        return self.c.shape[1]

    @property
    def height(self) -> int:
        return self.c.shape[0]


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise FlowError(f"flow components must be matching 2-D planes, got {self.u.shape} and {self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise FlowError("flow field contains non-finite values")

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


def _poly_basis_filters(poly_n: int, sigma: float):
    r = poly_n // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    g /= g.sum()
    # basis order: 1, x, y, x^2, y^2, xy  (x along columns)
    powers = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]
    gram = np.empty((6, 6))
    for i, (pi, qi) in enumerate(powers):
        for j, (pj, qj) in enumerate(powers):
            gram[i, j] = (g * t ** (pi + pj)).sum() * (g * t ** (qi + qj)).sum()
    kernels = [g * t**p for p in range(3)]
    return powers, kernels, np.linalg.inv(gram)


def _expand(img: np.ndarray, poly_n: int, sigma: float) -> PolyExpansion:
    powers, kernels, gram_inv = _poly_basis_filters(poly_n, sigma)
    # correlate rows with the y-kernel first, then columns with the x-kernel
    by_row = {q: ndimage.correlate1d(img, kernels[q], axis=0, mode="nearest") for q in range(3)}
    moments = np.stack(
        [ndimage.correlate1d(by_row[q], kernels[p], axis=1, mode="nearest") for p, q in powers]
    )
    r = np.tensordot(gram_inv, moments, axes=1)
    return PolyExpansion(c=r[0], b1=r[1], b2=r[2], a11=r[3], a12=0.5 * r[5], a22=r[4])


def polynomial_expansion(frame: GrayFrame, params: FarnebackParams = FarnebackParams()) -> PolyExpansion:
    data = np.asarray(frame.data, dtype=np.float64)
    if min(data.shape) < params.poly_n:
        raise FlowError(f"frame {data.shape[1]}x{data.shape[0]} is smaller than poly_n={params.poly_n}")
    return _expand(data, params.poly_n, params.poly_sigma)


def _bilinear_sample(planes: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a stack of planes (K, H, W) at fractional positions, edges replicated."""
    h, w = planes.shape[1:]
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = planes[:, y0, x0] * (1 - fx) + planes[:, y0, x1] * fx
    bot = planes[:, y1, x0] * (1 - fx) + planes[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _stack(p: PolyExpansion) -> np.ndarray:
    return np.stack([p.b1, p.b2, p.a11, p.a12, p.a22])


def _normal_equations(r0: np.ndarray, r1: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-pixel A^T A and A^T db entries for the current displacement guess."""
    h, w = u.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    s = _bilinear_sample(r1, xs + u, ys + v)
    a11 = 0.5 * (r0[2] + s[2])
    a12 = 0.5 * (r0[3] + s[3])
    a22 = 0.5 * (r0[4] + s[4])
    db1 = -0.5 * (s[0] - r0[0]) + a11 * u + a12 * v
    db2 = -0.5 * (s[1] - r0[1]) + a12 * u + a22 * v
    return np.stack([
        a11 * a11 + a12 * a12,
        a12 * (a11 + a22),
        a22 * a22 + a12 * a12,
        a11 * db1 + a12 * db2,
        a12 * db1 + a22 * db2,
    ])


def _solve(m: np.ndarray, winsize: int):
    g11, g12, g22, h1, h2 = ndimage.uniform_filter(m, size=(1, winsize, winsize), mode="nearest")
    det = g11 * g22 - g12 * g12
    idet = 1.0 / (det + _DET_EPS)
    return (g22 * h1 - g12 * h2) * idet, (g11 * h2 - g12 * h1) * idet


def _pyramid_level(img: np.ndarray, scale: float, size: tuple[int, int]) -> np.ndarray:
    if scale == 1.0:
        return img
    sigma = (1.0 / scale - 1.0) * 0.5
    radius = max(1, int(round(sigma * 5)) // 2)
    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest", truncate=radius / sigma)
    return resize_plane(smooth, size[0], size[1])


def estimate_flow(
    prev: GrayFrame,
    next: GrayFrame,
    params: FarnebackParams = FarnebackParams(),
    initial: FlowField | None = None,
) -> FlowField:
    """Dense flow such that ``next(x + d(x)) ~ prev(x)``."""
    a = np.asarray(prev.data, dtype=np.float64)
    b = np.asarray(next.data, dtype=np.float64)
    if a.shape != b.shape:
        raise FlowError(f"frame sizes differ: {a.shape[::-1]} vs {b.shape[::-1]}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise FlowError("input frames contain non-finite values")
    h, w = a.shape
    if min(h, w) < params.poly_n:
        raise FlowError(f"frames {w}x{h} are smaller than poly_n={params.poly_n}")
    if initial is not None and (initial.width, initial.height) != (w, h):
        raise FlowError("initial flow does not match the frame size")

    u = v = None
    for k in range(params.levels - 1, -1, -1):
        scale = params.pyr_scale**k
        lw, lh = int(round(w * scale)), int(round(h * scale))
        if k > 0 and min(lw, lh) < max(_MIN_LEVEL_SIZE, params.poly_n):
            continue
        if u is None:
            if initial is None:
                u = np.zeros((lh, lw))
                v = np.zeros((lh, lw))
            else:
                u = resize_plane(initial.u, lw, lh) * (lw / w)
                v = resize_plane(initial.v, lw, lh) * (lh / h)
        else:
            ph, pw = u.shape
            u = resize_plane(u, lw, lh) * (lw / pw)
            v = resize_plane(v, lw, lh) * (lh / ph)

        r0 = _stack(_expand(_pyramid_level(a, scale, (lw, lh)), params.poly_n, params.poly_sigma))
        r1 = _stack(_expand(_pyramid_level(b, scale, (lw, lh)), params.poly_n, params.poly_sigma))
        for _ in range(params.iterations):
            u, v = _solve(_normal_equations(r0, r1, u, v), params.winsize)

    return FlowField(u, v)


def _hsv_to_rgb(hue_deg: np.ndarray, value: np.ndarray) -> np.ndarray:
    """Full-saturation HSV to RGB; ``value`` in [0, 1], result in [0, 1]."""
    hp = (hue_deg % 360.0) / 60.0
    x = value * (1.0 - np.abs(hp % 2.0 - 1.0))
    zero = np.zeros_like(value)
    sector = np.floor(hp).astype(np.intp) % 6
    choices = [
        (value, x, zero),
        (x, value, zero),
        (zero, value, x),
        (zero, x, value),
        (x, zero, value),
        (value, zero, x),
    ]
    out = np.zeros(value.shape + (3,))
    for s, (r, g, b) in enumerate(choices):
        mask = sector == s
        out[mask, 0] = r[mask]
        out[mask, 1] = g[mask]
        out[mask, 2] = b[mask]
    return out


def flow_hue_value(flow: FlowField):
    """Hue in degrees [0, 360) and min-max normalized magnitude in [0, 1]."""
    hue = np.degrees(np.arctan2(flow.v, flow.u)) % 360.0
    mag = np.hypot(flow.u, flow.v)
    lo, hi = mag.min(), mag.max()
    if hi > lo:
        value = (mag - lo) / (hi - lo)
    else:
        # constant magnitude: full brightness unless the field is zero
        value = np.full_like(mag, 1.0 if hi > 0 else 0.0)
    return hue, value


def flow_to_rgb(flow: FlowField) -> PixelFrame:
    hue, value = flow_hue_value(flow)
    rgb = np.clip(np.rint(_hsv_to_rgb(hue, value) * 255.0), 0, 255).astype(np.uint8)
    return PixelFrame(flow.width, flow.height, rgb)


_FLO_MAGIC = b"PIEH"


def write_flo(flow: FlowField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_FLO_MAGIC)
        fh.write(struct.pack("<ii", flow.width, flow.height))
        fh.write(np.stack([flow.u, flow.v], axis=-1).astype("<f4").tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if raw[:4] != _FLO_MAGIC:
        raise FlowError(f"{path} is not a flow file (bad magic)")
    w, h = struct.unpack("<ii", raw[4:12])
    body = np.frombuffer(raw, dtype="<f4", offset=12)
    if body.size != w * h * 2:
        raise FlowError(f"{path} is truncated")
    uv = body.reshape(h, w, 2).astype(np.float64)
    return FlowField(uv[..., 0].copy(), uv[..., 1].copy())
