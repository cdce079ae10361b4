"""Dense feature grids and continuous-coordinate bilinear lookup.

Grid coordinates follow the index convention: valid queries lie in
[0, W-1] x [0, H-1] and integer coordinates return stored values exactly.
Feature maps load from a plain binary format (``.fmap``: H, W, C as
little-endian int32, then float32 values row-major) so no ML framework is
needed; see FORMATS.md.
"""

from __future__ import annotations

import struct

import numpy as np

_HEADER = struct.Struct("<iii")


class OutOfRangeError(ValueError):
    """Query coordinate outside the valid bilinear range."""


class FeatureMap:
    """Immutable H x W x C grid of real values."""

    def __init__(self, data: np.ndarray):
        data = np.array(data, dtype=np.float64, order="C")
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"feature map must be H x W x C, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        data.flags.writeable = False
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __repr__(self) -> str:
        return f"FeatureMap({self.height}x{self.width}x{self.channels})"


def bilinear_nodes(
    x: float, y: float, width: int, height: int
) -> tuple[int, int, int, int, float, float]:
    """Corner indices (x0, x1, y0, y1) and fractional offsets (fx, fy).

    The right/bottom edges fold into the last cell so x == W-1 is valid.
    """
    if not (0.0 <= x <= width - 1 and 0.0 <= y <= height - 1):
        raise OutOfRangeError(
            f"({x}, {y}) outside grid [0, {width - 1}] x [0, {height - 1}]"
        )
    x0 = min(int(x), width - 2) if width > 1 else 0
    y0 = min(int(y), height - 2) if height > 1 else 0
    x1 = min(x0 + 1, width - 1)
    y1 = min(y0 + 1, height - 1)
    return x0, x1, y0, y1, x - x0, y - y0


def bilinear(fmap: FeatureMap, x: float, y: float) -> np.ndarray:
    """4-neighbor bilinear blend; returns a C-vector."""
    x0, x1, y0, y1, fx, fy = bilinear_nodes(x, y, fmap.width, fmap.height)
    z = fmap.data
    return (
        z[y0, x0] * (1 - fx) * (1 - fy)
        + z[y0, x1] * fx * (1 - fy)
        + z[y1, x0] * (1 - fx) * fy
        + z[y1, x1] * fx * fy
    )


def bilinear_grad_xy(fmap: FeatureMap, x: float, y: float) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of the bilinear blend w.r.t. the query point.

    Exact within a cell; on integer lattice lines the one-sided value of the
    containing cell is returned.
    """
    x0, x1, y0, y1, fx, fy = bilinear_nodes(x, y, fmap.width, fmap.height)
    z = fmap.data
    dx = (z[y0, x1] - z[y0, x0]) * (1 - fy) + (z[y1, x1] - z[y1, x0]) * fy
    dy = (z[y1, x0] - z[y0, x0]) * (1 - fx) + (z[y1, x1] - z[y0, x1]) * fx
    return dx, dy


def mask_to_featmap_coords(
    px: int, py: int, image_size: tuple[int, int], fmap: FeatureMap
) -> tuple[float, float]:
    """Map a mask pixel index to the feature grid, aligning pixel centers.

    Linear rescale of centers, clamped into the valid bilinear range (edge
    pixels land at sub-half-pixel coordinates after rescaling).
    """
    width, height = image_size
    gx = (px + 0.5) / width * fmap.width - 0.5
    gy = (py + 0.5) / height * fmap.height - 0.5
    gx = min(max(gx, 0.0), float(fmap.width - 1))
    gy = min(max(gy, 0.0), float(fmap.height - 1))
    return gx, gy


def featmap_coords_from_normalized(
    nx: float, ny: float, fmap: FeatureMap
) -> tuple[float, float]:
    """Same rescale as mask_to_featmap_coords for [0, 1]-normalized coordinates."""
    gx = min(max(nx * fmap.width - 0.5, 0.0), float(fmap.width - 1))
    gy = min(max(ny * fmap.height - 0.5, 0.0), float(fmap.height - 1))
    return gx, gy


def save_fmap(path, fmap: FeatureMap) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(fmap.height, fmap.width, fmap.channels))
        f.write(np.asarray(fmap.data, dtype="<f4").tobytes(order="C"))


def load_fmap(path) -> FeatureMap:
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        h, w, c = _HEADER.unpack(raw)
        if h < 1 or w < 1 or c < 1:
            raise ValueError(f"{path}: bad dimensions {h}x{w}x{c}")
        payload = np.frombuffer(f.read(), dtype="<f4")
    if payload.size != h * w * c:
        raise ValueError(
            f"{path}: expected {h * w * c} values, found {payload.size}"
        )
    return FeatureMap(payload.reshape(h, w, c))


def synth_feature_map(
    height: int, width: int, channels: int, pattern: str = "random", seed: int = 0
) -> FeatureMap:
    """Synthetic maps for tests and fixtures: seeded noise or analytic ramps."""
    if pattern == "random":
        rng = np.random.Generator(np.random.Philox(seed))
        data = rng.uniform(-1.0, 1.0, size=(height, width, channels))
    elif pattern == "ramp-x":
        data = np.broadcast_to(
            np.arange(width, dtype=np.float64)[None, :, None],
            (height, width, channels),
        ).copy()
    elif pattern == "ramp-y":
        data = np.broadcast_to(
            np.arange(height, dtype=np.float64)[:, None, None],
            (height, width, channels),
        ).copy()
    elif pattern == "constant":
        data = np.ones((height, width, channels), dtype=np.float64)
    else:
        raise ValueError(f"unknown pattern: {pattern!r}")
    return FeatureMap(data)
