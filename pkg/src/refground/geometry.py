"""Region shapes, binary-mask rasterization, and box geometry.

A region is one of five shapes (point, box, polygon, scribble, mask), all in
continuous pixel units of a stated image size. Rasterization uses one pixel
membership rule everywhere: a pixel belongs to a region iff its center
(i + 0.5, j + 0.5) lies inside the continuous shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_POINT_RADIUS = 5.0
DEFAULT_STROKE_WIDTH = 3.0


class OutOfBoundsError(ValueError):
    """Region coordinates exceed the stated image bounds."""


class DegenerateRegionError(ValueError):
    """Region is structurally invalid (e.g. polygon with < 3 vertices)."""


class SizeMismatchError(ValueError):
    """Mask-variant grid dimensions differ from the stated image size."""


class EmptyMaskError(ValueError):
    """Operation requires at least one set pixel."""


@dataclass(frozen=True)
class Point:
    """A point with an implicit circular extent (default radius 5 px)."""

    x: float
    y: float
    radius: float = DEFAULT_POINT_RADIUS


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise DegenerateRegionError(
                f"box min must not exceed max: {self.as_tuple()}"
            )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class Polygon:
    """Closed polygon, not necessarily convex; filled by the even-odd rule."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise DegenerateRegionError(
                f"polygon needs >= 3 vertices, got {len(self.vertices)}"
            )
        object.__setattr__(
            self, "vertices", tuple((float(x), float(y)) for x, y in self.vertices)
        )


@dataclass(frozen=True)
class Scribble:
    """One or more polyline strokes dilated to a stroke width in pixels."""

    strokes: tuple[tuple[tuple[float, float], ...], ...]
    stroke_width: float = DEFAULT_STROKE_WIDTH

    def __post_init__(self):
        if not self.strokes or any(len(s) == 0 for s in self.strokes):
            raise DegenerateRegionError("scribble needs at least one stroke point")
        object.__setattr__(
            self,
            "strokes",
            tuple(tuple((float(x), float(y)) for x, y in s) for s in self.strokes),
        )


class BinaryMask:
    """Immutable H x W bit grid. Row y, column x; mask.data[y, x]."""

    def __init__(self, data: np.ndarray):
        data = np.array(data, dtype=bool, order="C")
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"mask grid must be 2D and non-empty, got {data.shape}")
        data.flags.writeable = False
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def popcount(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"BinaryMask({self.width}x{self.height}, popcount={self.popcount})"


@dataclass(frozen=True)
class MaskRegion:
    """A region given directly as a binary mask at image resolution."""

    mask: BinaryMask


Region = Point | Box | Polygon | Scribble | MaskRegion


def _check_bounds(points, width: float, height: float) -> None:
    for x, y in points:
        if not (0.0 <= x <= width and 0.0 <= y <= height):
            raise OutOfBoundsError(
                f"coordinate ({x}, {y}) outside image [0, {width}] x [0, {height}]"
            )


def _pixel_window(lo: float, hi: float, n: int) -> tuple[int, int]:
    """Integer pixel range whose centers could fall in [lo, hi], clamped."""
    a = max(int(math.floor(lo - 0.5)), 0)
    b = min(int(math.ceil(hi + 0.5)), n - 1)
    return a, b


def _fill_disk(grid: np.ndarray, cx: float, cy: float, radius: float) -> None:
    h, w = grid.shape
    x0, x1 = _pixel_window(cx - radius, cx + radius, w)
    y0, y1 = _pixel_window(cy - radius, cy + radius, h)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1) + 0.5
    ys = np.arange(y0, y1 + 1) + 0.5
    d2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
    grid[y0 : y1 + 1, x0 : x1 + 1] |= d2 <= radius * radius


def _fill_box(grid: np.ndarray, box: Box) -> None:
    h, w = grid.shape
    # Smallest x with x + 0.5 >= x_min, largest x with x + 0.5 <= x_max.
    x0 = int(math.ceil(box.x_min - 0.5))
    x1 = int(math.floor(box.x_max - 0.5))
    y0 = int(math.ceil(box.y_min - 0.5))
    y1 = int(math.floor(box.y_max - 0.5))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w - 1), min(y1, h - 1)
    if x0 <= x1 and y0 <= y1:
        grid[y0 : y1 + 1, x0 : x1 + 1] = True
    else:
        # Degenerate or sub-pixel box: mark the pixel under the min corner.
        px = min(int(math.floor(box.x_min)), w - 1)
        py = min(int(math.floor(box.y_min)), h - 1)
        grid[py, px] = True


def _fill_polygon(grid: np.ndarray, vertices) -> None:
    """Scanline even-odd fill over pixel centers.

    For each row, horizontal-line intersections with non-horizontal edges are
    paired left to right; centers in [left, right) are set, matching the
    crossing-number rule point by point. The half-open vertex rule keeps the
    intersection count even.
    """
    h, w = grid.shape
    edges = []
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        if y1 != y2:
            edges.append((x1, y1, x2, y2))
    if not edges:
        return
    ymin = min(min(e[1], e[3]) for e in edges)
    ymax = max(max(e[1], e[3]) for e in edges)
    j0, j1 = _pixel_window(ymin, ymax, h)
    for j in range(j0, j1 + 1):
        yc = j + 0.5
        xs = []
        for x1, y1, x2, y2 in edges:
            if (y1 > yc) != (y2 > yc):
                xs.append(x1 + (yc - y1) * (x2 - x1) / (y2 - y1))
        if not xs:
            continue
        xs.sort()
        for a, b in zip(xs[0::2], xs[1::2]):
            i0 = max(int(math.ceil(a - 0.5)), 0)
            i1 = min(int(math.ceil(b - 0.5)) - 1, w - 1)
            if i0 <= i1:
                grid[j, i0 : i1 + 1] = True


def _fill_segment(grid: np.ndarray, p, q, radius: float) -> None:
    """Set pixels whose centers lie within `radius` of segment p-q."""
    h, w = grid.shape
    px, py = p
    qx, qy = q
    x0, x1 = _pixel_window(min(px, qx) - radius, max(px, qx) + radius, w)
    y0, y1 = _pixel_window(min(py, qy) - radius, max(py, qy) + radius, h)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1) + 0.5
    ys = np.arange(y0, y1 + 1) + 0.5
    cx, cy = np.meshgrid(xs, ys)
    dx, dy = qx - px, qy - py
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        d2 = (cx - px) ** 2 + (cy - py) ** 2
    else:
        t = np.clip(((cx - px) * dx + (cy - py) * dy) / seg2, 0.0, 1.0)
        d2 = (cx - (px + t * dx)) ** 2 + (cy - (py + t * dy)) ** 2
    grid[y0 : y1 + 1, x0 : x1 + 1] |= d2 <= radius * radius


def rasterize(region: Region, image_size: tuple[int, int]) -> BinaryMask:
    """Rasterize a region to a binary mask of the stated image size.

    Args:
        region: any region variant; coordinates must lie inside
            [0, width] x [0, height] (no clamping tolerance).
        image_size: (width, height) in pixels.

    Returns:
        BinaryMask of exactly (height, width) with 1 inside the region.

    Raises:
        OutOfBoundsError: coordinates exceed the image.
        SizeMismatchError: mask-variant dims differ from image_size.
        DegenerateRegionError: structurally invalid region.
    """
    width, height = int(image_size[0]), int(image_size[1])
    if width < 1 or height < 1:
        raise ValueError(f"image size must be positive, got {image_size}")
    grid = np.zeros((height, width), dtype=bool)

    if isinstance(region, Point):
        _check_bounds([(region.x, region.y)], width, height)
        _fill_disk(grid, region.x, region.y, region.radius)
    elif isinstance(region, Box):
        _check_bounds(
            [(region.x_min, region.y_min), (region.x_max, region.y_max)],
            width,
            height,
        )
        _fill_box(grid, region)
    elif isinstance(region, Polygon):
        _check_bounds(region.vertices, width, height)
        _fill_polygon(grid, region.vertices)
    elif isinstance(region, Scribble):
        for stroke in region.strokes:
            _check_bounds(stroke, width, height)
        r = region.stroke_width / 2.0
        for stroke in region.strokes:
            if len(stroke) == 1:
                _fill_segment(grid, stroke[0], stroke[0], r)
            for p, q in zip(stroke[:-1], stroke[1:]):
                _fill_segment(grid, p, q, r)
    elif isinstance(region, MaskRegion):
        m = region.mask
        if (m.width, m.height) != (width, height):
            raise SizeMismatchError(
                f"mask is {m.width}x{m.height}, image is {width}x{height}"
            )
        return BinaryMask(m.data.copy())
    else:
        raise TypeError(f"not a region: {type(region).__name__}")

    return BinaryMask(grid)


def bounding_box(mask: BinaryMask) -> Box:
    """Tightest box over all set pixels, in integer pixel-index coordinates."""
    ys, xs = np.nonzero(mask.data)
    if len(xs) == 0:
        raise EmptyMaskError("mask has no set pixels")
    return Box(float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))


def iou(a: Box, b: Box) -> float:
    """Intersection over union with continuous-coordinate areas.

    Two zero-area boxes have IoU 1 when identical, else 0.
    """
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 1.0 if a.as_tuple() == b.as_tuple() else 0.0
    return inter / union


# --- JSON serialization (field names fixed in FORMATS.md) ---


def rle_encode(mask: BinaryMask) -> list[list[int]]:
    """Per-row run-length encoding: flat [start, length, ...] pairs of 1-runs."""
    rows = []
    for row in mask.data:
        runs: list[int] = []
        padded = np.diff(np.concatenate(([0], row.view(np.int8), [0])))
        starts = np.nonzero(padded == 1)[0]
        ends = np.nonzero(padded == -1)[0]
        for s, e in zip(starts, ends):
            runs.extend((int(s), int(e - s)))
        rows.append(runs)
    return rows


def rle_decode(rows: list[list[int]], width: int, height: int) -> BinaryMask:
    if len(rows) != height:
        raise ValueError(f"expected {height} RLE rows, got {len(rows)}")
    grid = np.zeros((height, width), dtype=bool)
    for y, runs in enumerate(rows):
        if len(runs) % 2 != 0:
            raise ValueError(f"RLE row {y} has odd length")
        for s, n in zip(runs[0::2], runs[1::2]):
            if s < 0 or n < 0 or s + n > width:
                raise ValueError(f"RLE run ({s}, {n}) exceeds row width {width}")
            grid[y, s : s + n] = True
    return BinaryMask(grid)


def mask_to_json(mask: BinaryMask) -> dict:
    return {"width": mask.width, "height": mask.height, "rows": rle_encode(mask)}


def mask_from_json(obj: dict) -> BinaryMask:
    return rle_decode(obj["rows"], int(obj["width"]), int(obj["height"]))


def region_to_json(region: Region) -> dict:
    if isinstance(region, Point):
        return {"type": "point", "x": region.x, "y": region.y, "radius": region.radius}
    if isinstance(region, Box):
        return {
            "type": "box",
            "x_min": region.x_min,
            "y_min": region.y_min,
            "x_max": region.x_max,
            "y_max": region.y_max,
        }
    if isinstance(region, Polygon):
        return {"type": "polygon", "vertices": [list(v) for v in region.vertices]}
    if isinstance(region, Scribble):
        return {
            "type": "scribble",
            "strokes": [[list(p) for p in s] for s in region.strokes],
            "stroke_width": region.stroke_width,
        }
    if isinstance(region, MaskRegion):
        return {"type": "mask", **mask_to_json(region.mask)}
    raise TypeError(f"not a region: {type(region).__name__}")


def region_from_json(obj: dict) -> Region:
    kind = obj.get("type")
    if kind == "point":
        return Point(
            float(obj["x"]),
            float(obj["y"]),
            float(obj.get("radius", DEFAULT_POINT_RADIUS)),
        )
    if kind == "box":
        return Box(
            float(obj["x_min"]),
            float(obj["y_min"]),
            float(obj["x_max"]),
            float(obj["y_max"]),
        )
    if kind == "polygon":
        return Polygon(tuple((float(x), float(y)) for x, y in obj["vertices"]))
    if kind == "scribble":
        return Scribble(
            tuple(tuple((float(x), float(y)) for x, y in s) for s in obj["strokes"]),
            float(obj.get("stroke_width", DEFAULT_STROKE_WIDTH)),
        )
    if kind == "mask":
        return MaskRegion(mask_from_json(obj))
    raise ValueError(f"unknown region type: {kind!r}")
