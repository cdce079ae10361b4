"""Discrete coordinate bins and the hybrid region-token text encoding.

Coordinates quantize into n_bins relative bins (default 1000), so the same
relative position maps to the same bin at any image resolution. A region is
rendered for prompts as ``name [b1, b2, b3, b4] <SPE>`` where ``<SPE>`` is a
literal placeholder later replaced by the sampler's continuous feature.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import geometry
from .geometry import Box, Point, Region

DEFAULT_N_BINS = 1000
FEATURE_PLACEHOLDER = "<SPE>"


class OutOfRangeError(ValueError):
    """Coordinate or bin index outside its valid range."""


@dataclass(frozen=True)
class QuantizerConfig:
    n_bins: int = DEFAULT_N_BINS

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {self.n_bins}")


def quantize(coord: float, extent: float, cfg: QuantizerConfig) -> int:
    """Map a pixel coordinate in [0, extent] to a bin in [0, n_bins - 1].

    Floor-based binning with a right-edge clamp: bins partition [0, extent)
    evenly and coord == extent lands in the last bin.
    """
    if extent <= 0:
        raise OutOfRangeError(f"extent must be positive, got {extent}")
    if not (0.0 <= coord <= extent):
        raise OutOfRangeError(f"coordinate {coord} outside [0, {extent}]")
    b = int(coord / extent * cfg.n_bins)
    return min(max(b, 0), cfg.n_bins - 1)


def dequantize(bin_index: int, extent: float, cfg: QuantizerConfig) -> float:
    """Bin center in pixel units: (bin + 0.5) * extent / n_bins."""
    if not (0 <= bin_index <= cfg.n_bins - 1):
        raise OutOfRangeError(
            f"bin {bin_index} outside [0, {cfg.n_bins - 1}]"
        )
    return (bin_index + 0.5) * extent / cfg.n_bins


@dataclass(frozen=True)
class HybridRegionToken:
    """A region name plus 2 (point) or 4 (box / free-form) coordinate bins.

    The rendered text carries the literal feature placeholder; the continuous
    feature itself is produced separately by the sampler.
    """

    region_name: str
    coord_bins: tuple[int, ...]
    n_bins: int = DEFAULT_N_BINS

    def __post_init__(self):
        if not self.region_name:
            raise ValueError("region name must be non-empty")
        bins = tuple(int(b) for b in self.coord_bins)
        if len(bins) not in (2, 4):
            raise ValueError(f"expected 2 or 4 bins, got {len(bins)}")
        if any(not 0 <= b < self.n_bins for b in bins):
            raise OutOfRangeError(f"bins {bins} outside [0, {self.n_bins - 1}]")
        if len(bins) == 4 and (bins[0] > bins[2] or bins[1] > bins[3]):
            raise ValueError(f"bins {bins} violate min <= max per axis")
        object.__setattr__(self, "coord_bins", bins)

    def render(self, include_feature: bool = True) -> str:
        coords = render_coords(self.coord_bins)
        if include_feature:
            return f"{self.region_name} {coords} {FEATURE_PLACEHOLDER}"
        return f"{self.region_name} {coords}"


def render_coords(bins) -> str:
    """Render bins as ``[b1, b2, ...]`` with the exact separators used in prompts."""
    return "[" + ", ".join(str(int(b)) for b in bins) + "]"


def region_bins(
    region: Region, image_size: tuple[int, int], cfg: QuantizerConfig
) -> tuple[int, ...]:
    """Quantized coordinates of a region: (x, y) bins for a point, else the
    4 bins of its rasterization's bounding box. x quantizes against width,
    y against height.

    The bounding box is taken as the pixel hull (max index + 1 per axis), so
    an axis-aligned box recovers its own coordinates: Box(100, 50, 200, 300)
    on a 1000 x 1000 image encodes to bins (100, 50, 200, 300), and bins stay
    resolution-invariant under uniform scaling.
    """
    width, height = image_size
    if isinstance(region, Point):
        return (quantize(region.x, width, cfg), quantize(region.y, height, cfg))
    bbox = geometry.bounding_box(geometry.rasterize(region, image_size))
    return (
        quantize(bbox.x_min, width, cfg),
        quantize(bbox.y_min, height, cfg),
        quantize(bbox.x_max + 1.0, width, cfg),
        quantize(bbox.y_max + 1.0, height, cfg),
    )


def encode_region_text(
    name: str,
    region: Region,
    image_size: tuple[int, int],
    cfg: QuantizerConfig = QuantizerConfig(),
    include_feature: bool = True,
) -> str:
    """Render a region reference like ``a cat [100, 50, 200, 300] <SPE>``.

    Callers substitute "region" or "area" for the name when it is unknown.
    """
    token = HybridRegionToken(name, region_bins(region, image_size, cfg), cfg.n_bins)
    return token.render(include_feature=include_feature)


def dequantize_box(
    bins: tuple[int, int, int, int], image_size: tuple[int, int], cfg: QuantizerConfig
) -> Box:
    """Box in pixel units from 4 coordinate bins (bin centers per axis)."""
    width, height = image_size
    return Box(
        dequantize(bins[0], width, cfg),
        dequantize(bins[1], height, cfg),
        dequantize(bins[2], width, cfg),
        dequantize(bins[3], height, cfg),
    )
