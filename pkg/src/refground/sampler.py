"""Spatial-aware region feature sampler.

Maps (binary mask, feature map) to a fixed-size region feature: random
positive points inside the mask are looked up bilinearly, then a cascade of
blocks runs farthest point sampling, k-nearest-neighbor grouping, a
neighbor-fusion step, and channelwise max pooling; the surviving point
features are flattened and affinely projected. Every random choice is driven
by named counter-based streams (see FORMATS.md), so outputs are bit-stable
for a fixed seed, and a forward pass records a tape from which exact
reverse-mode gradients are computed for all parameters and the feature map.

Coordinates are normalized to [0, 1]^2 by the image size throughout; the
fusion step sees coordinate offsets and absolute coordinates in those units.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .featmap import FeatureMap
from .geometry import BinaryMask, EmptyMaskError

_PARAMS_HEADER = struct.Struct("<iiii")

# Stream indices of the per-seed random streams (FORMATS.md).
STREAM_POINTS = 0
STREAM_FPS_BASE = 1
STREAM_PARAM_INIT = 100


class TapeError(ValueError):
    """Backward called with a stale or foreign tape."""


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler hyperparameters.

    n_points: points sampled inside the mask (N).
    ratio: per-block downsample factor (r).
    neighbors: group size for the fusion step (k).
    blocks: number of cascaded blocks.
    channels: feature channels per point (C), constant across blocks.
    out_dim: output embedding dimension (D).
    """

    n_points: int = 512
    ratio: int = 4
    neighbors: int = 24
    blocks: int = 2
    channels: int = 8
    out_dim: int = 16

    def __post_init__(self):
        if min(self.n_points, self.ratio, self.neighbors, self.blocks,
               self.channels, self.out_dim) < 1:
            raise ValueError("all sampler dimensions must be positive")
        if self.n_points % self.ratio**self.blocks != 0:
            raise ValueError(
                f"n_points={self.n_points} not divisible by "
                f"ratio^blocks={self.ratio ** self.blocks}"
            )
        if self.neighbors > self.n_points // self.ratio**self.blocks:
            raise ValueError(
                f"neighbors={self.neighbors} exceeds the smallest block output "
                f"{self.n_points // self.ratio ** self.blocks}"
            )

    @property
    def final_points(self) -> int:
        return self.n_points // self.ratio**self.blocks

    @property
    def flat_dim(self) -> int:
        return self.final_points * self.channels


@dataclass(frozen=True)
class BlockParams:
    """One block's linear layers.

    local_w/local_b adapt the relative neighbor offsets, (C+2) -> C;
    fuse_w/fuse_b fuse each adapted offset with the center's feature and
    coordinates, (2C+2) -> C.
    """

    local_w: np.ndarray
    local_b: np.ndarray
    fuse_w: np.ndarray
    fuse_b: np.ndarray


@dataclass(frozen=True)
class SamplerParams:
    blocks: tuple[BlockParams, ...]
    proj_w: np.ndarray
    proj_b: np.ndarray

    def validate_for(self, cfg: SamplerConfig) -> None:
        c = cfg.channels
        if len(self.blocks) != cfg.blocks:
            raise ValueError(f"expected {cfg.blocks} blocks, got {len(self.blocks)}")
        for i, bp in enumerate(self.blocks):
            shapes = {
                "local_w": (bp.local_w.shape, (c, c + 2)),
                "local_b": (bp.local_b.shape, (c,)),
                "fuse_w": (bp.fuse_w.shape, (c, 2 * c + 2)),
                "fuse_b": (bp.fuse_b.shape, (c,)),
            }
            for name, (got, want) in shapes.items():
                if got != want:
                    raise ValueError(f"block {i} {name}: shape {got}, expected {want}")
        if self.proj_w.shape != (cfg.out_dim, cfg.flat_dim):
            raise ValueError(
                f"proj_w: shape {self.proj_w.shape}, expected "
                f"{(cfg.out_dim, cfg.flat_dim)}"
            )
        if self.proj_b.shape != (cfg.out_dim,):
            raise ValueError(f"proj_b: shape {self.proj_b.shape}")
        for arr in self.arrays():
            if not np.all(np.isfinite(arr)):
                raise ValueError("parameters contain non-finite values")

    def arrays(self) -> list[np.ndarray]:
        out = []
        for bp in self.blocks:
            out.extend([bp.local_w, bp.local_b, bp.fuse_w, bp.fuse_b])
        out.extend([self.proj_w, self.proj_b])
        return out


@dataclass(frozen=True)
class PointSet:
    """n points with [0, 1]^2 coordinates and per-point feature vectors."""

    coords: np.ndarray  # (n, 2)
    feats: np.ndarray  # (n, C); C may be 0 before feature lookup

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        feats = np.asarray(self.feats, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must be (n, 2), got {coords.shape}")
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ValueError(f"feats must be (n, C), got {feats.shape}")
        if coords.size and (coords.min() < 0.0 or coords.max() > 1.0):
            raise ValueError("coordinates must lie in [0, 1]^2")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)

    def __len__(self) -> int:
        return self.coords.shape[0]


def init_params(cfg: SamplerConfig, seed: int = 0) -> SamplerParams:
    """Seeded uniform(-a, a) with a = fan_in ** -0.5, layer by layer."""
    rng = _stream(seed, STREAM_PARAM_INIT)
    c = cfg.channels

    def layer(out_dim, in_dim):
        a = in_dim**-0.5
        return (
            rng.uniform(-a, a, size=(out_dim, in_dim)),
            rng.uniform(-a, a, size=out_dim),
        )

    blocks = []
    for _ in range(cfg.blocks):
        local_w, local_b = layer(c, c + 2)
        fuse_w, fuse_b = layer(c, 2 * c + 2)
        blocks.append(BlockParams(local_w, local_b, fuse_w, fuse_b))
    proj_w, proj_b = layer(cfg.out_dim, cfg.flat_dim)
    return SamplerParams(tuple(blocks), proj_w, proj_b)


def sample_positive_points(mask: BinaryMask, n: int, seed: int) -> PointSet:
    """Draw n points uniformly over the mask's set-pixel centers.

    Sampling is without replacement when the mask has at least n pixels,
    with replacement otherwise.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    ys, xs = np.nonzero(mask.data)
    pop = len(xs)
    if pop == 0:
        raise EmptyMaskError("cannot sample points from an empty mask")
    rng = _stream(seed, STREAM_POINTS)
    picks = rng.choice(pop, size=n, replace=pop < n)
    coords = np.stack(
        [(xs[picks] + 0.5) / mask.width, (ys[picks] + 0.5) / mask.height], axis=1
    )
    return PointSet(coords, np.zeros((n, 0)))


def fps(points: PointSet, m: int, seed: int) -> np.ndarray:
    """Greedy max-min farthest point sampling; returns m indices.

    The first index is drawn from the seeded stream; each following index
    maximizes the distance to the already selected set, ties broken by
    lowest index.
    """
    n = len(points)
    if m > n:
        raise ValueError(f"cannot select {m} of {n} points")
    rng = _stream(seed, STREAM_FPS_BASE)
    first = int(rng.integers(n))
    return _fps_from(points.coords, m, first)


def _fps_from(coords: np.ndarray, m: int, first: int) -> np.ndarray:
    selected = np.empty(m, dtype=np.int64)
    selected[0] = first
    # Squared distances order identically; -1 marks selected points.
    dist = np.sum((coords - coords[first]) ** 2, axis=1)
    dist[first] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        selected[i] = nxt
        np.minimum(dist, np.sum((coords - coords[nxt]) ** 2, axis=1), out=dist)
        dist[nxt] = -1.0
    return selected


def knn(points: PointSet, query_index: int, k: int) -> np.ndarray:
    """k nearest indices to the query (itself included), ascending distance,
    ties by lowest index."""
    n = len(points)
    if k > n:
        raise ValueError(f"cannot take {k} neighbors from {n} points")
    d = np.sum((points.coords - points.coords[query_index]) ** 2, axis=1)
    return np.argsort(d, kind="stable")[:k]


def _knn_groups(coords: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """(m, k) neighbor indices into coords for each center index."""
    diff = coords[centers][:, None, :] - coords[None, :, :]
    d = np.sum(diff**2, axis=2)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


@dataclass(frozen=True)
class BlockTape:
    centers: np.ndarray  # (m,)
    neigh: np.ndarray  # (m, k)
    rel: np.ndarray  # (m, k, C+2) input to the local layer
    fuse_in: np.ndarray  # (m, k, 2C+2) input to the fusion layer
    argmax: np.ndarray  # (m, C) pooled neighbor slot per channel
    n_in: int


def _fuse(center_coords, center_feats, neigh_coords, neigh_feats, params):
    """Fusion and pooling internals; also returns the layer inputs for the tape."""
    m, k = neigh_coords.shape[:2]
    rel = np.concatenate(
        [
            neigh_feats - center_feats[:, None, :],
            neigh_coords - center_coords[:, None, :],
        ],
        axis=2,
    )
    local = rel @ params.local_w.T + params.local_b
    fuse_in = np.concatenate(
        [
            local,
            np.broadcast_to(center_feats[:, None, :], local.shape),
            np.broadcast_to(center_coords[:, None, :], (m, k, 2)),
        ],
        axis=2,
    )
    fused = fuse_in @ params.fuse_w.T + params.fuse_b
    argmax = fused.argmax(axis=1)
    pooled = np.take_along_axis(fused, argmax[:, None, :], axis=1)[:, 0, :]
    return fused, pooled, argmax, rel, fuse_in


def fuse_neighbor_groups(
    center_coords: np.ndarray,
    center_feats: np.ndarray,
    neigh_coords: np.ndarray,
    neigh_feats: np.ndarray,
    params: BlockParams,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fusion and pooling for explicit groups.

    For center i with neighbor j: the feature and coordinate offsets are
    concatenated and passed through the local layer; its output is
    concatenated with the center's feature and coordinates and passed through
    the fusion layer, giving the fused value h[i, j]. Channelwise max over
    the k fused values (first slot wins ties) yields the pooled feature.

    Returns (fused (m, k, C), pooled (m, C), argmax (m, C)).
    """
    fused, pooled, argmax, _, _ = _fuse(
        np.asarray(center_coords, dtype=np.float64),
        np.asarray(center_feats, dtype=np.float64),
        np.asarray(neigh_coords, dtype=np.float64),
        np.asarray(neigh_feats, dtype=np.float64),
        params,
    )
    return fused, pooled, argmax


def block_forward(
    points: PointSet,
    params: BlockParams,
    ratio: int,
    k: int,
    seed: int,
    block_index: int = 0,
) -> tuple[PointSet, BlockTape]:
    """One sampling/gathering/pooling block: n points in, n / ratio out.

    Centers come from farthest point sampling; each center gathers its k
    nearest neighbors from the block's full input set.
    """
    n = len(points)
    if n % ratio != 0:
        raise ValueError(f"{n} points not divisible by ratio {ratio}")
    m = n // ratio
    if k > n:
        raise ValueError(f"neighbors k={k} exceeds pool size {n}")
    rng = _stream(seed, STREAM_FPS_BASE + block_index)
    centers = _fps_from(points.coords, m, int(rng.integers(n)))
    neigh = _knn_groups(points.coords, centers, k)

    center_coords = points.coords[centers]
    _, pooled, argmax, rel, fuse_in = _fuse(
        center_coords,
        points.feats[centers],
        points.coords[neigh],
        points.feats[neigh],
        params,
    )
    out = PointSet(center_coords.copy(), pooled)
    tape = BlockTape(centers, neigh, rel, fuse_in, argmax, n)
    return out, tape


def _block_backward(
    tape: BlockTape, params: BlockParams, g_out: np.ndarray, channels: int
):
    """Gradients of one block; returns (param grads, input-feature grads)."""
    m, k, _ = tape.rel.shape
    c = channels
    g_fused = np.zeros((m, k, c))
    np.put_along_axis(g_fused, tape.argmax[:, None, :], g_out[:, None, :], axis=1)

    g_fuse_b = g_fused.sum(axis=(0, 1))
    g_fuse_w = np.einsum("mkc,mkd->cd", g_fused, tape.fuse_in)
    g_fuse_in = g_fused @ params.fuse_w

    g_local = g_fuse_in[:, :, :c]
    g_center_direct = g_fuse_in[:, :, c : 2 * c].sum(axis=1)

    g_local_b = g_local.sum(axis=(0, 1))
    g_local_w = np.einsum("mkc,mkd->cd", g_local, tape.rel)
    g_rel_feat = (g_local @ params.local_w)[:, :, :c]

    g_in = np.zeros((tape.n_in, c))
    np.add.at(g_in, tape.neigh, g_rel_feat)
    np.add.at(g_in, tape.centers, g_center_direct - g_rel_feat.sum(axis=1))
    grads = BlockParams(g_local_w, g_local_b, g_fuse_w, g_fuse_b)
    return grads, g_in


@dataclass(frozen=True)
class SamplerTape:
    cfg: SamplerConfig
    params: SamplerParams
    fmap_shape: tuple[int, int, int]
    corner_idx: np.ndarray  # (N, 4, 2) as (y, x) per bilinear corner
    corner_w: np.ndarray  # (N, 4)
    blocks: tuple[BlockTape, ...]
    flat: np.ndarray  # (flat_dim,)
    point_coords: np.ndarray  # (N, 2) initial sampled points
    final_coords: np.ndarray  # (final_points, 2) surviving centers


@dataclass(frozen=True)
class SamplerGrads:
    blocks: tuple[BlockParams, ...]
    proj_w: np.ndarray
    proj_b: np.ndarray
    featmap: np.ndarray  # (H, W, C)


def _bilinear_gather(fmap: FeatureMap, coords: np.ndarray):
    """Vectorized bilinear lookup at normalized coordinates.

    Returns (features (n, C), corner indices (n, 4, 2), corner weights (n, 4)).
    """
    h, w = fmap.height, fmap.width
    gx = np.clip(coords[:, 0] * w - 0.5, 0.0, w - 1.0)
    gy = np.clip(coords[:, 1] * h - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(gx.astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(gy.astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = gx - x0
    fy = gy - y0
    weights = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
    )
    idx = np.stack(
        [
            np.stack([y0, x0], axis=1),
            np.stack([y0, x1], axis=1),
            np.stack([y1, x0], axis=1),
            np.stack([y1, x1], axis=1),
        ],
        axis=1,
    )
    z = fmap.data
    feats = (
        z[y0, x0] * weights[:, 0:1]
        + z[y0, x1] * weights[:, 1:2]
        + z[y1, x0] * weights[:, 2:3]
        + z[y1, x1] * weights[:, 3:4]
    )
    return feats, idx, weights


def sampler_forward(
    mask: BinaryMask,
    fmap: FeatureMap,
    cfg: SamplerConfig,
    params: SamplerParams,
    seed: int,
) -> tuple[np.ndarray, SamplerTape]:
    """Full forward pass; returns the region feature and a gradient tape."""
    params.validate_for(cfg)
    pts = sample_positive_points(mask, cfg.n_points, seed)
    feats, corner_idx, corner_w = _bilinear_gather(fmap, pts.coords)
    if feats.shape[1] != cfg.channels:
        raise ValueError(
            f"feature map has {feats.shape[1]} channels, config says {cfg.channels}"
        )
    current = PointSet(pts.coords, feats)
    tapes = []
    for b in range(cfg.blocks):
        current, tape = block_forward(
            current, params.blocks[b], cfg.ratio, cfg.neighbors, seed, block_index=b
        )
        tapes.append(tape)
    flat = current.feats.reshape(-1)
    out = params.proj_w @ flat + params.proj_b
    tape = SamplerTape(
        cfg=cfg,
        params=params,
        fmap_shape=fmap.data.shape,
        corner_idx=corner_idx,
        corner_w=corner_w,
        blocks=tuple(tapes),
        flat=flat,
        point_coords=pts.coords,
        final_coords=current.coords,
    )
    return out, tape


def sampler_backward(tape: SamplerTape, upstream_grad: np.ndarray) -> SamplerGrads:
    """Reverse-mode gradients with all sampling and pooling choices held
    fixed as recorded on the tape."""
    if not isinstance(tape, SamplerTape) or len(tape.blocks) != tape.cfg.blocks:
        raise TapeError("tape does not match a forward pass of this sampler")
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    if upstream.shape != (tape.cfg.out_dim,):
        raise TapeError(
            f"upstream gradient has shape {upstream.shape}, "
            f"expected ({tape.cfg.out_dim},)"
        )
    if tape.flat.shape != (tape.cfg.flat_dim,):
        raise TapeError("tape flatten size disagrees with its config")

    g_proj_b = upstream.copy()
    g_proj_w = np.outer(upstream, tape.flat)
    g = (tape.params.proj_w.T @ upstream).reshape(
        tape.cfg.final_points, tape.cfg.channels
    )

    block_grads: list[BlockParams] = []
    for b in range(tape.cfg.blocks - 1, -1, -1):
        grads, g = _block_backward(
            tape.blocks[b], tape.params.blocks[b], g, tape.cfg.channels
        )
        block_grads.append(grads)
    block_grads.reverse()

    g_fmap = np.zeros(tape.fmap_shape)
    ys = tape.corner_idx[:, :, 0].reshape(-1)
    xs = tape.corner_idx[:, :, 1].reshape(-1)
    contrib = (tape.corner_w[:, :, None] * g[:, None, :]).reshape(-1, tape.cfg.channels)
    np.add.at(g_fmap, (ys, xs), contrib)
    return SamplerGrads(tuple(block_grads), g_proj_w, g_proj_b, g_fmap)


def save_params(path, params: SamplerParams, cfg: SamplerConfig) -> None:
    params.validate_for(cfg)
    with open(path, "wb") as f:
        f.write(
            _PARAMS_HEADER.pack(cfg.blocks, cfg.channels, cfg.flat_dim, cfg.out_dim)
        )
        for arr in params.arrays():
            f.write(np.asarray(arr, dtype="<f4").tobytes(order="C"))


def load_params(path) -> tuple[SamplerParams, dict]:
    """Load a .sparams file; returns the params and the shape header fields."""
    with open(path, "rb") as f:
        raw = f.read(_PARAMS_HEADER.size)
        if len(raw) != _PARAMS_HEADER.size:
            raise ValueError(f"{path}: truncated header")
        n_blocks, c, flat_dim, d = _PARAMS_HEADER.unpack(raw)
        if min(n_blocks, c, flat_dim, d) < 1:
            raise ValueError(f"{path}: bad header {(n_blocks, c, flat_dim, d)}")
        payload = np.frombuffer(f.read(), dtype="<f4").astype(np.float64)

    shapes = []
    for _ in range(n_blocks):
        shapes.extend([(c, c + 2), (c,), (c, 2 * c + 2), (c,)])
    shapes.extend([(d, flat_dim), (d,)])
    total = sum(int(np.prod(s)) for s in shapes)
    if payload.size != total:
        raise ValueError(f"{path}: expected {total} values, found {payload.size}")

    arrays = []
    offset = 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(payload[offset : offset + n].reshape(s))
        offset += n
    blocks = tuple(
        BlockParams(*arrays[i * 4 : i * 4 + 4]) for i in range(n_blocks)
    )
    params = SamplerParams(blocks, arrays[-2], arrays[-1])
    header = {"blocks": n_blocks, "channels": c, "flat_dim": flat_dim, "out_dim": d}
    return params, header
