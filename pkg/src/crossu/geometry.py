"""Position-map geometry: aspect-ratio ranges, coordinate grids, camera
transforms, and 2D axial rotary embeddings.

Coordinate convention: for a token grid of H x W cells, the h-axis carries
coordinates linspace(-r_h, +r_h, H) and the w-axis linspace(-r_w, +r_w, W),
where r_h * r_w = 1 and r_h / r_w = H / W.  A crop of a grid carries the
identical slice of its coordinate grid, so crops stay consistent with the
full map bit for bit.

All functions here are pure; no shared mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidDimensionError, InvalidTransformError, ShapeError


@dataclass(frozen=True)
class AspectRanges:
    """Axis ranges (r_h, r_w) with r_h * r_w == 1 and r_h / r_w == H / W."""

    r_h: float
    r_w: float


def compute_ranges(height: int, width: int) -> AspectRanges:
    """Closed-form ranges r_h = sqrt(H/W), r_w = sqrt(W/H) for an H x W grid."""
    if height < 1 or width < 1:
        raise InvalidDimensionError(f"grid dims must be >= 1, got {height}x{width}")
    return AspectRanges(math.sqrt(height / width), math.sqrt(width / height))


def _axis_coords(n: int, extent: float) -> np.ndarray:
    # A single-cell axis sits at the midpoint, not at -extent.
    if n == 1:
        return np.zeros(1, dtype=np.float64)
    return np.linspace(-extent, extent, n, dtype=np.float64)


@dataclass(frozen=True)
class PositionMap:
    """Per-cell 2D coordinates, shape [height, width, 2] as (h_coord, w_coord).

    A PositionMap may be a fragment of a larger map (after cropping), in
    which case its coords do not span the full +-range of its own dims.
    """

    coords: np.ndarray

    def __post_init__(self):
        if self.coords.ndim != 3 or self.coords.shape[-1] != 2:
            raise ShapeError(f"coords must be [H, W, 2], got {self.coords.shape}")

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    def slice_window(self, y0: int, x0: int, height: int, width: int) -> "PositionMap":
        """Rectangular sub-map; slicing commutes with construction."""
        if y0 < 0 or x0 < 0 or y0 + height > self.height or x0 + width > self.width:
            raise ShapeError(
                f"window [{y0}:{y0 + height}, {x0}:{x0 + width}] outside "
                f"{self.height}x{self.width} map"
            )
        return PositionMap(self.coords[y0 : y0 + height, x0 : x0 + width].copy())

    def flat(self) -> np.ndarray:
        """Row-major [H*W, 2] view of the coordinates (matches patch order)."""
        return self.coords.reshape(-1, 2)


def make_position_map(height: int, width: int) -> PositionMap:
    """Full symmetric coordinate grid for an uncropped height x width grid."""
    if height < 1 or width < 1:
        raise InvalidDimensionError(f"grid dims must be >= 1, got {height}x{width}")
    ranges = compute_ranges(height, width)
    h = _axis_coords(height, ranges.r_h)
    w = _axis_coords(width, ranges.r_w)
    coords = np.stack(np.meshgrid(h, w, indexing="ij"), axis=-1)
    return PositionMap(coords)


@dataclass(frozen=True)
class CameraTransform:
    """Inference-time pan/zoom applied to a position map.

    zoom > 1 shrinks the visible coordinate span (zoom in, less content);
    zoom < 1 widens it (zoom out).  Shifts are in base coordinate units and
    are applied after the zoom scaling.
    """

    shift_x: float = 0.0
    shift_y: float = 0.0
    zoom: float = 1.0

    def __post_init__(self):
        if not (self.zoom > 0):
            raise InvalidTransformError(f"zoom must be > 0, got {self.zoom}")

    @property
    def is_identity(self) -> bool:
        return self.shift_x == 0.0 and self.shift_y == 0.0 and self.zoom == 1.0


def transform_position_map(pmap: PositionMap, cam: CameraTransform) -> PositionMap:
    """coords' = coords / zoom + (shift_y, shift_x)."""
    coords = pmap.coords / cam.zoom
    coords = coords + np.array([cam.shift_y, cam.shift_x], dtype=np.float64)
    return PositionMap(coords)


def apply_camera(map_spec: tuple[int, int], cam: CameraTransform) -> PositionMap:
    """Camera-transformed full map for a (height, width) grid."""
    height, width = map_spec
    return transform_position_map(make_position_map(height, width), cam)


@dataclass(frozen=True)
class RopeFrequencies:
    """Axial rotary embedding layout for one attention head.

    The first `rotated_fraction` of head_dim is rotated; within that block,
    the leading half of the 2-dim pairs takes its angle from the h
    coordinate and the trailing half from the w coordinate.  The remaining
    feature dims pass through unrotated.  The frequency base follows the
    de-facto standard geometric spacing base**(-2i/d_axis).
    """

    head_dim: int
    rotated_fraction: float = 0.5
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise InvalidDimensionError(f"head_dim must be even, got {self.head_dim}")
        if self.rotated_dims % 4 != 0:
            raise InvalidDimensionError(
                f"rotated dims must be divisible by 4 (two axes, pairs per axis); "
                f"got {self.rotated_dims} from head_dim={self.head_dim}, "
                f"fraction={self.rotated_fraction}"
            )

    @property
    def rotated_dims(self) -> int:
        return int(round(self.head_dim * self.rotated_fraction))

    @property
    def dims_per_axis(self) -> int:
        return self.rotated_dims // 2

    @property
    def pairs_per_axis(self) -> int:
        return self.dims_per_axis // 2

    def axis_freqs(self) -> np.ndarray:
        """Per-pair angular frequencies for one axis, float64."""
        d = self.dims_per_axis
        exponents = np.arange(0, d, 2, dtype=np.float64) / d
        return self.base ** (-exponents)


def rope_angles(positions: np.ndarray, freqs: RopeFrequencies) -> np.ndarray:
    """Per-pair rotation angles for positions [..., 2] -> [..., n_pairs].

    The first pairs_per_axis entries come from the h coordinate, the rest
    from the w coordinate.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[-1] != 2:
        raise ShapeError(f"positions must end in a (h, w) pair, got {positions.shape}")
    w = freqs.axis_freqs()
    h_ang = positions[..., 0:1] * w
    w_ang = positions[..., 1:2] * w
    return np.concatenate([h_ang, w_ang], axis=-1)


def rope_rotate(features: np.ndarray, position, freqs: RopeFrequencies) -> np.ndarray:
    """Rotate the leading feature block of one (or many) tokens.

    features: [..., head_dim]; position: (h, w) or an array broadcastable to
    [..., 2].  Each adjacent 2-dim pair (x1, x2) in the rotated block becomes
    (x1 cos a - x2 sin a, x1 sin a + x2 cos a); the trailing block passes
    through unchanged, so per-pair norms are preserved.
    """
    features = np.asarray(features)
    if features.shape[-1] != freqs.head_dim:
        raise ShapeError(
            f"feature dim {features.shape[-1]} != head_dim {freqs.head_dim}"
        )
    r = freqs.rotated_dims
    lead = features.shape[:-1]
    ang = rope_angles(np.asarray(position, dtype=np.float64), freqs)
    if ang.shape[:-1] not in ((), lead):
        ang = np.broadcast_to(ang, lead + (ang.shape[-1],))
    cos, sin = np.cos(ang), np.sin(ang)
    block = features[..., :r].reshape(lead + (r // 2, 2))
    x1, x2 = block[..., 0], block[..., 1]
    rotated = np.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)
    return np.concatenate(
        [rotated.reshape(lead + (r,)), features[..., r:]], axis=-1
    )
