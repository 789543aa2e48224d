from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .camera_model import (
    FisheyeParams,
    VirtualPinhole,
    forward_map_masked,
    require_monotonic,
    unproject_masked,
)
from .errors import SizeMismatchError
from .rasters import ImageBuffer, LineMap


@dataclass
class RemapGrid:
    """
    Per-output-pixel source coordinates. map_x/map_y have the output raster's
    shape; source_size is (width, height) of the raster they index into.
    """

    map_x: np.ndarray
    map_y: np.ndarray
    valid: np.ndarray
    source_size: Tuple[int, int]

    def __post_init__(self):
        self.map_x = np.asarray(self.map_x, dtype=np.float64)
        self.map_y = np.asarray(self.map_y, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.map_x.shape == self.map_y.shape == self.valid.shape):
            raise SizeMismatchError("Remap planes must share one shape")
        self.source_size = (int(self.source_size[0]), int(self.source_size[1]))
        width, height = self.source_size
        self.valid = (
            self.valid
            & np.isfinite(self.map_x)
            & np.isfinite(self.map_y)
            & (self.map_x >= 0)
            & (self.map_x <= width - 1)
            & (self.map_y >= 0)
            & (self.map_y <= height - 1)
        )

    @property
    def height(self) -> int:
        return self.map_x.shape[0]

    @property
    def width(self) -> int:
        return self.map_x.shape[1]

    @classmethod
    def identity(cls, width: int, height: int) -> "RemapGrid":
        xs, ys = _pixel_grid(width, height)
        return cls(xs, ys, np.ones((height, width), dtype=bool), (width, height))


class RectifiedPoints(NamedTuple):
    xy: np.ndarray
    valid: np.ndarray


def _pixel_grid(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(
        np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)
    )


def sample_bilinear(
    data: np.ndarray, valid: np.ndarray, grid: RemapGrid
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bilinear lookup of an H x W x C array at the grid coordinates. An output
    pixel is valid only if the grid entry is valid and all four neighbours are.
    """
    height, width = valid.shape
    if grid.source_size != (width, height):
        raise SizeMismatchError(
            f"Grid indexes a {grid.source_size} raster, got {(width, height)}"
        )

    mx = np.where(grid.valid, grid.map_x, 0.0)
    my = np.where(grid.valid, grid.map_y, 0.0)
    x0 = np.clip(np.floor(mx).astype(np.intp), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(my).astype(np.intp), 0, max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = (mx - x0)[:, :, None]
    fy = (my - y0)[:, :, None]

    top = (1.0 - fx) * data[y0, x0] + fx * data[y0, x1]
    bottom = (1.0 - fx) * data[y1, x0] + fx * data[y1, x1]
    out = (1.0 - fy) * top + fy * bottom

    out_valid = grid.valid & valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]
    return np.where(out_valid[:, :, None], out, 0.0), out_valid


def build_remap(
    params: FisheyeParams,
    pinhole: VirtualPinhole,
    source_size: Optional[Tuple[int, int]] = None,
) -> RemapGrid:
    """Grid[y, x] = forward_map((x, y)): where each rectified pixel reads the fisheye image"""
    require_monotonic(params)
    xs, ys = _pixel_grid(pinhole.width, pinhole.height)
    u, v, valid = forward_map_masked(xs, ys, params, pinhole)
    if source_size is None:
        source_size = (pinhole.width, pinhole.height)
    return RemapGrid(u, v, valid, source_size)


def build_distort_remap(
    params: FisheyeParams,
    pinhole: VirtualPinhole,
    size: Optional[Tuple[int, int]] = None,
) -> RemapGrid:
    """
    Inverse of build_remap: for every fisheye pixel of a (width, height)
    raster, the perspective pixel x = f*tan(theta)*(cos phi, sin phi) + centre.
    """
    if size is None:
        size = (pinhole.width, pinhole.height)
    us, vs = _pixel_grid(*size)
    theta, phi, valid = unproject_masked(us, vs, params)
    rho = pinhole.f * np.tan(theta)
    x = rho * np.cos(phi) + pinhole.cx
    y = rho * np.sin(phi) + pinhole.cy
    return RemapGrid(x, y, valid, (pinhole.width, pinhole.height))


def rectify_image(img: ImageBuffer, grid: RemapGrid) -> ImageBuffer:
    data, valid = sample_bilinear(img.data, img.valid, grid)
    return ImageBuffer(data, valid)


def remap_line_map(line_map: LineMap, grid: RemapGrid) -> LineMap:
    data, valid = sample_bilinear(line_map.data[:, :, None], line_map.valid, grid)
    return LineMap(data[:, :, 0], valid)


def rectify_line_map(
    line_map: LineMap, params: FisheyeParams, pinhole: VirtualPinhole
) -> LineMap:
    """Resample a fisheye-raster line map into the pinhole raster"""
    return remap_line_map(line_map, build_remap(params, pinhole, line_map.size))


def rectify_points(
    points: np.ndarray, params: FisheyeParams, pinhole: VirtualPinhole
) -> RectifiedPoints:
    """
    F = T^-1 for a (N, 2) array of fisheye pixels. Points beyond the valid
    radius come back as NaN with valid=False; the others are unaffected.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    theta, phi, valid = unproject_masked(points[:, 0], points[:, 1], params)
    rho = pinhole.f * np.tan(theta)
    xy = np.column_stack([rho * np.cos(phi) + pinhole.cx, rho * np.sin(phi) + pinhole.cy])
    xy[~valid] = np.nan
    return RectifiedPoints(xy, valid)


def interior_mask(width: int, height: int, fraction: float = 0.5) -> np.ndarray:
    """Centred disk of radius fraction * min(width, height) / 2"""
    xs, ys = _pixel_grid(width, height)
    radius = fraction * min(width, height) / 2.0
    return np.hypot(xs - width / 2.0, ys - height / 2.0) <= radius
