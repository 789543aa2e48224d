from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import SizeMismatchError


@dataclass
class ImageBuffer:
    """
    H x W x C raster in [0, 1] with a per-pixel validity mask. 2-D input is
    promoted to a single channel; invalid pixels are forced to 0.
    """

    data: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise SizeMismatchError(
                f"Image data must be HxW, HxWx1 or HxWx3, got shape {data.shape}"
            )
        if self.valid is None:
            valid = np.ones(data.shape[:2], dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != data.shape[:2]:
                raise SizeMismatchError(
                    f"Mask shape {valid.shape} does not match image {data.shape[:2]}"
                )
        self.data = np.where(valid[:, :, None], data, 0.0)
        self.valid = valid

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    def gray(self) -> np.ndarray:
        """Luma (BT.601 weights) for RGB, the single plane otherwise"""
        if self.channels == 1:
            return self.data[:, :, 0]
        return self.data @ np.array([0.299, 0.587, 0.114])


@dataclass
class LineMap:
    """H x W line-map raster: 0 off-line, the source segment length d(l) on-line"""

    data: np.ndarray
    valid: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise SizeMismatchError(f"Line map must be 2-D, got shape {self.data.shape}")
        if self.valid is None:
            self.valid = np.ones(self.data.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.data.shape:
                raise SizeMismatchError("Line map mask does not match its data")

    @classmethod
    def zeros(cls, width: int, height: int) -> "LineMap":
        return cls(np.zeros((height, width)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    @property
    def positive(self) -> np.ndarray:
        return self.data > 0

    def positive_pixels(self) -> np.ndarray:
        """(N, 2) array of (x, y) pixel coordinates where the map is positive"""
        ys, xs = np.nonzero(self.positive)
        return np.column_stack([xs, ys]).astype(np.float64)
