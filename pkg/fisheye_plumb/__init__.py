from .camera_model import (
    Angle,
    FisheyeParams,
    VirtualPinhole,
    check_monotonic,
    forward_map,
    project_ray,
    radial_inverse,
    radial_profile,
    unproject_pixel,
)
from .errors import FisheyeError
from .rasters import ImageBuffer, LineMap

__all__ = [
    "Angle",
    "FisheyeError",
    "FisheyeParams",
    "ImageBuffer",
    "LineMap",
    "VirtualPinhole",
    "check_monotonic",
    "forward_map",
    "project_ray",
    "radial_inverse",
    "radial_profile",
    "unproject_pixel",
]
