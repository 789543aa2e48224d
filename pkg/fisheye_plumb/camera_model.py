import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Any, Dict, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, InvalidParamsError, NonMonotoneError, OutOfRangeError

ArrayLike = Union[float, np.ndarray]

DEFAULT_THETA_MAX = 1.35
NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 100
MONOTONIC_GRID_STEP = 1e-3

# Taylor coefficients of tan(theta) up to theta^9
TAN_SERIES = (1.0, 1.0 / 3.0, 2.0 / 15.0, 17.0 / 315.0, 62.0 / 2835.0)


@dataclass(frozen=True)
class FisheyeParams:
    """
    Nine-parameter polynomial fisheye model K_d = (k1..k5, m_u, m_v, u0, v0).

    r(theta) = k1*theta + k2*theta^3 + ... + k5*theta^9 is measured in image
    units; mu/mv convert image units to pixels and (u0, v0) is the principal
    point in pixels. theta_max bounds the valid incidence angles.
    """

    k: Tuple[float, float, float, float, float]
    mu: float
    mv: float
    u0: float
    v0: float
    theta_max: float = DEFAULT_THETA_MAX

    def __post_init__(self):
        k = tuple(float(c) for c in self.k)
        if len(k) != 5:
            raise InvalidParamsError(f"Expected 5 polynomial coefficients, got {len(k)}")
        object.__setattr__(self, "k", k)
        for name in ("mu", "mv", "u0", "v0", "theta_max"):
            object.__setattr__(self, name, float(getattr(self, name)))

        values = k + (self.mu, self.mv, self.u0, self.v0, self.theta_max)
        if not all(math.isfinite(x) for x in values):
            raise InvalidParamsError("Fisheye parameters must be finite")
        if self.mu <= 0 or self.mv <= 0:
            raise InvalidParamsError(
                f"Pixel densities must be positive (mu={self.mu}, mv={self.mv})"
            )
        if k[0] <= 0:
            raise InvalidParamsError(f"k1 must be positive, got {k[0]}")
        if not 0 < self.theta_max < math.pi / 2:
            raise InvalidParamsError(
                f"theta_max must lie in (0, pi/2), got {self.theta_max}"
            )

    def as_vector(self) -> np.ndarray:
        return np.array(self.k + (self.mu, self.mv, self.u0, self.v0))

    @classmethod
    def from_vector(
        cls, vector: Sequence[float], theta_max: float = DEFAULT_THETA_MAX
    ) -> "FisheyeParams":
        vector = [float(x) for x in vector]
        if len(vector) != 9:
            raise InvalidParamsError(f"Expected a 9-vector, got length {len(vector)}")
        return cls(tuple(vector[:5]), *vector[5:], theta_max=theta_max)

    def with_updates(self, **changes: Any) -> "FisheyeParams":
        return replace(self, **changes)

    @property
    def r_max(self) -> float:
        """Image-unit radius reached at theta_max"""
        return float(_profile(np.float64(self.theta_max), self.k))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": list(self.k),
            "mu": self.mu,
            "mv": self.mv,
            "u0": self.u0,
            "v0": self.v0,
            "theta_max": self.theta_max,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FisheyeParams":
        if not isinstance(data, dict):
            raise InvalidParamsError("Fisheye parameters must be a JSON object")
        missing = [key for key in ("k", "mu", "mv", "u0", "v0") if key not in data]
        if missing:
            raise InvalidParamsError(f"Missing parameter fields: {', '.join(missing)}")
        try:
            return cls(
                tuple(data["k"]),
                data["mu"],
                data["mv"],
                data["u0"],
                data["v0"],
                theta_max=data.get("theta_max", DEFAULT_THETA_MAX),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, InvalidParamsError):
                raise
            raise InvalidParamsError(f"Malformed fisheye parameters: {e}") from e


@dataclass(frozen=True)
class VirtualPinhole:
    """Rectified-image camera; f is in rectified pixels, principal point at the raster centre"""

    f: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "f", float(self.f))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (math.isfinite(self.f) and self.f > 0):
            raise InvalidParamsError(f"Pinhole focal length must be positive, got {self.f}")
        if self.width < 1 or self.height < 1:
            raise InvalidParamsError(
                f"Pinhole raster must be at least 1x1, got {self.width}x{self.height}"
            )

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def to_dict(self) -> Dict[str, Any]:
        return {"f": self.f, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VirtualPinhole":
        try:
            return cls(data["f"], data["width"], data["height"])
        except (KeyError, TypeError) as e:
            raise InvalidParamsError(f"Malformed pinhole description: {e}") from e


class Angle(NamedTuple):
    """Incidence angle theta and azimuth phi (scalars or equally shaped arrays)"""

    theta: ArrayLike
    phi: ArrayLike


def _maybe_scalar(value: np.ndarray) -> ArrayLike:
    if np.ndim(value) == 0:
        return float(value)
    return value


def _profile(theta: np.ndarray, k: Tuple[float, ...]) -> np.ndarray:
    t2 = theta * theta
    return theta * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * (k[3] + t2 * k[4]))))


def _derivative(theta: np.ndarray, k: Tuple[float, ...]) -> np.ndarray:
    t2 = theta * theta
    return k[0] + t2 * (
        3.0 * k[1] + t2 * (5.0 * k[2] + t2 * (7.0 * k[3] + t2 * 9.0 * k[4]))
    )


def radial_profile(theta: ArrayLike, params: FisheyeParams) -> ArrayLike:
    """r(theta) = k1*theta + k2*theta^3 + k3*theta^5 + k4*theta^7 + k5*theta^9"""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or np.any(theta > params.theta_max) or np.any(np.isnan(theta)):
        raise DomainError(f"Incidence angle must lie in [0, {params.theta_max}]")
    return _maybe_scalar(_profile(theta, params.k))


def radial_derivative(theta: ArrayLike, params: FisheyeParams) -> ArrayLike:
    return _maybe_scalar(_derivative(np.asarray(theta, dtype=np.float64), params.k))


def check_monotonic(params: FisheyeParams, theta_max: Optional[float] = None) -> bool:
    """
    True iff dr/dtheta > 0 on [0, theta_max]. Checked on a dense grid plus the
    real roots of the derivative, which is a quartic in theta^2.
    """
    theta_max = params.theta_max if theta_max is None else float(theta_max)
    return _monotonic(params.k, theta_max)


@lru_cache(maxsize=4096)
def _monotonic(k: Tuple[float, ...], theta_max: float) -> bool:
    if not 0 < theta_max < math.pi / 2:
        raise DomainError(f"theta_max must lie in (0, pi/2), got {theta_max}")

    steps = max(1, math.ceil(theta_max / MONOTONIC_GRID_STEP))
    grid = np.linspace(0.0, theta_max, steps + 1)
    if np.any(_derivative(grid, k) <= 0):
        return False

    # np.roots drops leading zero coefficients, so lower-degree profiles work too
    quartic = [9.0 * k[4], 7.0 * k[3], 5.0 * k[2], 3.0 * k[1], k[0]]
    for s in np.roots(quartic):
        if abs(s.imag) <= 1e-9 * (1.0 + abs(s)) and 0.0 <= s.real <= theta_max**2:
            return False
    return True


def require_monotonic(params: FisheyeParams):
    if not check_monotonic(params):
        raise NonMonotoneError(
            f"Radial profile with k={params.k} is not increasing on "
            f"[0, {params.theta_max}]"
        )


def _invert(r: np.ndarray, k: Tuple[float, ...], theta_max: float) -> np.ndarray:
    # Newton from r/k1, falling back to bisection whenever a step leaves the bracket
    theta = np.clip(r / k[0], 0.0, theta_max)
    lo = np.zeros_like(r)
    hi = np.full_like(r, theta_max)
    active = np.ones(r.shape, dtype=bool)

    for _ in range(NEWTON_MAX_ITER):
        residual = _profile(theta, k) - r
        lo = np.where(residual < 0, theta, lo)
        hi = np.where(residual > 0, theta, hi)

        candidate = theta - residual / _derivative(theta, k)
        outside = ~np.isfinite(candidate) | (candidate < lo) | (candidate > hi)
        candidate = np.where(outside, 0.5 * (lo + hi), candidate)

        done = np.abs(candidate - theta) <= NEWTON_TOL
        theta = np.where(active, candidate, theta)
        active &= ~done
        if not active.any():
            break

    return theta


def radial_inverse(r_d: ArrayLike, params: FisheyeParams) -> ArrayLike:
    """Incidence angle theta with r(theta) = r_d, unique because r is increasing"""
    require_monotonic(params)
    r = np.asarray(r_d, dtype=np.float64)
    if np.any(r < 0) or np.any(r > params.r_max) or np.any(np.isnan(r)):
        raise OutOfRangeError(
            f"Radius must lie in [0, {params.r_max}] (profile at theta_max)"
        )
    return _maybe_scalar(_invert(r, params.k, params.theta_max))


def project_ray(angle: Angle, params: FisheyeParams) -> Tuple[ArrayLike, ArrayLike]:
    """Pixel (u, v) of the ray with incidence angle theta and azimuth phi"""
    theta, phi = angle
    r = np.asarray(radial_profile(theta, params))
    phi = np.asarray(phi, dtype=np.float64)
    u = params.mu * r * np.cos(phi) + params.u0
    v = params.mv * r * np.sin(phi) + params.v0
    return _maybe_scalar(u), _maybe_scalar(v)


def unproject_pixel(u: ArrayLike, v: ArrayLike, params: FisheyeParams) -> Angle:
    """Inverse of project_ray; phi is 0 at the principal point"""
    x = (np.asarray(u, dtype=np.float64) - params.u0) / params.mu
    y = (np.asarray(v, dtype=np.float64) - params.v0) / params.mv
    theta = radial_inverse(np.hypot(x, y), params)
    return Angle(theta, _maybe_scalar(np.arctan2(y, x)))


def unproject_masked(
    u: np.ndarray, v: np.ndarray, params: FisheyeParams
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array unprojection that flags radii beyond r(theta_max) instead of raising"""
    require_monotonic(params)
    x = (np.asarray(u, dtype=np.float64) - params.u0) / params.mu
    y = (np.asarray(v, dtype=np.float64) - params.v0) / params.mv
    r = np.hypot(x, y)
    valid = np.isfinite(r) & (r <= params.r_max)
    r = np.where(valid, r, 0.0)
    theta = _invert(r, params.k, params.theta_max)
    return theta, np.arctan2(y, x), valid


def pinhole_angles(
    x: ArrayLike, y: ArrayLike, pinhole: VirtualPinhole
) -> Tuple[np.ndarray, np.ndarray]:
    px = np.asarray(x, dtype=np.float64) - pinhole.cx
    py = np.asarray(y, dtype=np.float64) - pinhole.cy
    return np.arctan(np.hypot(px, py) / pinhole.f), np.arctan2(py, px)


def forward_map(
    x: ArrayLike, y: ArrayLike, params: FisheyeParams, pinhole: VirtualPinhole
) -> Tuple[ArrayLike, ArrayLike]:
    """
    T(p, K_d): fisheye pixel seen by the rectified pixel (x, y), with
    theta = arctan(|p| / f) measured from the pinhole centre.
    """
    theta, phi = pinhole_angles(x, y, pinhole)
    return project_ray(Angle(_maybe_scalar(theta), _maybe_scalar(phi)), params)


def forward_map_masked(
    x: np.ndarray, y: np.ndarray, params: FisheyeParams, pinhole: VirtualPinhole
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    theta, phi = pinhole_angles(x, y, pinhole)
    valid = theta <= params.theta_max
    r = _profile(np.minimum(theta, params.theta_max), params.k)
    u = params.mu * r * np.cos(phi) + params.u0
    v = params.mv * r * np.sin(phi) + params.v0
    return u, v, valid


def default_pinhole(
    width: int,
    height: int,
    theta_max: float = DEFAULT_THETA_MAX,
    fov_fraction: float = 0.9,
) -> VirtualPinhole:
    """Pinhole whose half-raster subtends fov_fraction of theta_max"""
    f = (min(width, height) / 2.0) / math.tan(fov_fraction * theta_max)
    return VirtualPinhole(f, width, height)


def perspective_gauge(pinhole: VirtualPinhole, theta_max: float = 0.1) -> FisheyeParams:
    """
    Degree-9 truncation of r = f*tan(theta) with one pixel per unit, centred on
    the pinhole. For narrow theta_max it reproduces the pinhole to well below
    a nanopixel, which makes it the zero-distortion gauge.
    """
    return FisheyeParams(
        tuple(pinhole.f * c for c in TAN_SERIES),
        1.0,
        1.0,
        pinhole.cx,
        pinhole.cy,
        theta_max=theta_max,
    )
