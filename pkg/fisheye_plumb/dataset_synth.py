import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .camera_model import (
    DEFAULT_THETA_MAX,
    FisheyeParams,
    VirtualPinhole,
    check_monotonic,
    default_pinhole,
    forward_map_masked,
    require_monotonic,
)
from .errors import DegenerateError, InvalidParamsError, SamplerExhaustedError
from .rasters import ImageBuffer, LineMap
from .rectifier import build_distort_remap, rectify_image

MAX_POLYLINE_GAP = 2.0
NEARLY_ON = 0.5
# raster side the default mu_range is quoted for
REFERENCE_SIDE = 320.0


@dataclass(frozen=True)
class LineSegment:
    """Straight segment between two endpoints in rectified-image pixels"""

    x: Tuple[float, float]
    x_prime: Tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "x", (float(self.x[0]), float(self.x[1])))
        object.__setattr__(
            self, "x_prime", (float(self.x_prime[0]), float(self.x_prime[1]))
        )
        if self.x == self.x_prime:
            raise DegenerateError(f"Segment endpoints coincide at {self.x}")

    @property
    def length(self) -> float:
        return math.hypot(self.x_prime[0] - self.x[0], self.x_prime[1] - self.x[1])

    def inside(self, width: int, height: int) -> bool:
        return all(
            0 <= px <= width - 1 and 0 <= py <= height - 1
            for px, py in (self.x, self.x_prime)
        )

    def to_list(self) -> List[float]:
        return [self.x[0], self.x[1], self.x_prime[0], self.x_prime[1]]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "LineSegment":
        if len(values) != 4:
            raise InvalidParamsError(f"Segments are [x1, y1, x2, y2], got {values}")
        return cls((values[0], values[1]), (values[2], values[3]))


@dataclass
class Polyline:
    """Ordered fisheye-pixel samples of one distorted straight segment"""

    points: np.ndarray
    source: LineSegment

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) < 2:
            raise DegenerateError("A polyline needs at least 2 points")

    @property
    def arc_length(self) -> float:
        return float(np.sum(np.hypot(*np.diff(self.points, axis=0).T)))

    def to_list(self) -> List[List[float]]:
        return self.points.tolist()


@dataclass
class DatasetSample:
    fisheye_image: ImageBuffer
    params: FisheyeParams
    segments: List[LineSegment]
    distorted_polylines: List[Polyline]
    line_map_rectified: LineMap
    line_map_distorted: LineMap
    seed: int
    pinhole: Optional[VirtualPinhole] = None
    dropped_polylines: int = 0


@dataclass
class SamplerConfig:
    """
    Parameter ranges for the random fisheye models. k2..k5 are drawn as
    k1 * theta_max^-(2i-2) * U(low, high), so the ranges are relative. mu_range
    is in px/unit for a 320 px raster; other sizes scale it by their shorter
    side so the image circle keeps its share of the frame.
    """

    mu_range: Tuple[float, float] = (80.0, 140.0)
    k1_range: Tuple[float, float] = (0.8, 1.2)
    higher_order_ranges: Tuple[Tuple[float, float], ...] = ((-0.15, 0.15),) * 4
    principal_jitter: float = 0.05
    theta_max: float = DEFAULT_THETA_MAX
    variants: int = 4
    output_size: Tuple[int, int] = (320, 320)
    source_focal: Optional[float] = None
    min_coverage: float = 0.6
    max_rejections: int = 1000

    def __post_init__(self):
        self.mu_range = tuple(float(x) for x in self.mu_range)
        self.k1_range = tuple(float(x) for x in self.k1_range)
        self.higher_order_ranges = tuple(
            (float(lo), float(hi)) for lo, hi in self.higher_order_ranges
        )
        self.output_size = (int(self.output_size[0]), int(self.output_size[1]))
        if len(self.higher_order_ranges) != 4:
            raise InvalidParamsError("higher_order_ranges needs one range per k2..k5")
        for name, (lo, hi) in (("mu_range", self.mu_range), ("k1_range", self.k1_range)):
            if not 0 < lo <= hi:
                raise InvalidParamsError(f"{name} must be a positive (low, high) pair")
        if any(lo > hi for lo, hi in self.higher_order_ranges):
            raise InvalidParamsError("higher_order_ranges must be (low, high) pairs")
        if self.variants < 1:
            raise InvalidParamsError("variants must be at least 1")
        if min(self.output_size) < 2:
            raise InvalidParamsError("output_size must be at least 2x2")

    def pinhole(self) -> VirtualPinhole:
        width, height = self.output_size
        if self.source_focal is None:
            return default_pinhole(width, height, self.theta_max)
        return VirtualPinhole(self.source_focal, width, height)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mu_range"] = list(self.mu_range)
        data["k1_range"] = list(self.k1_range)
        data["higher_order_ranges"] = [list(r) for r in self.higher_order_ranges]
        data["output_size"] = list(self.output_size)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SamplerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InvalidParamsError(f"Unknown sampler settings: {', '.join(sorted(unknown))}")
        return cls(**data)


def derive_seed(master_seed: int, index: int) -> int:
    """Independent u64 stream seed for sample `index`"""
    state = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0])


def sample_params(rng_seed: int, config: SamplerConfig) -> FisheyeParams:
    """
    Draw a fisheye model uniformly from the configured ranges, rejecting
    non-monotone profiles and image circles smaller than min_coverage of the
    output half-diagonal.
    """
    rng = np.random.default_rng(rng_seed)
    width, height = config.output_size
    half_diagonal = math.hypot(width, height) / 2.0
    scale = min(width, height) / REFERENCE_SIDE

    for _ in range(config.max_rejections):
        m = rng.uniform(*config.mu_range) * scale
        u0 = width / 2.0 + rng.uniform(-1.0, 1.0) * config.principal_jitter * width
        v0 = height / 2.0 + rng.uniform(-1.0, 1.0) * config.principal_jitter * height
        k1 = rng.uniform(*config.k1_range)
        k = [k1]
        for i, (lo, hi) in enumerate(config.higher_order_ranges, start=2):
            k.append(k1 * config.theta_max ** -(2 * i - 2) * rng.uniform(lo, hi))

        params = FisheyeParams(tuple(k), m, m, u0, v0, theta_max=config.theta_max)
        if not check_monotonic(params):
            continue
        if m * params.r_max >= config.min_coverage * half_diagonal:
            return params

    raise SamplerExhaustedError(
        f"No acceptable fisheye model after {config.max_rejections} draws"
    )


def distort_image(
    src: ImageBuffer,
    params: FisheyeParams,
    pinhole: VirtualPinhole,
    size: Optional[Tuple[int, int]] = None,
) -> ImageBuffer:
    """Render the perspective image `src` (seen through `pinhole`) as a fisheye image"""
    if src.width < 1 or src.height < 1:
        raise DegenerateError("Cannot distort an empty image")
    return rectify_image(src, build_distort_remap(params, pinhole, size))


def _runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    """Half-open index ranges of consecutive True entries"""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2], edges[1::2]))


def distort_segments(
    segments: Sequence[LineSegment],
    params: FisheyeParams,
    pinhole: VirtualPinhole,
    size: Optional[Tuple[int, int]] = None,
) -> Tuple[List[Polyline], int]:
    """
    Sample each segment at ceil(length) evenly spaced points (refined until
    neighbours are at most 2 px apart), map them through forward_map and
    clip to the fisheye raster. Returns the polylines and the number of
    segments that vanished entirely.
    """
    require_monotonic(params)
    width, height = size or (pinhole.width, pinhole.height)
    polylines: List[Polyline] = []
    dropped = 0

    for segment in segments:
        a = np.array(segment.x)
        b = np.array(segment.x_prime)
        n = max(2, math.ceil(segment.length))
        while True:
            t = np.linspace(0.0, 1.0, n)[:, None]
            pts = a + t * (b - a)
            u, v, ok = forward_map_masked(pts[:, 0], pts[:, 1], params, pinhole)
            inside = ok & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
            gaps = np.hypot(np.diff(u), np.diff(v))
            linked = inside[:-1] & inside[1:]
            if not np.any(gaps[linked] > MAX_POLYLINE_GAP) or n > 1_000_000:
                break
            n = 2 * n - 1

        uv = np.column_stack([u, v])
        pieces = [Polyline(uv[lo:hi], segment) for lo, hi in _runs(inside) if hi - lo >= 2]
        if not pieces:
            dropped += 1
        polylines.extend(pieces)

    return polylines, dropped


def segment_distance(
    px: np.ndarray, py: np.ndarray, a: Sequence[float], b: Sequence[float]
) -> np.ndarray:
    """Euclidean distance from pixel centres (px, py) to the closed segment ab"""
    dx = b[0] - a[0]
    dy = b[1] - a[1]
    denom = dx * dx + dy * dy
    if denom > 0:
        t = np.clip(((px - a[0]) * dx + (py - a[1]) * dy) / denom, 0.0, 1.0)
    else:
        t = np.zeros_like(px)
    return np.hypot(px - (a[0] + t * dx), py - (a[1] + t * dy))


def _stamp(data: np.ndarray, a: Sequence[float], b: Sequence[float], value: float):
    height, width = data.shape
    x_lo = max(0, math.ceil(min(a[0], b[0]) - NEARLY_ON))
    x_hi = min(width - 1, math.floor(max(a[0], b[0]) + NEARLY_ON))
    y_lo = max(0, math.ceil(min(a[1], b[1]) - NEARLY_ON))
    y_hi = min(height - 1, math.floor(max(a[1], b[1]) + NEARLY_ON))
    if x_lo > x_hi or y_lo > y_hi:
        return

    px, py = np.meshgrid(
        np.arange(x_lo, x_hi + 1, dtype=np.float64),
        np.arange(y_lo, y_hi + 1, dtype=np.float64),
    )
    hit = segment_distance(px, py, a, b) < NEARLY_ON
    window = data[y_lo : y_hi + 1, x_lo : x_hi + 1]
    window[hit] = np.maximum(window[hit], value)


def render_line_map(
    primitives: Sequence[Union[LineSegment, Polyline]],
    size: Tuple[int, int],
    lengths: Optional[Sequence[float]] = None,
) -> LineMap:
    """
    Line-map target: pixels whose centre lies within half a pixel of a
    primitive take that primitive's source length d(l); overlaps keep the
    maximum; everything else is 0.
    """
    width, height = size
    data = np.zeros((height, width), dtype=np.float64)
    if lengths is not None and len(lengths) != len(primitives):
        raise InvalidParamsError("lengths must match primitives one-to-one")

    for i, primitive in enumerate(primitives):
        if isinstance(primitive, Polyline):
            value = primitive.source.length if lengths is None else float(lengths[i])
            pts = primitive.points
            for a, b in zip(pts[:-1], pts[1:]):
                _stamp(data, a, b, value)
        else:
            value = primitive.length if lengths is None else float(lengths[i])
            _stamp(data, primitive.x, primitive.x_prime, value)

    return LineMap(data)


def synthetic_perspective_image(
    seed: int, size: Tuple[int, int] = (320, 320), channels: int = 3
) -> ImageBuffer:
    """Smooth random texture: low-frequency sinusoids over a gentle gradient"""
    rng = np.random.default_rng(seed)
    width, height = size
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    planes = []
    for _ in range(channels):
        plane = 0.5 + 0.1 * (xs / width - 0.5) + 0.1 * (ys / height - 0.5)
        for _ in range(4):
            fx, fy = rng.uniform(-1.0, 1.0, size=2) / 32.0
            phase = rng.uniform(0, 2 * math.pi)
            plane += rng.uniform(0.03, 0.08) * np.sin(2 * math.pi * (fx * xs + fy * ys) + phase)
        planes.append(np.clip(plane, 0.0, 1.0))
    return ImageBuffer(np.stack(planes, axis=2))


def random_segments(
    seed: int,
    size: Tuple[int, int] = (320, 320),
    count: int = 12,
    min_length: float = 60.0,
    margin: float = 8.0,
) -> List[LineSegment]:
    """Wireframe-style annotations: random segments of at least min_length px"""
    if min_length >= math.hypot(size[0] - 2 * margin, size[1] - 2 * margin):
        raise DegenerateError(f"No segment of length {min_length} fits a {size} raster")
    rng = np.random.default_rng(seed)
    width, height = size
    lo = np.array([margin, margin])
    hi = np.array([width - 1 - margin, height - 1 - margin])
    segments = []
    while len(segments) < count:
        a = rng.uniform(lo, hi)
        b = rng.uniform(lo, hi)
        if np.hypot(*(b - a)) >= min_length:
            segments.append(LineSegment(tuple(a), tuple(b)))
    return segments
