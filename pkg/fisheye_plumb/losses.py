import warnings
from dataclasses import dataclass
from typing import Any, Callable, Dict, Sequence, Tuple, Union

import numpy as np

from .calibrator import DOMAIN_PENALTY, rectified_deviation
from .camera_model import DEFAULT_THETA_MAX, FisheyeParams, VirtualPinhole, require_monotonic
from .errors import DegenerateError, InvalidParamsError, NonMonotoneError, SizeMismatchError
from .rasters import LineMap

PARAM_WEIGHTS = (0.1, 0.1, 0.5, 1.0, 1.0, 0.1, 0.1, 0.1, 0.1)
LOCAL_REGIONS = 5

VectorLike = Union[Sequence[float], np.ndarray, FisheyeParams]


@dataclass(frozen=True)
class LossWeights:
    """Per-component rescaling w and the term weights of the total loss"""

    w: Tuple[float, ...] = PARAM_WEIGHTS
    lambda_g: float = 1.0
    lambda_loc: float = 1.0
    lambda_c: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(x) for x in self.w))
        if len(self.w) != 9:
            raise SizeMismatchError(f"Expected 9 component weights, got {len(self.w)}")
        if any(x < 0 for x in self.w + (self.lambda_g, self.lambda_loc, self.lambda_c)):
            raise InvalidParamsError("Loss weights must be nonnegative")


@dataclass
class ParamHeads:
    """One global 9-vector head and five local 5-vector heads (centre + four corners)"""

    K_g: np.ndarray
    K_loc: np.ndarray

    def __post_init__(self):
        self.K_g = np.asarray(self.K_g, dtype=np.float64)
        self.K_loc = np.asarray(self.K_loc, dtype=np.float64)
        if self.K_g.shape != (9,):
            raise SizeMismatchError(f"K_g must have 9 components, got shape {self.K_g.shape}")
        if self.K_loc.shape != (LOCAL_REGIONS, 5):
            raise SizeMismatchError(f"K_loc must be 5 x 5, got shape {self.K_loc.shape}")
        if not (np.all(np.isfinite(self.K_g)) and np.all(np.isfinite(self.K_loc))):
            raise InvalidParamsError("Parameter heads must be finite")

    @classmethod
    def consensus(cls, params: FisheyeParams) -> "ParamHeads":
        """Every head equal to `params`"""
        vector = params.as_vector()
        return cls(vector, np.tile(vector[:5], (LOCAL_REGIONS, 1)))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ParamHeads":
        try:
            return cls(data["K_g"], data["K_loc"])
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, (SizeMismatchError, InvalidParamsError)):
                raise
            raise InvalidParamsError(f"Malformed parameter heads: {e}") from e


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    global_loss: float
    local_loss: float
    curvature_loss: float
    weighted_global: float
    weighted_local: float
    weighted_curvature: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "total": self.total,
            "global": self.global_loss,
            "local": self.local_loss,
            "curvature": self.curvature_loss,
            "weighted_global": self.weighted_global,
            "weighted_local": self.weighted_local,
            "weighted_curvature": self.weighted_curvature,
        }


def _vector(value: VectorLike) -> np.ndarray:
    if isinstance(value, FisheyeParams):
        return value.as_vector()
    return np.asarray(value, dtype=np.float64).ravel()


def _map_data(value: Union[LineMap, np.ndarray]) -> np.ndarray:
    if isinstance(value, LineMap):
        return value.data
    return np.asarray(value, dtype=np.float64)


def line_map_loss(h: Union[LineMap, np.ndarray], h_hat: Union[LineMap, np.ndarray]) -> float:
    """
    Class-balanced squared error between a predicted map h and the target
    h_hat. Target-positive pixels are weighted by the negative fraction and
    vice versa.
    """
    pred = _map_data(h)
    target = _map_data(h_hat)
    if pred.shape != target.shape:
        raise SizeMismatchError(f"Line maps differ in shape: {pred.shape} vs {target.shape}")

    positive = target > 0
    n_total = target.size
    n_pos = int(np.count_nonzero(positive))
    if n_pos == 0:
        warnings.warn("Target line map has no positive pixels; loss is 0", RuntimeWarning)
        return 0.0

    d = (pred - target) ** 2
    n_neg = n_total - n_pos
    return float((n_neg / n_total) * d[positive].sum() + (n_pos / n_total) * d[~positive].sum())


def global_param_loss(K_g: VectorLike, K_gt: VectorLike, w: Sequence[float] = PARAM_WEIGHTS) -> float:
    """(1/9) * sum_i w_i (K_g(i) - K_gt(i))^2"""
    K_g = _vector(K_g)
    K_gt = _vector(K_gt)
    w = np.asarray(w, dtype=np.float64)
    if not (K_g.shape == K_gt.shape == w.shape == (9,)):
        raise SizeMismatchError(
            f"Global loss needs 9-vectors, got {K_g.shape}, {K_gt.shape}, {w.shape}"
        )
    return float(np.sum(w * (K_g - K_gt) ** 2) / 9.0)


def local_param_loss(
    K_loc_k: Sequence[float], K_gt: VectorLike, w: Sequence[float] = PARAM_WEIGHTS
) -> float:
    """(1/5) * sum_{i<=5} w_i (K_loc(i) - K_gt(i))^2 against the first five true components"""
    K_loc_k = _vector(K_loc_k)
    K_gt = _vector(K_gt)
    w = np.asarray(w, dtype=np.float64)
    if K_loc_k.shape != (5,) or len(K_gt) < 5 or len(w) < 5:
        raise SizeMismatchError(
            "Local loss needs a 5-vector head and at least 5 truth/weight entries"
        )
    return float(np.sum(w[:5] * (K_loc_k - K_gt[:5]) ** 2) / 5.0)


def _omega_points(omega_plus: Union[LineMap, np.ndarray]) -> np.ndarray:
    if isinstance(omega_plus, LineMap):
        return omega_plus.positive_pixels()
    omega_plus = np.asarray(omega_plus)
    if omega_plus.dtype == bool:
        ys, xs = np.nonzero(omega_plus)
        return np.column_stack([xs, ys]).astype(np.float64)
    return omega_plus.astype(np.float64).reshape(-1, 2)


def curvature_loss(
    K_d: FisheyeParams,
    K_gt: FisheyeParams,
    omega_plus: Union[LineMap, np.ndarray],
    pinhole: VirtualPinhole,
    penalty: float = DOMAIN_PENALTY,
) -> float:
    """
    Mean squared distance between the rectifications of the distorted-line
    pixels under K_d and K_gt. A non-invertible K_d scores penalty^2 everywhere.
    """
    points = _omega_points(omega_plus)
    if len(points) == 0:
        raise DegenerateError("Curvature loss needs at least one distorted-line pixel")
    require_monotonic(K_gt)
    try:
        deviation = rectified_deviation(K_d, K_gt, points, pinhole, penalty)
    except NonMonotoneError:
        return penalty * penalty
    return float(np.mean(deviation))


def combine_params(heads: ParamHeads, theta_max: float = DEFAULT_THETA_MAX) -> FisheyeParams:
    """k1..k5 averaged over the global and five local heads; m_u, m_v, u0, v0 from K_g"""
    k = (heads.K_g[:5] + heads.K_loc.sum(axis=0)) / (1 + LOCAL_REGIONS)
    return FisheyeParams(tuple(k), *heads.K_g[5:], theta_max=theta_max)


def total_loss(
    heads: ParamHeads,
    K_gt: FisheyeParams,
    omega_plus: Union[LineMap, np.ndarray],
    pinhole: VirtualPinhole,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """lambda_g * L_g + lambda_loc * sum_k L_loc^k + lambda_c * L_c, with L_c at the combined heads"""
    global_term = global_param_loss(heads.K_g, K_gt, weights.w)
    local_term = sum(local_param_loss(head, K_gt, weights.w) for head in heads.K_loc)
    try:
        combined = combine_params(heads, K_gt.theta_max)
    except InvalidParamsError:
        combined = None
    if combined is None:
        curvature_term = DOMAIN_PENALTY * DOMAIN_PENALTY
    else:
        curvature_term = curvature_loss(combined, K_gt, omega_plus, pinhole)

    weighted = (
        weights.lambda_g * global_term,
        weights.lambda_loc * local_term,
        weights.lambda_c * curvature_term,
    )
    return LossBreakdown(
        total=float(sum(weighted)),
        global_loss=global_term,
        local_loss=float(local_term),
        curvature_loss=curvature_term,
        weighted_global=weighted[0],
        weighted_local=weighted[1],
        weighted_curvature=weighted[2],
    )


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: Sequence[float], step: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function of an n-vector"""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(len(x)):
        forward = x.copy()
        backward = x.copy()
        forward[i] += step
        backward[i] -= step
        grad[i] = (f(forward) - f(backward)) / (2.0 * step)
    return grad
