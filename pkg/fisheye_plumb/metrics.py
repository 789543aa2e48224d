import math
import warnings
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Union

import cv2
import numpy as np

from .calibrator import RPE, evaluate_rpe
from .camera_model import FisheyeParams, VirtualPinhole
from .errors import DegenerateError, SizeMismatchError
from .rasters import ImageBuffer, LineMap

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

REPORT_KEYS = ("psnr", "ssim", "rpe_mse", "rpe_rms", "precision", "recall", "f")


class PRResult(NamedTuple):
    precision: float
    recall: float
    f_value: float
    matched_pred: int
    total_pred: int
    matched_truth: int
    total_truth: int


class PRCurve(NamedTuple):
    thresholds: List[float]
    results: List[PRResult]

    @property
    def best_index(self) -> int:
        return int(np.argmax([r.f_value for r in self.results]))

    @property
    def best(self) -> PRResult:
        return self.results[self.best_index]

    @property
    def best_threshold(self) -> float:
        return self.thresholds[self.best_index]


def _as_image(value: Union[ImageBuffer, np.ndarray]) -> ImageBuffer:
    if isinstance(value, ImageBuffer):
        return value
    return ImageBuffer(value)


def _joint_mask(a: ImageBuffer, b: ImageBuffer, mask: Optional[np.ndarray]) -> np.ndarray:
    if a.data.shape != b.data.shape:
        raise SizeMismatchError(f"Images differ in shape: {a.data.shape} vs {b.data.shape}")
    joint = a.valid & b.valid
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != joint.shape:
            raise SizeMismatchError(f"Mask shape {mask.shape} does not match {joint.shape}")
        joint &= mask
    return joint


def psnr(
    a: Union[ImageBuffer, np.ndarray],
    b: Union[ImageBuffer, np.ndarray],
    mask: Optional[np.ndarray] = None,
) -> float:
    """PSNR in dB for unit peak over the jointly valid pixels; math.inf for identical images"""
    a = _as_image(a)
    b = _as_image(b)
    joint = _joint_mask(a, b, mask)
    if not joint.any():
        raise DegenerateError("PSNR mask is empty")

    mse = float(np.mean((a.data[joint] - b.data[joint]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_filter(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return cv2.sepFilter2D(plane, cv2.CV_64F, kernel, kernel, borderType=cv2.BORDER_REFLECT)


def ssim(
    a: Union[ImageBuffer, np.ndarray],
    b: Union[ImageBuffer, np.ndarray],
    mask: Optional[np.ndarray] = None,
) -> float:
    """
    Mean SSIM over window centres whose whole 11 x 11 Gaussian window lies on
    jointly valid pixels. RGB inputs are reduced to luma first.
    """
    a = _as_image(a)
    b = _as_image(b)
    joint = _joint_mask(a, b, mask)
    if min(a.height, a.width) < SSIM_WINDOW:
        raise DegenerateError(
            f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.width}x{a.height}"
        )

    area = cv2.erode(
        joint.astype(np.uint8),
        np.ones((SSIM_WINDOW, SSIM_WINDOW), np.uint8),
        borderType=cv2.BORDER_CONSTANT,
        borderValue=0,
    ).astype(bool)
    if not area.any():
        raise DegenerateError("No SSIM window lies entirely on valid pixels")

    x = np.ascontiguousarray(a.gray(), dtype=np.float64)
    y = np.ascontiguousarray(b.gray(), dtype=np.float64)
    kernel = cv2.getGaussianKernel(SSIM_WINDOW, SSIM_SIGMA, cv2.CV_64F)
    mu_x = _gaussian_filter(x, kernel)
    mu_y = _gaussian_filter(y, kernel)
    sigma_xx = _gaussian_filter(x * x, kernel) - mu_x * mu_x
    sigma_yy = _gaussian_filter(y * y, kernel) - mu_y * mu_y
    sigma_xy = _gaussian_filter(x * y, kernel) - mu_x * mu_y

    numerator = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * sigma_xy + SSIM_C2)
    denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_xx + sigma_yy + SSIM_C2)
    return float(np.mean(numerator[area] / denominator[area]))


def _line_map(line_map: Union[LineMap, np.ndarray]) -> LineMap:
    if not isinstance(line_map, LineMap):
        line_map = LineMap(line_map)
    return line_map


def _within(binary: np.ndarray, tolerance: int) -> np.ndarray:
    """Pixels within Chebyshev distance `tolerance` of a set pixel"""
    if tolerance <= 0:
        return binary
    kernel = np.ones((2 * tolerance + 1, 2 * tolerance + 1), np.uint8)
    return cv2.dilate(binary.astype(np.uint8), kernel).astype(bool)


def line_map_pr(
    pred: Union[LineMap, np.ndarray],
    truth: Union[LineMap, np.ndarray],
    tolerance_px: int = 1,
    threshold: float = 0.0,
) -> PRResult:
    """
    Precision and recall of the predicted line pixels (value > threshold)
    against the truth pixels (value > 0). A pixel counts as matched when the
    other set has a pixel within `tolerance_px` (Chebyshev). Only pixels valid
    in both maps take part.
    """
    pred = _line_map(pred)
    truth = _line_map(truth)
    if pred.data.shape != truth.data.shape:
        raise SizeMismatchError(f"Line maps differ in shape: {pred.data.shape} vs {truth.data.shape}")

    joint = pred.valid & truth.valid
    p = (pred.data > threshold) & joint
    g = (truth.data > 0) & joint
    total_pred = int(p.sum())
    total_truth = int(g.sum())
    matched_pred = int((p & _within(g, tolerance_px)).sum())
    matched_truth = int((g & _within(p, tolerance_px)).sum())

    if total_pred == 0:
        warnings.warn("Predicted line map is empty; precision set to 0", RuntimeWarning)
        precision = 0.0
    else:
        precision = matched_pred / total_pred
    if total_truth == 0:
        warnings.warn("Ground-truth line map is empty; recall set to 0", RuntimeWarning)
        recall = 0.0
    else:
        recall = matched_truth / total_truth

    f_value = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return PRResult(precision, recall, f_value, matched_pred, total_pred, matched_truth, total_truth)


def pr_curve(
    pred: Union[LineMap, np.ndarray],
    truth: Union[LineMap, np.ndarray],
    thresholds: Optional[Sequence[float]] = None,
    tolerance_px: int = 1,
) -> PRCurve:
    """P/R over predicted-map thresholds; by default 20 levels from 0 up to the map maximum"""
    pred = _line_map(pred)
    if thresholds is None:
        peak = float(pred.data[pred.valid].max()) if pred.valid.any() else 0.0
        thresholds = np.linspace(0.0, peak, 21)[:-1] if peak > 0 else [0.0]
    thresholds = [float(t) for t in thresholds]

    results = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for t in thresholds:
            results.append(line_map_pr(pred, truth, tolerance_px, threshold=t))
    return PRCurve(thresholds, results)


def coverage_fraction(valid: Union[ImageBuffer, LineMap, np.ndarray]) -> float:
    if isinstance(valid, (ImageBuffer, LineMap)):
        valid = valid.valid
    valid = np.asarray(valid, dtype=bool)
    return float(valid.mean()) if valid.size else 0.0


def rpe(
    estimated: FisheyeParams,
    truth: FisheyeParams,
    domain: np.ndarray,
    pinhole: VirtualPinhole,
) -> RPE:
    return evaluate_rpe(estimated, truth, domain, pinhole)


def _encode(value: float) -> Any:
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def evaluation_report(
    psnr_db: float, ssim_value: float, rpe_value: RPE, pr: PRResult
) -> Dict[str, Any]:
    """Report dict with exactly REPORT_KEYS; infinities become the string "inf" """
    values = (
        psnr_db,
        ssim_value,
        rpe_value.mse,
        rpe_value.rms,
        pr.precision,
        pr.recall,
        pr.f_value,
    )
    return {key: _encode(float(value)) for key, value in zip(REPORT_KEYS, values)}
