import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from .camera_model import (
    DEFAULT_THETA_MAX,
    FisheyeParams,
    VirtualPinhole,
    default_pinhole,
    require_monotonic,
    unproject_masked,
)
from .dataset_synth import Polyline
from .errors import DegenerateError, InvalidParamsError, NonMonotoneError
from .rectifier import rectify_points

DOMAIN_PENALTY = 5.0
MIN_LINES = 3
MIN_POINTS = 3
# equidistant starts place r_max this far past the farthest observation
SWEEP_FACTORS = tuple(np.geomspace(1.02, 4.0, 12))


@dataclass(frozen=True)
class LMOptions:
    """
    Levenberg-Marquardt schedule and stopping rules.

    `starts` caps the number of solver runs: the initial guess first, then the
    lowest-cost equidistant profiles from a sweep over r_max. Later starts are
    skipped once a run ends with an RMS residual below `restart_rms`. When no
    damping level lowers the cost the run still counts as converged if its RMS
    residual is at most `residual_floor` or its last accepted step improved the
    cost by less than `settle_tol` (relative).
    """

    max_iterations: int = 200
    lambda_init: float = 1e-3
    lambda_down: float = 0.3
    lambda_up: float = 3.0
    lambda_min: float = 1e-12
    lambda_max: float = 1e6
    cost_tol: float = 1e-10
    grad_tol: float = 1e-8
    step_tol: float = 1e-12
    stall_steps: int = 3
    settle_tol: float = 1e-6
    residual_floor: float = 1e-9
    fd_step: float = 1e-6
    penalty: float = DOMAIN_PENALTY
    starts: int = 3
    restart_rms: float = 1e-3
    solver: str = "lm"
    verbose: bool = False

    def __post_init__(self):
        if self.solver not in ("lm", "trf"):
            raise InvalidParamsError(f"Unknown solver '{self.solver}', expected 'lm' or 'trf'")
        if self.max_iterations < 1:
            raise InvalidParamsError("max_iterations must be at least 1")
        if self.starts < 1:
            raise InvalidParamsError("starts must be at least 1")
        if not 0 < self.lambda_min <= self.lambda_init <= self.lambda_max:
            raise InvalidParamsError("Damping must satisfy 0 < min <= init <= max")


@dataclass
class CalibProblem:
    """
    Distorted-line observations plus everything the solver needs. m_u and m_v
    are held at `gauge`; k1..k5 and (u0, v0) start from `initial`.

    With `anchored` set, each polyline's source segment is taken as its true
    position in the pinhole raster, which fixes the rectified-plane scale that
    straightness alone leaves free. Observations without known sources should
    clear it.
    """

    observations: List[Polyline]
    size: Tuple[int, int]
    initial: FisheyeParams
    gauge: Optional[Tuple[float, float]] = None
    options: LMOptions = field(default_factory=LMOptions)
    pinhole: Optional[VirtualPinhole] = None
    anchored: bool = True

    def __post_init__(self):
        self.size = (int(self.size[0]), int(self.size[1]))
        if self.gauge is None:
            self.gauge = (self.initial.mu, self.initial.mv)
        self.gauge = (float(self.gauge[0]), float(self.gauge[1]))
        if self.gauge[0] <= 0 or self.gauge[1] <= 0:
            raise InvalidParamsError(f"Gauge pixel densities must be positive, got {self.gauge}")
        if self.pinhole is None:
            self.pinhole = default_pinhole(*self.size, theta_max=self.initial.theta_max)
        self.initial = self.initial.with_updates(mu=self.gauge[0], mv=self.gauge[1])

    @property
    def usable(self) -> List[Polyline]:
        return [poly for poly in self.observations if len(poly.points) >= MIN_POINTS]

    @property
    def degenerate(self) -> bool:
        return len(self.usable) < MIN_LINES


@dataclass
class CalibResult:
    params: FisheyeParams
    rms_residual: float
    line_residuals: List[float]
    iterations: int
    converged: bool
    degenerate: bool = False
    reason: str = ""
    cost_history: List[float] = field(default_factory=list)
    start: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "rms_residual": self.rms_residual,
            "line_residuals": list(self.line_residuals),
            "iterations": self.iterations,
            "converged": self.converged,
            "degenerate": self.degenerate,
            "reason": self.reason,
            "cost_history": list(self.cost_history),
            "start": self.start,
        }


class TLSLine(NamedTuple):
    """Line n . p = c with unit normal n"""

    nx: float
    ny: float
    c: float


class RPE(NamedTuple):
    mse: float
    rms: float
    count: int


class SolverRun(NamedTuple):
    x: np.ndarray
    iterations: int
    converged: bool
    reason: str
    history: List[float]


def fit_line_tls(points: np.ndarray) -> Tuple[TLSLine, np.ndarray]:
    """
    Total-least-squares line through `points` (N x 2) and the signed
    perpendicular distances of each point. The normal is the eigenvector of
    the centred scatter matrix with the smallest eigenvalue, oriented so its
    first nonzero component of (ny, nx) is positive.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) < 2:
        raise DegenerateError("A line fit needs at least 2 points")
    centroid = points.mean(axis=0)
    centred = points - centroid
    scatter = centred.T @ centred
    eigenvalues, eigenvectors = np.linalg.eigh(scatter)
    if eigenvalues[1] <= 0:
        raise DegenerateError("All points coincide; no line is defined")

    normal = eigenvectors[:, 0]
    if normal[1] < 0 or (normal[1] == 0 and normal[0] < 0):
        normal = -normal
    residuals = centred @ normal
    return TLSLine(float(normal[0]), float(normal[1]), float(normal @ centroid)), residuals


def _source_line(poly: Polyline) -> Tuple[np.ndarray, float]:
    a = np.array(poly.source.x)
    direction = np.array(poly.source.x_prime) - a
    normal = np.array([-direction[1], direction[0]]) / np.hypot(*direction)
    return normal, float(normal @ a)


class _StraightnessObjective:
    """
    Residual vector as a function of the free parameters (k1..k5, u0, v0):
    one straightness entry per observation point, then one anchor entry per
    polyline when the problem is anchored.
    """

    def __init__(self, problem: CalibProblem):
        self.problem = problem
        self.penalty = problem.options.penalty
        self.polylines = [poly for poly in problem.observations if len(poly.points) >= 2]
        if not self.polylines:
            raise DegenerateError("No polyline with at least 2 points to calibrate from")
        self.points = np.vstack([poly.points for poly in self.polylines])
        self.bounds = np.cumsum([0] + [len(poly.points) for poly in self.polylines])
        self.anchors = [_source_line(poly) for poly in self.polylines] if problem.anchored else []
        self.size = len(self.points) + len(self.anchors)

    def params(self, free: np.ndarray) -> FisheyeParams:
        mu, mv = self.problem.gauge
        return FisheyeParams(
            tuple(free[:5]), mu, mv, free[5], free[6], theta_max=self.problem.initial.theta_max
        )

    def _rectify(self, params: FisheyeParams):
        rectified = rectify_points(self.points, params, self.problem.pinhole)
        radius = np.hypot(
            (self.points[:, 0] - params.u0) / params.mu, (self.points[:, 1] - params.v0) / params.mv
        )
        overshoot = np.maximum(radius - params.r_max, 0.0) * min(params.mu, params.mv)
        return rectified, overshoot

    def evaluate(self, params: FisheyeParams) -> np.ndarray:
        return self._straightness(*self._rectify(params))

    def _straightness(self, rectified, overshoot: np.ndarray) -> np.ndarray:
        out = np.empty(len(self.points))
        for lo, hi in zip(self.bounds[:-1], self.bounds[1:]):
            out[lo:hi] = self._line_residuals(
                self.points[lo:hi], rectified.xy[lo:hi], rectified.valid[lo:hi], overshoot[lo:hi]
            )
        return out

    def _line_residuals(
        self, observed: np.ndarray, xy: np.ndarray, valid: np.ndarray, overshoot: np.ndarray
    ) -> np.ndarray:
        # points off the valid disk pay the penalty plus their pixel overshoot
        out = np.where(valid, 0.0, self.penalty + overshoot)
        inside = np.flatnonzero(valid)
        if len(inside) < 3:
            # two points are always collinear
            return out

        _, residuals = fit_line_tls(xy[inside])
        first, last = inside[0], inside[-1]
        rect_chord = math.hypot(*(xy[last] - xy[first]))
        obs_chord = math.hypot(*(observed[last] - observed[first]))
        scale = obs_chord / rect_chord if rect_chord > 0 else 1.0
        out[inside] = residuals * scale
        return out

    def _anchor_residuals(self, rectified) -> np.ndarray:
        out = np.zeros(len(self.anchors))
        for i, ((normal, offset), lo, hi) in enumerate(
            zip(self.anchors, self.bounds[:-1], self.bounds[1:])
        ):
            valid = rectified.valid[lo:hi]
            if valid.any():
                distances = rectified.xy[lo:hi][valid] @ normal - offset
                out[i] = distances.sum() / math.sqrt(len(distances))
        return out

    def residuals(self, params: FisheyeParams) -> np.ndarray:
        rectified, overshoot = self._rectify(params)
        straight = self._straightness(rectified, overshoot)
        if not self.anchors:
            return straight
        return np.concatenate([straight, self._anchor_residuals(rectified)])

    def admissible(self, free: np.ndarray) -> bool:
        try:
            require_monotonic(self.params(free))
        except (InvalidParamsError, NonMonotoneError):
            return False
        return True

    def __call__(self, free: np.ndarray) -> np.ndarray:
        try:
            return self.residuals(self.params(free))
        except (InvalidParamsError, NonMonotoneError):
            return np.full(self.size, self.penalty)

    def rms(self, cost: float) -> float:
        return math.sqrt(2.0 * cost / self.size)

    def per_line_rms(self, residuals: np.ndarray) -> List[float]:
        return [
            float(np.sqrt(np.mean(residuals[lo:hi] ** 2)))
            for lo, hi in zip(self.bounds[:-1], self.bounds[1:])
        ]


def straightness_residuals(params: FisheyeParams, problem: CalibProblem) -> np.ndarray:
    """
    Per-point TLS distances of every observation after rectification with
    `params`. Each polyline's distances are multiplied by its observed chord
    over its rectified chord, so they read in observed-image pixels and the
    solver gains nothing by shrinking the rectified lines toward the centre.
    Points off the valid disk score the domain penalty plus their overshoot in
    pixels.
    """
    require_monotonic(params)
    return _StraightnessObjective(problem).evaluate(params)


def _free_vector(params: FisheyeParams) -> np.ndarray:
    return np.array(params.k + (params.u0, params.v0))


def _jacobian(fun, x: np.ndarray, step: float) -> np.ndarray:
    columns = []
    for j in range(len(x)):
        h = step * max(1.0, abs(x[j]))
        forward = x.copy()
        backward = x.copy()
        forward[j] += h
        backward[j] -= h
        columns.append((fun(forward) - fun(backward)) / (2.0 * h))
    return np.column_stack(columns)


def _solve_lm(objective: _StraightnessObjective, x0: np.ndarray, options: LMOptions) -> SolverRun:
    x = x0.copy()
    r = objective(x)
    cost = 0.5 * float(r @ r)
    lam = options.lambda_init
    history = [cost]
    stalled = 0
    last_decrease = math.inf

    for iteration in range(options.max_iterations):
        if cost == 0.0:
            return SolverRun(x, iteration, True, "zero cost", history)

        J = _jacobian(objective, x, options.fd_step)
        g = J.T @ r
        if np.max(np.abs(g)) < options.grad_tol:
            return SolverRun(x, iteration, True, "gradient", history)

        A = J.T @ J
        D = np.diag(A).copy()
        D = np.maximum(D, 1e-12 * max(float(D.max()), 1.0))

        while True:
            try:
                delta = np.linalg.solve(A + lam * np.diag(D), -g)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(A + lam * np.diag(D), -g, rcond=None)[0]

            x_new = x + delta
            if objective.admissible(x_new):
                r_new = objective(x_new)
                cost_new = 0.5 * float(r_new @ r_new)
                if cost_new < cost:
                    break
            lam *= options.lambda_up
            if lam > options.lambda_max:
                # no damping level decreases the cost
                settled = (
                    objective.rms(cost) <= options.residual_floor
                    or last_decrease < options.settle_tol
                )
                return SolverRun(x, iteration + 1, settled, "damping limit", history)

        relative_decrease = (cost - cost_new) / cost
        relative_step = np.linalg.norm(delta) / max(np.linalg.norm(x), 1e-300)
        x, r, cost = x_new, r_new, cost_new
        history.append(cost)
        last_decrease = relative_decrease
        lam = max(lam * options.lambda_down, options.lambda_min)
        if options.verbose:
            print(f"Iteration {iteration + 1}: cost={cost:.6e}, lambda={lam:.1e}")

        stalled = stalled + 1 if relative_decrease < options.cost_tol else 0
        if stalled >= options.stall_steps:
            return SolverRun(x, iteration + 1, True, "cost", history)
        if relative_step < options.step_tol:
            return SolverRun(x, iteration + 1, True, "step", history)

    return SolverRun(x, options.max_iterations, False, "max iterations", history)


def _solve_trf(objective: _StraightnessObjective, x0: np.ndarray, options: LMOptions) -> SolverRun:
    result = least_squares(
        objective,
        x0,
        jac="3-point",
        method="trf",
        x_scale="jac",
        diff_step=options.fd_step,
        ftol=options.cost_tol,
        xtol=options.step_tol,
        gtol=options.grad_tol,
        max_nfev=options.max_iterations * (2 * len(x0) + 1),
        verbose=2 if options.verbose else 0,
    )
    r0 = objective(x0)
    history = [0.5 * float(r0 @ r0), float(result.cost)]
    return SolverRun(result.x, int(result.nfev), bool(result.status > 0), result.message, history)


def _sweep_starts(objective: _StraightnessObjective, x0: np.ndarray, count: int) -> List[np.ndarray]:
    """
    Equidistant profiles centred on x0's principal point whose r_max runs
    from just past the farthest observation outwards, lowest cost first.
    """
    gauge = np.array(objective.problem.gauge)
    reach = float(np.max(np.hypot(*((objective.points - x0[5:]) / gauge).T)))
    theta_max = objective.problem.initial.theta_max

    scored = []
    for factor in SWEEP_FACTORS:
        x = x0.copy()
        x[:5] = (factor * max(reach, 1.0) / theta_max, 0.0, 0.0, 0.0, 0.0)
        if np.allclose(x, x0):
            continue
        r = objective(x)
        scored.append((0.5 * float(r @ r), x))
    scored.sort(key=lambda item: item[0])
    return [x for _, x in scored[:count]]


def estimate_params(problem: CalibProblem) -> CalibResult:
    """
    Minimise half the squared straightness residuals over (k1..k5, u0, v0)
    with m_u, m_v fixed at the problem's gauge, plus the source-line anchors
    when the problem is anchored. The solver runs from the initial guess and
    then from the best equidistant sweep starts until one run reaches
    `restart_rms`; the lowest final cost wins. The result is flagged, not
    raised, when the winning run did not converge or the problem has fewer
    than three usable lines.
    """
    require_monotonic(problem.initial)
    degenerate = problem.degenerate
    if not problem.usable:
        raise DegenerateError("No observation has at least 3 points")
    if degenerate:
        warnings.warn(
            f"Only {len(problem.usable)} usable polyline(s); the calibration is under-constrained",
            RuntimeWarning,
        )
    elif _distinct_directions(problem.usable) < 3:
        warnings.warn("Observed lines span fewer than 3 distinct directions", RuntimeWarning)

    options = problem.options
    objective = _StraightnessObjective(problem)
    solve = _solve_trf if options.solver == "trf" else _solve_lm
    x0 = _free_vector(problem.initial)

    best: Optional[SolverRun] = None
    best_start = 0
    for start, x in enumerate([x0] + _sweep_starts(objective, x0, options.starts - 1)):
        run = solve(objective, x, options)
        if options.verbose:
            print(f"Start {start}: {run.reason} after {run.iterations} iterations")
        if best is None or run.history[-1] < best.history[-1]:
            best, best_start = run, start
        if objective.rms(best.history[-1]) < options.restart_rms:
            break

    params = objective.params(best.x)
    require_monotonic(params)
    residuals = objective.evaluate(params)
    return CalibResult(
        params=params,
        rms_residual=float(np.sqrt(np.mean(residuals**2))),
        line_residuals=objective.per_line_rms(residuals),
        iterations=best.iterations,
        converged=best.converged,
        degenerate=degenerate,
        reason=best.reason,
        cost_history=best.history,
        start=best_start,
    )


def _distinct_directions(polylines: Sequence[Polyline], tolerance_deg: float = 5.0) -> int:
    angles = sorted(
        math.degrees(math.atan2(*(poly.points[-1] - poly.points[0])[::-1])) % 180.0
        for poly in polylines
    )
    distinct = []
    for angle in angles:
        if not distinct or angle - distinct[-1] > tolerance_deg:
            distinct.append(angle)
    if len(distinct) > 1 and distinct[0] + 180.0 - distinct[-1] <= tolerance_deg:
        distinct.pop()
    return len(distinct)


def init_params(
    image_size: Tuple[int, int],
    theta_fov_guess: float = 1.2,
    gauge: float = 1.0,
    theta_max: float = DEFAULT_THETA_MAX,
) -> FisheyeParams:
    """Equidistant start: the half-diagonal is reached at theta_fov_guess"""
    width, height = image_size
    if width < 1 or height < 1:
        raise InvalidParamsError(f"Image size must be positive, got {image_size}")
    if not 0 < theta_fov_guess < math.pi / 2:
        raise InvalidParamsError(f"theta_fov_guess must lie in (0, pi/2), got {theta_fov_guess}")
    k1 = (math.hypot(width, height) / 2.0 / gauge) / theta_fov_guess
    return FisheyeParams(
        (k1, 0.0, 0.0, 0.0, 0.0), gauge, gauge, width / 2.0, height / 2.0, theta_max=theta_max
    )


def rectified_deviation(
    estimated: FisheyeParams,
    truth: FisheyeParams,
    points: np.ndarray,
    pinhole: VirtualPinhole,
    penalty: float = DOMAIN_PENALTY,
) -> np.ndarray:
    """
    Squared distance between the rectifications of each fisheye pixel under
    the two parameter sets; points invalid under either score penalty^2.
    """
    est = rectify_points(points, estimated, pinhole)
    ref = rectify_points(points, truth, pinhole)
    both = est.valid & ref.valid
    out = np.full(len(both), penalty * penalty)
    out[both] = np.sum((est.xy[both] - ref.xy[both]) ** 2, axis=1)
    return out


def evaluate_rpe(
    estimated: FisheyeParams,
    truth: FisheyeParams,
    domain: np.ndarray,
    pinhole: VirtualPinhole,
) -> RPE:
    """Mean squared rectification deviation over `domain` ((N, 2) points or an H x W mask)"""
    domain = np.asarray(domain)
    if domain.dtype == bool:
        ys, xs = np.nonzero(domain)
        domain = np.column_stack([xs, ys])
    points = domain.astype(np.float64).reshape(-1, 2)
    if len(points) == 0:
        raise DegenerateError("RPE domain is empty")

    mse = float(np.mean(rectified_deviation(estimated, truth, points, pinhole)))
    return RPE(mse, math.sqrt(mse), len(points))


def whole_image_domain(
    estimated: FisheyeParams,
    truth: FisheyeParams,
    pinhole: VirtualPinhole,
    size: Optional[Tuple[int, int]] = None,
    stride: int = 1,
) -> np.ndarray:
    """
    Fisheye pixels valid under both parameter sets whose ground-truth
    rectification lands inside the rectified raster.
    """
    width, height = size or (pinhole.width, pinhole.height)
    us, vs = np.meshgrid(
        np.arange(0, width, stride, dtype=np.float64),
        np.arange(0, height, stride, dtype=np.float64),
    )
    points = np.column_stack([us.ravel(), vs.ravel()])
    _, _, valid_est = unproject_masked(points[:, 0], points[:, 1], estimated)
    ref = rectify_points(points, truth, pinhole)
    with np.errstate(invalid="ignore"):
        inside = (
            ref.valid
            & (ref.xy[:, 0] >= 0)
            & (ref.xy[:, 0] <= pinhole.width - 1)
            & (ref.xy[:, 1] >= 0)
            & (ref.xy[:, 1] <= pinhole.height - 1)
        )
    return points[valid_est & inside]


def perturb_polylines(
    polylines: Sequence[Polyline], sigma: float, seed: int
) -> List[Polyline]:
    """Copy of `polylines` with isotropic Gaussian noise of std `sigma` px on every sample"""
    rng = np.random.default_rng(seed)
    return [
        Polyline(poly.points + rng.normal(0.0, sigma, size=poly.points.shape), poly.source)
        for poly in polylines
    ]
