#!/usr/bin/env python3

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .calibrator import (
    DOMAIN_PENALTY,
    RPE,
    CalibProblem,
    LMOptions,
    estimate_params,
    evaluate_rpe,
    init_params,
    perturb_polylines,
    whole_image_domain,
)
from .camera_model import DEFAULT_THETA_MAX, FisheyeParams, VirtualPinhole, default_pinhole
from .dataset_builder import DEFAULT_SEED, DatasetBuilder, build_dataset
from .dataset_synth import (
    SamplerConfig,
    derive_seed,
    distort_image,
    random_segments,
    synthetic_perspective_image,
)
from .errors import DegenerateError, FisheyeError, InputError
from .losses import LossWeights, line_map_loss, total_loss
from .metrics import coverage_fraction, evaluation_report, pr_curve, psnr, rpe, ssim
from .raster_io import (
    dumps_json,
    read_image,
    read_json,
    read_line_map,
    read_mask,
    write_image,
    write_json,
    write_mask,
)
from .rasters import ImageBuffer
from .rectifier import build_remap, rectify_image, remap_line_map
from .utils import (
    line_sources_known,
    load_config,
    parse_heads_file,
    parse_observations_file,
    parse_params_file,
    parse_pinhole,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_VALIDATION = 3
EXIT_NOT_CONVERGED = 4

# every point scored at the domain penalty
WORST_RPE = RPE(DOMAIN_PENALTY**2, DOMAIN_PENALTY, 0)


def _size(value: Optional[List[int]]) -> Optional[Tuple[int, int]]:
    if value is None:
        return None
    return int(value[0]), int(value[1])


def _mask_path(out: Path, mask_out: Optional[str]) -> Path:
    if mask_out:
        return Path(mask_out)
    return out.with_name(f"{out.stem}_mask.png")


def _pinhole_for(
    args: argparse.Namespace, document: Any, size: Tuple[int, int], theta_max: float
) -> VirtualPinhole:
    """--focal wins, then a pinhole stored next to the params, then the default"""
    if args.focal is not None:
        return VirtualPinhole(args.focal, *size)
    if isinstance(document, dict) and isinstance(document.get("pinhole"), dict):
        return parse_pinhole(document["pinhole"])
    return default_pinhole(*size, theta_max=theta_max)


def print_banner(title: str, rows: Dict[str, Any]):
    print("\n" + "=" * 60)
    print(title)
    for key, value in rows.items():
        print(f"{key}: {value}")
    print("=" * 60)


def cmd_gen_dataset(args: argparse.Namespace) -> int:
    overrides = {}
    if args.variants is not None:
        overrides["variants"] = args.variants
    if args.size is not None:
        overrides["output_size"] = _size(args.size)
    if args.theta_max is not None:
        overrides["theta_max"] = args.theta_max
    if args.focal is not None:
        overrides["source_focal"] = args.focal
    config = SamplerConfig(**overrides)

    if args.synthetic:
        sources = []
        for i in range(args.synthetic):
            source_seed = derive_seed(args.seed + 1, i)
            sources.append(
                (
                    f"synthetic_{i:03d}",
                    synthetic_perspective_image(source_seed, config.output_size),
                    random_segments(
                        source_seed,
                        config.output_size,
                        count=args.lines,
                        min_length=min(60.0, min(config.output_size) / 4),
                    ),
                )
            )
        builder = DatasetBuilder(
            args.out, config, seed=args.seed, split=args.split, progress=not args.no_progress
        )
        builder.run(sources)
        manifest = Path(args.out) / "manifest.json"
    else:
        if not args.images or not args.annotations:
            raise InputError(args.out, "gen-dataset needs --images and --annotations (or --synthetic N)")
        manifest = build_dataset(
            args.images,
            args.annotations,
            config,
            args.out,
            seed=args.seed,
            split=args.split,
            progress=not args.no_progress,
        )

    print(f"Manifest: {manifest}")
    return EXIT_OK


def cmd_distort(args: argparse.Namespace) -> int:
    src = read_image(args.image)
    document = read_json(args.params)
    params = parse_params_file(args.params)
    pinhole = _pinhole_for(args, document, src.size, params.theta_max)
    size = _size(args.size) or src.size

    fisheye = distort_image(src, params, pinhole, size)
    out = Path(args.out)
    write_image(out, fisheye)
    mask_path = write_mask(_mask_path(out, args.mask_out), fisheye.valid)

    print_banner(
        "Distorted Image",
        {
            "Source": args.image,
            "Pinhole focal": f"{pinhole.f:.3f} px",
            "Output": f"{out} ({size[0]}x{size[1]})",
            "Mask": mask_path,
            "Valid coverage": f"{coverage_fraction(fisheye):.3f}",
        },
    )
    return EXIT_OK


def cmd_rectify(args: argparse.Namespace) -> int:
    img = read_image(args.image)
    document = read_json(args.params)
    params = parse_params_file(args.params)
    size = _size(args.size) or img.size
    pinhole = _pinhole_for(args, document, size, params.theta_max)

    rectified = rectify_image(img, build_remap(params, pinhole, img.size))
    out = Path(args.out)
    write_image(out, rectified)
    mask_path = write_mask(_mask_path(out, args.mask_out), rectified.valid)

    print_banner(
        "Rectified Image",
        {
            "Source": args.image,
            "Pinhole focal": f"{pinhole.f:.3f} px",
            "Output": f"{out} ({pinhole.width}x{pinhole.height})",
            "Mask": mask_path,
            "Valid coverage": f"{coverage_fraction(rectified):.3f}",
        },
    )
    return EXIT_OK


def _observation_size(args: argparse.Namespace, document: Dict[str, Any]) -> Tuple[int, int]:
    if args.size is not None:
        return _size(args.size)
    if isinstance(document.get("pinhole"), dict):
        pinhole = parse_pinhole(document["pinhole"])
        return pinhole.width, pinhole.height
    if isinstance(document.get("size"), list) and len(document["size"]) == 2:
        return _size(document["size"])
    raise InputError(args.observations, "Image size unknown; pass --size W H")


def cmd_calibrate(args: argparse.Namespace) -> int:
    polylines, document = parse_observations_file(args.observations)
    size = _observation_size(args, document)
    if args.noise > 0:
        polylines = perturb_polylines(polylines, args.noise, args.seed)

    theta_max = args.theta_max or DEFAULT_THETA_MAX
    initial = init_params(size, args.fov_guess, gauge=args.gauge, theta_max=theta_max)
    options = LMOptions(
        max_iterations=args.max_iterations,
        starts=args.starts,
        solver=args.solver,
        verbose=args.verbose,
    )
    anchored = line_sources_known(document) and not args.no_anchor
    recorded = document.get("pinhole")
    pinhole = parse_pinhole(recorded) if isinstance(recorded, dict) else None
    problem = CalibProblem(
        polylines, size, initial, options=options, pinhole=pinhole, anchored=anchored
    )

    print_banner(
        "Plumb-Line Calibration",
        {
            "Observations": f"{args.observations} ({len(polylines)} polylines)",
            "Image size": f"{size[0]}x{size[1]}",
            "Solver": args.solver,
            "Gauge m_u = m_v": args.gauge,
            "FOV guess": f"{args.fov_guess} rad",
            "Source anchors": "on" if anchored else "off",
            "Noise sigma": f"{args.noise} px (seed {args.seed})",
        },
    )

    result = estimate_params(problem)
    report = result.to_dict()
    report["seed"] = args.seed

    if isinstance(document.get("params"), dict) and isinstance(document.get("pinhole"), dict):
        truth = FisheyeParams.from_dict(document["params"])
        pinhole = parse_pinhole(document["pinhole"])
        domain = whole_image_domain(result.params, truth, pinhole, size)
        error = evaluate_rpe(result.params, truth, domain, pinhole)
        report["rpe_mse"] = error.mse
        report["rpe_rms"] = error.rms

    write_json(args.out, report)

    print("-" * 50)
    print(f"Iterations: {result.iterations} ({result.reason}, start {result.start})")
    print(f"Converged: {'Yes' if result.converged else 'No'}")
    print(f"RMS straightness residual: {result.rms_residual:.6f} px")
    if "rpe_rms" in report:
        print(f"RPE vs ground truth: {report['rpe_rms']:.6f} px RMS")
    if result.degenerate:
        print("Warning: fewer than 3 usable lines, result is under-constrained")
    print(f"Result: {args.out}")
    print("-" * 50)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _load_sample(sample_path: str) -> Tuple[Dict[str, Any], Path]:
    record = read_json(sample_path)
    needed = ("params", "pinhole", "image", "mask", "line_map_distorted", "line_map_rectified")
    if not isinstance(record, dict) or any(key not in record for key in needed):
        raise InputError(sample_path, f"Sample record needs fields: {', '.join(needed)}")
    return record, Path(sample_path).parent


def _score_or(undefined: List[str], name: str, fallback: Any, metric, *args) -> Any:
    """metric(*args), or `fallback` when the overlap is too small to define it"""
    try:
        return metric(*args)
    except DegenerateError as e:
        undefined.append(f"{name} undefined ({e}), scored as {fallback}")
        return fallback


def cmd_eval(args: argparse.Namespace) -> int:
    record, base = _load_sample(args.sample)
    truth = FisheyeParams.from_dict(record["params"])
    pinhole = parse_pinhole(record["pinhole"])
    estimated = parse_params_file(args.params)

    fisheye = read_image(base / record["image"])
    fisheye = ImageBuffer(fisheye.data, read_mask(base / record["mask"]))
    grid_est = build_remap(estimated, pinhole, fisheye.size)
    grid_truth = build_remap(truth, pinhole, fisheye.size)
    rect_est = rectify_image(fisheye, grid_est)
    rect_truth = rectify_image(fisheye, grid_truth)

    pred_map = remap_line_map(read_line_map(base / record["line_map_distorted"]), grid_est)
    truth_map = read_line_map(base / record["line_map_rectified"])
    curve = pr_curve(pred_map, truth_map, tolerance_px=args.tolerance)

    domain = whole_image_domain(estimated, truth, pinhole, fisheye.size)
    undefined: List[str] = []
    report = evaluation_report(
        _score_or(undefined, "psnr", 0.0, psnr, rect_est, rect_truth),
        _score_or(undefined, "ssim", 0.0, ssim, rect_est, rect_truth),
        _score_or(undefined, "rpe", WORST_RPE, rpe, estimated, truth, domain, pinhole),
        curve.best,
    )
    write_json(args.out, report)

    print_banner("Evaluation", {"Sample": args.sample, "Estimated params": args.params})
    for key, value in report.items():
        print(f"{key}: {value}")
    print("-" * 50)
    print(f"Rectified coverage (estimate): {coverage_fraction(rect_est):.3f}")
    for message in undefined:
        print(f"Warning: {message}")
    print(f"Best P/R threshold: {curve.best_threshold:.3f} (tolerance {args.tolerance} px)")
    print(f"Report: {args.out}")
    return EXIT_OK


def cmd_losses_check(args: argparse.Namespace) -> int:
    record, base = _load_sample(args.sample)
    truth = FisheyeParams.from_dict(record["params"])
    pinhole = parse_pinhole(record["pinhole"])
    distorted = read_line_map(base / record["line_map_distorted"])

    heads = parse_heads_file(args.params)
    weights = LossWeights(lambda_c=args.lambda_c)
    breakdown = total_loss(heads, truth, distorted, pinhole, weights).to_dict()
    if args.pred_map:
        breakdown["line_map"] = line_map_loss(read_line_map(args.pred_map), distorted)

    text = dumps_json(breakdown)
    if args.out:
        write_json(args.out, breakdown)
    print(text, end="")
    return EXIT_OK


def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="fisheye_plumb",
        description="Fisheye camera-model toolkit: synthesize, rectify, calibrate and evaluate",
    )
    parser.add_argument("--config", help="JSON file of flag defaults (explicit flags win)")
    subparsers = parser.add_subparsers(dest="command")
    commands: Dict[str, argparse.ArgumentParser] = {}

    gen = subparsers.add_parser("gen-dataset", help="Generate a synthetic fisheye dataset")
    gen.add_argument("--images", nargs="+", help="Perspective source images")
    gen.add_argument("--annotations", nargs="+", help="Annotation JSON per source image")
    gen.add_argument(
        "--synthetic",
        type=int,
        default=0,
        help="Generate N procedural sources instead of reading --images",
    )
    gen.add_argument(
        "--lines", type=int, default=12, help="Segments per procedural source (default: 12)"
    )
    gen.add_argument("--out", help="Output directory")
    gen.add_argument("--variants", type=int, help="Parameter sets per source (default: 4)")
    gen.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="Output size")
    gen.add_argument("--theta-max", type=float, help="Maximum incidence angle in radians")
    gen.add_argument("--focal", type=float, help="Source pinhole focal length in pixels")
    gen.add_argument("--split", default="train", choices=["train", "test"])
    gen.add_argument("--no-progress", action="store_true", help="Hide the progress bar")
    gen.set_defaults(handler=cmd_gen_dataset, needs=("out",))
    commands["gen-dataset"] = gen

    distort = subparsers.add_parser("distort", help="Render a perspective image as fisheye")
    distort.add_argument("--image", help="Perspective input image")
    distort.add_argument("--params", help="Fisheye parameter JSON (or a sample record)")
    distort.add_argument("--out", help="Output fisheye PNG")
    distort.add_argument("--mask-out", help="Validity mask PNG (default: <out>_mask.png)")
    distort.add_argument("--focal", type=float, help="Pinhole focal length of the input")
    distort.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="Output size")
    distort.set_defaults(handler=cmd_distort, needs=("image", "params", "out"))
    commands["distort"] = distort

    rectify = subparsers.add_parser("rectify", help="Rectify a fisheye image")
    rectify.add_argument("--image", help="Fisheye input image")
    rectify.add_argument("--params", help="Fisheye parameter JSON (or a sample record)")
    rectify.add_argument("--out", help="Output rectified PNG")
    rectify.add_argument("--mask-out", help="Validity mask PNG (default: <out>_mask.png)")
    rectify.add_argument("--focal", type=float, help="Virtual pinhole focal length in pixels")
    rectify.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="Rectified size")
    rectify.set_defaults(handler=cmd_rectify, needs=("image", "params", "out"))
    commands["rectify"] = rectify

    calibrate = subparsers.add_parser("calibrate", help="Estimate parameters from distorted lines")
    calibrate.add_argument("--observations", help="Sample record or {\"polylines\": [..]} file")
    calibrate.add_argument("--out", help="CalibResult JSON output")
    calibrate.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="Image size")
    calibrate.add_argument(
        "--solver", default="lm", choices=["lm", "trf"], help="Optimizer (default: lm)"
    )
    calibrate.add_argument(
        "--gauge", type=float, default=1.0, help="Fixed m_u = m_v (default: 1.0)"
    )
    calibrate.add_argument(
        "--fov-guess", type=float, default=1.2, help="Half-diagonal angle for the initial guess"
    )
    calibrate.add_argument("--theta-max", type=float, help="Maximum incidence angle in radians")
    calibrate.add_argument("--max-iterations", type=int, default=200)
    calibrate.add_argument(
        "--starts", type=int, default=3, help="Solver runs, initial guess included (default: 3)"
    )
    calibrate.add_argument(
        "--no-anchor",
        action="store_true",
        help="Ignore recorded source segments and fit straightness only",
    )
    calibrate.add_argument(
        "--noise", type=float, default=0.0, help="Gaussian noise (px) added to observations"
    )
    calibrate.add_argument("--verbose", action="store_true", help="Print every accepted step")
    calibrate.set_defaults(handler=cmd_calibrate, needs=("observations", "out"))
    commands["calibrate"] = calibrate

    evaluate = subparsers.add_parser("eval", help="Score estimated parameters on a sample")
    evaluate.add_argument("--sample", help="Sample record JSON")
    evaluate.add_argument("--params", help="Estimated parameter JSON (or a CalibResult)")
    evaluate.add_argument("--out", help="Report JSON output")
    evaluate.add_argument(
        "--tolerance", type=int, default=1, help="P/R matching tolerance in px (default: 1)"
    )
    evaluate.set_defaults(handler=cmd_eval, needs=("sample", "params", "out"))
    commands["eval"] = evaluate

    losses = subparsers.add_parser("losses-check", help="Dump the loss breakdown for a sample")
    losses.add_argument("--sample", help="Sample record JSON")
    losses.add_argument("--params", help="Parameter JSON or {\"K_g\", \"K_loc\"} heads file")
    losses.add_argument("--pred-map", help="Predicted distorted line map (LMAP) for the map loss")
    losses.add_argument("--lambda-c", type=float, default=50.0, help="Curvature weight")
    losses.add_argument("--out", help="Optional JSON output")
    losses.set_defaults(handler=cmd_losses_check, needs=("sample", "params"))
    commands["losses-check"] = losses

    for command in commands.values():
        command.add_argument(
            "--seed",
            type=int,
            default=DEFAULT_SEED,
            help=f"Master seed (default: {DEFAULT_SEED})",
        )
    return parser, commands


def main(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run one subcommand and return its exit code"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, commands = build_parser()

    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)

    try:
        defaults = load_config(known.config)
    except InputError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INPUT
    for command in commands.values():
        command.set_defaults(**defaults)

    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_INPUT
    missing = [f"--{name.replace('_', '-')}" for name in args.needs if getattr(args, name) is None]
    if missing:
        commands[args.command].error(f"missing required arguments: {', '.join(missing)}")

    try:
        return args.handler(args)
    except InputError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except FisheyeError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        print("\n\nInterrupted by user")
        return 130


def cli():
    """Main entry point"""
    sys.exit(main())
