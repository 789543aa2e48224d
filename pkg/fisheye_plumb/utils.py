from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from .camera_model import FisheyeParams, VirtualPinhole
from .dataset_synth import LineSegment, Polyline
from .errors import DegenerateError, InputError, InvalidParamsError
from .losses import ParamHeads
from .raster_io import read_json

PathLike = Union[str, Path]


def parse_params_file(params_path: PathLike) -> FisheyeParams:
    """
    Parse a JSON file holding fisheye parameters. Accepts either the bare
    parameter object or a sample record with a "params" field.
    """
    data = read_json(params_path)
    if isinstance(data, dict) and "params" in data:
        data = data["params"]
    try:
        return FisheyeParams.from_dict(data)
    except InvalidParamsError as e:
        raise InvalidParamsError(f"{e} (in {params_path})") from e


def parse_annotation_file(annotation_path: PathLike) -> Tuple[Optional[str], List[LineSegment]]:
    """Parse a wireframe-style annotation file: {"filename": .., "lines": [[x1, y1, x2, y2], ..]}"""
    data = read_json(annotation_path)
    if not isinstance(data, dict) or not isinstance(data.get("lines"), list):
        raise InputError(annotation_path, 'Annotation must be an object with a "lines" array')

    segments = []
    for i, line in enumerate(data["lines"]):
        if not isinstance(line, list) or len(line) != 4:
            raise InputError(annotation_path, f"Line {i} must be [x1, y1, x2, y2]")
        try:
            segments.append(LineSegment.from_list(line))
        except DegenerateError:
            # zero-length annotations carry no straightness information
            continue
        except (TypeError, ValueError) as e:
            raise InputError(annotation_path, f"Line {i} is not numeric ({e})") from e
    return data.get("filename"), segments


def parse_observations_file(
    observations_path: PathLike,
) -> Tuple[List[Polyline], Dict[str, Any]]:
    """
    Parse distorted-line observations from a sample record (its "polylines"
    field) or a standalone {"polylines": [..]} file. The whole document is
    returned alongside so callers can pick up ground truth when present.
    """
    data = read_json(observations_path)
    if not isinstance(data, dict) or not isinstance(data.get("polylines"), list):
        raise InputError(observations_path, 'Expected an object with a "polylines" array')

    polylines = []
    for i, points in enumerate(data["polylines"]):
        if not isinstance(points, list) or len(points) < 2:
            raise InputError(observations_path, f"Polyline {i} needs at least 2 points")
        try:
            coords = [(float(p[0]), float(p[1])) for p in points]
        except (TypeError, ValueError, IndexError) as e:
            raise InputError(observations_path, f"Polyline {i} has malformed points") from e
        source = _polyline_source(data, i, coords)
        polylines.append(Polyline(coords, source))
    return polylines, data


def _polyline_source(data: Dict[str, Any], index: int, coords: List[Tuple[float, float]]) -> LineSegment:
    segments = data.get("segments")
    owners = data.get("polyline_segments")
    if isinstance(segments, list) and isinstance(owners, list) and index < len(owners):
        try:
            return LineSegment.from_list(segments[owners[index]])
        except (IndexError, TypeError, ValueError):
            pass

    # standalone observations carry no source; the polyline's chord stands in
    start, end = coords[0], coords[-1]
    if start == end:
        end = (end[0] + 1.0, end[1])
    return LineSegment(start, end)


def parse_pinhole(data: Optional[Dict[str, Any]]) -> Optional[VirtualPinhole]:
    if data is None:
        return None
    return VirtualPinhole.from_dict(data)


def parse_heads_file(heads_path: PathLike) -> ParamHeads:
    """
    Parse {"K_g": [9 values], "K_loc": [[5 values] x 5]}. A plain parameter
    file (or anything parse_params_file accepts) becomes consensus heads.
    """
    data = read_json(heads_path)
    if not isinstance(data, dict) or "K_g" not in data:
        return ParamHeads.consensus(parse_params_file(heads_path))
    if "K_loc" not in data:
        raise InputError(heads_path, 'Heads file needs "K_g" and "K_loc" fields')
    return ParamHeads.from_dict(data)


def line_sources_known(document: Dict[str, Any]) -> bool:
    """True when every observed polyline is tied to a recorded source segment"""
    segments = document.get("segments")
    owners = document.get("polyline_segments")
    polylines = document.get("polylines")
    return (
        isinstance(segments, list)
        and isinstance(owners, list)
        and isinstance(polylines, list)
        and len(owners) == len(polylines)
        and all(isinstance(i, int) and 0 <= i < len(segments) for i in owners)
    )


def load_config(config_path: Optional[PathLike]) -> Dict[str, Any]:
    """
    Read a JSON config whose keys are CLI flag names (dashes or underscores).
    Returns argparse-ready destinations.
    """
    if not config_path:
        return {}
    data = read_json(config_path)
    if not isinstance(data, dict):
        raise InputError(config_path, "Config file must contain a JSON object")
    return {key.lstrip("-").replace("-", "_"): value for key, value in data.items()}
