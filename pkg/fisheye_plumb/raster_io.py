import json
from pathlib import Path
from typing import Any, Union

import cv2
import numpy as np

from .errors import InputError
from .rasters import ImageBuffer, LineMap
from .rectifier import RemapGrid

PathLike = Union[str, Path]

LMAP_MAGIC = b"LMAP"
LMAP_ENDIAN_TAG = 0x01020304
LMAP_HEADER_BYTES = 16


def read_image(path: PathLike) -> ImageBuffer:
    """8-bit (or 16-bit) PNG/JPEG into an RGB or grayscale buffer in [0, 1]"""
    path = Path(path)
    if not path.is_file():
        raise InputError(path, "Image file not found")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(path, "Could not decode image")

    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    if raw.ndim == 3 and raw.shape[2] == 4:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2BGR)
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return ImageBuffer(raw.astype(np.float64) / scale)


def _write_png(path: Path, pixels: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), pixels):
        raise InputError(path, "Could not write image")


def write_image(path: PathLike, img: ImageBuffer) -> Path:
    """8-bit PNG; invalid pixels are already black in the buffer"""
    path = Path(path)
    pixels = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    if img.channels == 3:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)
    else:
        pixels = pixels[:, :, 0]
    _write_png(path, pixels)
    return path


def write_mask(path: PathLike, valid: np.ndarray) -> Path:
    path = Path(path)
    _write_png(path, np.where(valid, 255, 0).astype(np.uint8))
    return path


def read_mask(path: PathLike) -> np.ndarray:
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise InputError(path, "Could not read mask image")
    return raw > 127


def _lmap_header(height: int, width: int) -> bytes:
    return LMAP_MAGIC + np.array([height, width, LMAP_ENDIAN_TAG], dtype="<u4").tobytes()


def _read_lmap(path: Path):
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise InputError(path, f"Could not read raster ({e.strerror})") from e
    if len(blob) < LMAP_HEADER_BYTES or blob[:4] != LMAP_MAGIC:
        raise InputError(path, "Not an LMAP raster")

    for order in ("<", ">"):
        fields = np.frombuffer(blob, dtype=f"{order}u4", count=3, offset=4)
        if fields[2] == LMAP_ENDIAN_TAG:
            return int(fields[0]), int(fields[1]), order, blob[LMAP_HEADER_BYTES:]
    raise InputError(path, "Unknown LMAP endianness tag")


def write_line_map(path: PathLike, line_map: LineMap) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = line_map.data.astype("<f4").tobytes()
    path.write_bytes(_lmap_header(line_map.height, line_map.width) + payload)
    return path


def read_line_map(path: PathLike) -> LineMap:
    path = Path(path)
    height, width, order, body = _read_lmap(path)
    if len(body) != 4 * height * width:
        raise InputError(path, "LMAP payload does not match its header")
    data = np.frombuffer(body, dtype=f"{order}f4").reshape(height, width)
    return LineMap(data.astype(np.float64))


def write_remap_grid(path: PathLike, grid: RemapGrid) -> Path:
    """Two float32 planes (u, v) followed by a packed validity bitplane"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = (
        grid.map_x.astype("<f4").tobytes()
        + grid.map_y.astype("<f4").tobytes()
        + np.packbits(grid.valid.ravel()).tobytes()
    )
    header = _lmap_header(grid.height, grid.width)
    source = np.array(grid.source_size, dtype="<u4").tobytes()
    path.write_bytes(header + payload + source)
    return path


def read_remap_grid(path: PathLike) -> RemapGrid:
    path = Path(path)
    height, width, order, body = _read_lmap(path)
    plane = 4 * height * width
    bits = (height * width + 7) // 8
    if len(body) != 2 * plane + bits + 8:
        raise InputError(path, "LMAP grid payload does not match its header")

    map_x = np.frombuffer(body, dtype=f"{order}f4", count=height * width)
    map_y = np.frombuffer(body, dtype=f"{order}f4", count=height * width, offset=plane)
    valid = np.unpackbits(
        np.frombuffer(body, dtype=np.uint8, count=bits, offset=2 * plane)
    )[: height * width].astype(bool)
    source = np.frombuffer(body, dtype=f"{order}u4", count=2, offset=2 * plane + bits)
    return RemapGrid(
        map_x.reshape(height, width).astype(np.float64),
        map_y.reshape(height, width).astype(np.float64),
        valid.reshape(height, width),
        (int(source[0]), int(source[1])),
    )


def dumps_json(data: Any) -> str:
    """
    Deterministic JSON text: sorted keys, "inf" for infinities, floats in
    their shortest round-trip repr (the same double as a 17-digit rendering)
    """
    return json.dumps(_encode_inf(data), indent=2, sort_keys=True) + "\n"


def _encode_inf(value: Any) -> Any:
    if isinstance(value, float) and np.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _encode_inf(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode_inf(v) for v in value]
    return value


def write_json(path: PathLike, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(data))
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise InputError(path, "File not found") from e
    except json.JSONDecodeError as e:
        raise InputError(path, f"Invalid JSON ({e.msg} at line {e.lineno})") from e
    except OSError as e:
        raise InputError(path, f"Could not read file ({e.strerror})") from e
