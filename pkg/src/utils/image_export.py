import csv
import io
import logging
from typing import Sequence

import numpy as np

from src.core.errors import DataError, UsageError
from src.utils.fs_utils import atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)


def matrix_to_csv(matrix) -> str:
    """One row per decoder step, 6 fixed decimals."""
    rows = np.asarray(getattr(matrix, "data", matrix), dtype=np.float64)
    return "".join(",".join(f"{v:.6f}" for v in row) + "\n" for row in rows)


def write_matrix_csv(matrix, output_path: str):
    atomic_write_text(output_path, matrix_to_csv(matrix))
    logger.info(f"Wrote matrix CSV: {output_path}")


def parse_matrix_csv(text: str, source: str = "<csv>") -> np.ndarray:
    rows = []
    width = None
    for line_no, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise UsageError(f"{source}: row {line_no} has {len(row)} columns, expected {width}")
        try:
            rows.append([float(cell) for cell in row])
        except ValueError:
            raise DataError(f"{source}: row {line_no} is not numeric")
    if not rows:
        raise DataError(f"{source}: no rows")
    return np.array(rows, dtype=np.float64)


def read_matrix_csv(path: str) -> np.ndarray:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}")
    except UnicodeDecodeError as e:
        raise DataError(f"{path} is not a UTF-8 text file: {e}")
    return parse_matrix_csv(text, path)


def to_gray(matrix: np.ndarray) -> np.ndarray:
    """Pixel = round(255 * value), clipped to [0, 255]."""
    return np.clip(np.floor(255.0 * np.asarray(matrix) + 0.5), 0, 255).astype(np.uint8)


def encode_pgm(matrix: np.ndarray) -> bytes:
    """Binary P5: width N (encoder positions), height T (decoder steps)."""
    pixels = to_gray(matrix)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def heat_colors(matrix: np.ndarray) -> np.ndarray:
    """Linear blue (0) -> red (1) ramp, shape [T, N, 3]."""
    level = to_gray(matrix).astype(np.int32)
    rgb = np.zeros(level.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = level
    rgb[..., 2] = 255 - level
    return rgb


def encode_ppm(matrix: np.ndarray) -> bytes:
    rgb = heat_colors(matrix)
    height, width = rgb.shape[:2]
    return f"P6\n{width} {height}\n255\n".encode("ascii") + rgb.tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Reads P5/P6 files written by this module (no comments in the header)."""
    fields = data.split(maxsplit=4)
    if len(fields) < 5 or fields[0] not in (b"P5", b"P6"):
        raise DataError("Not a binary PGM/PPM image")
    width, height = int(fields[1]), int(fields[2])
    channels = 1 if fields[0] == b"P5" else 3
    header_len = len(b" ".join(fields[:4])) + 1
    pixels = np.frombuffer(data[header_len:header_len + width * height * channels], dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return pixels.reshape(shape)


def write_image(matrix, output_path: str, heat_map: bool = False):
    matrix = np.asarray(getattr(matrix, "data", matrix), dtype=np.float64)
    atomic_write_bytes(output_path, encode_ppm(matrix) if heat_map else encode_pgm(matrix))
    logger.info(f"Wrote {'PPM heat map' if heat_map else 'PGM'} image: {output_path}")


def write_rows_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buffer.getvalue())
