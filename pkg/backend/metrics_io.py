"""
Image quality metrics, sRGB transfer curves and file formats (PFM, PNG, CSV, JSON).

All solver math happens in linear radiance; the sRGB curve is applied only at the
PNG boundary.
"""

import io
import json
import logging
import math
import os
import re  # PFM header tokens
from typing import Iterable, List, Optional

import numpy as np  # Pixel buffers for PFM/PNG coding
import pandas as pd  # Metric tables: CSV writing and reading
from PIL import Image as PILImage  # 8-bit PNG encoding and decoding

from backend.core import as_image
from backend.errors import (
    PfmDimensionError,
    PfmHeaderError,
    PfmTruncatedError,
    PngFormatError,
    ShapeError,
)
from backend.schemas import MetricReport
from backend.utils import atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

# PFM files larger than this per side are refused.
MAX_PFM_DIMENSION = 1 << 15
CSV_COLUMNS = ["scene", "pattern", "k", "solver", "psnr_diffuse", "psnr_specular", "psnr_sum"]
IDENTICAL = "identical"


# --- METRICS ---

def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all pixels and channels; inf when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"PSNR of images with different shapes: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def evaluate_estimates(est_diffuse, est_specular, true_diffuse, true_specular, scene: str = "scene",
                       pattern: str = "", k: int = 0, solver: str = "", wall_time_s: float = 0.0,
                       config: Optional[dict] = None) -> MetricReport:
    """PSNR of both layers and of their sum against the ground truth."""
    est_d, est_s = as_image(est_diffuse, "diffuse estimate"), as_image(est_specular, "specular estimate")
    true_d, true_s = as_image(true_diffuse, "diffuse truth"), as_image(true_specular, "specular truth")
    return MetricReport(
        scene=scene, pattern=pattern, k=k, solver=solver,
        psnr_diffuse=psnr(est_d, true_d),
        psnr_specular=psnr(est_s, true_s),
        psnr_sum=psnr(est_d + est_s, true_d + true_s),
        wall_time_s=wall_time_s,
        config=config or {},
    )


# --- COLOUR ---

def linear_to_srgb(img) -> np.ndarray:
    """Standard sRGB encoding of values clamped to [0, 1]."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(img) -> np.ndarray:
    """Inverse of linear_to_srgb on [0, 1]."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


# --- PFM ---

def _read_header_line(stream: io.BufferedIOBase, what: str) -> str:
    line = stream.readline()
    if not line or not line.endswith(b"\n"):
        raise PfmHeaderError(f"missing {what} line")
    try:
        return line.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise PfmHeaderError(f"non-ASCII {what} line") from exc


def decode_pfm(payload: bytes) -> np.ndarray:
    """Parses PFM bytes into an (H, W, C) float64 image, top row first."""
    stream = io.BytesIO(payload)
    ident = _read_header_line(stream, "identifier")
    if ident == "PF":
        channels = 3
    elif ident == "Pf":
        channels = 1
    else:
        raise PfmHeaderError(f"unrecognized identifier {ident!r}")

    dims = _read_header_line(stream, "dimension")
    match = re.fullmatch(r"(-?\d+)\s+(-?\d+)", dims)
    if not match:
        raise PfmHeaderError(f"could not parse dimensions {dims!r}")
    width, height = int(match.group(1)), int(match.group(2))
    if width <= 0 or height <= 0 or width > MAX_PFM_DIMENSION or height > MAX_PFM_DIMENSION:
        raise PfmDimensionError(f"unsupported dimensions {width}x{height}")

    scale_line = _read_header_line(stream, "scale")
    try:
        scale = float(scale_line)
    except ValueError as exc:
        raise PfmHeaderError(f"could not parse scale {scale_line!r}") from exc
    if scale == 0.0 or not math.isfinite(scale):
        raise PfmHeaderError(f"invalid scale {scale_line!r}")
    dtype = "<f4" if scale < 0 else ">f4"

    count = width * height * channels
    raw = stream.read(count * 4)
    if len(raw) < count * 4:
        raise PfmTruncatedError(f"payload has {len(raw)} bytes, header promises {count * 4}")
    data = np.frombuffer(raw, dtype=dtype).reshape(height, width, channels)
    # PFM stores rows bottom-to-top.
    return data[::-1].astype(np.float64)


def encode_pfm(img) -> bytes:
    """Little-endian PFM bytes of a 1- or 3-channel image (float32 payload)."""
    img = as_image(img)
    channels = img.shape[2]
    if channels not in (1, 3):
        raise ShapeError(f"PFM holds 1 or 3 channels, got {channels}")
    height, width = img.shape[:2]
    header = f"{'PF' if channels == 3 else 'Pf'}\n{width} {height}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(img[::-1], dtype="<f4").tobytes()


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        payload = f.read()
    try:
        return decode_pfm(payload)
    except (PfmHeaderError, PfmDimensionError, PfmTruncatedError) as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def write_pfm(path: str, img) -> None:
    atomic_write_bytes(path, encode_pfm(img))


# --- PNG ---

def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def _png_bytes(array_u8: np.ndarray) -> bytes:
    if array_u8.shape[2] == 1:
        pil = PILImage.fromarray(array_u8[:, :, 0], mode="L")
    elif array_u8.shape[2] == 3:
        pil = PILImage.fromarray(array_u8, mode="RGB")
    else:
        raise ShapeError(f"PNG holds 1 or 3 channels, got {array_u8.shape[2]}")
    buffer = io.BytesIO()
    pil.save(buffer, format="PNG")
    return buffer.getvalue()


def write_png(path: str, img) -> None:
    """8-bit sRGB-encoded PNG of a linear image."""
    atomic_write_bytes(path, _png_bytes(_to_uint8(linear_to_srgb(as_image(img)))))


def read_png(path: str) -> np.ndarray:
    """8-bit PNG decoded to linear radiance, shape (H, W, C) with C = 1 or 3."""
    with PILImage.open(path) as pil:
        if pil.mode == "L":
            data = np.asarray(pil, dtype=np.float64)[:, :, None]
        elif pil.mode in ("RGB", "RGBA", "P"):
            data = np.asarray(pil.convert("RGB"), dtype=np.float64)
        else:
            raise PngFormatError(f"{path}: unsupported PNG mode {pil.mode}")
    return srgb_to_linear(data / 255.0)


def write_normal_png(path: str, normals) -> None:
    """Normal map visualisation n * 0.5 + 0.5, no transfer curve."""
    normals = np.asarray(normals, dtype=np.float64)
    if normals.ndim != 3 or normals.shape[2] != 3:
        raise ShapeError(f"normal maps have shape (H, W, 3), got {normals.shape}")
    atomic_write_bytes(path, _png_bytes(_to_uint8(normals * 0.5 + 0.5)))


def read_image(path: str) -> np.ndarray:
    """Dispatches on the suffix: .pfm is linear, .png is sRGB-decoded."""
    suffix = os.path.splitext(path)[1].lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix == ".png":
        return read_png(path)
    raise PngFormatError(f"{path}: unsupported image format {suffix!r}")


def write_image(path: str, img) -> None:
    """Writes .pfm as linear floats and .png as 8-bit sRGB, chosen by the file suffix."""
    suffix = os.path.splitext(path)[1].lower()
    if suffix == ".pfm":
        write_pfm(path, img)
    elif suffix == ".png":
        write_png(path, img)
    else:
        raise PngFormatError(f"{path}: unsupported image format {suffix!r}")


# --- TABLES AND DIAGNOSTICS ---

def _psnr_cell(value: float):
    return IDENTICAL if math.isinf(value) else round(value, 6)


def metrics_frame(rows: Iterable[MetricReport]) -> pd.DataFrame:
    records = [
        {
            "scene": r.scene,
            "pattern": r.pattern,
            "k": r.k,
            "solver": r.solver,
            "psnr_diffuse": _psnr_cell(r.psnr_diffuse),
            "psnr_specular": _psnr_cell(r.psnr_specular),
            "psnr_sum": _psnr_cell(r.psnr_sum),
        }
        for r in rows
    ]
    return pd.DataFrame.from_records(records, columns=CSV_COLUMNS)


def write_metrics_csv(path: str, rows: Iterable[MetricReport]) -> None:
    """CSV with a header row and the stable column order of CSV_COLUMNS."""
    atomic_write_text(path, metrics_frame(rows).to_csv(index=False, lineterminator="\n"))


def read_metrics_csv(path: str) -> List[MetricReport]:
    """Rows written by write_metrics_csv; 'identical' cells come back as inf."""
    frame = pd.read_csv(path, dtype={"scene": str, "pattern": str, "solver": str})
    frame = frame.fillna({"pattern": "", "solver": ""})

    def parse(value) -> float:
        return math.inf if str(value) == IDENTICAL else float(value)

    return [
        MetricReport(scene=row.scene, pattern=row.pattern, k=int(row.k), solver=row.solver,
                     psnr_diffuse=parse(row.psnr_diffuse), psnr_specular=parse(row.psnr_specular),
                     psnr_sum=parse(row.psnr_sum))
        for row in frame.itertuples(index=False)
    ]


def write_json(path: str, payload: dict) -> None:
    """Pretty JSON sidecar; infinities are written as the string 'identical'."""

    def sanitize(value):
        if isinstance(value, float) and math.isinf(value):
            return IDENTICAL
        if isinstance(value, dict):
            return {k: sanitize(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [sanitize(v) for v in value]
        if isinstance(value, np.generic):
            return sanitize(value.item())
        return value

    atomic_write_text(path, json.dumps(sanitize(payload), indent=2, sort_keys=True))
