"""Raster types, file I/O, patch geometry and annotation agreement.

All rasters are numpy arrays in a single canonical layout: row-major,
channel-interleaved ``(height, width[, channels])``. Images hold float64
intensities in [0, 1], label maps hold uint8 values in {0, 1} (1 = vessel),
probability maps hold float64 values in [0, 1].
"""
import logging
import os
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np
from PIL import Image

from .errors import RasterError

logger = logging.getLogger(__name__)

# Pillow reports binary PGM and PPM both as "PPM".
SUPPORTED_FORMATS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}
DEFAULT_BINARIZE_THRESHOLD = 0.5


@dataclass(eq=False)
class RasterImage:
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise RasterError(f"image must be HxWx1 or HxWx3, got shape {data.shape}")
        _check_extent(data.shape[0], data.shape[1])
        if not np.all((data >= 0.0) & (data <= 1.0)):
            raise RasterError("image values must lie in [0, 1]")
        self.data = data

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])


@dataclass(eq=False)
class LabelMap:
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise RasterError(f"label map must be 2-D, got shape {data.shape}")
        _check_extent(data.shape[0], data.shape[1])
        if data.dtype == np.bool_:
            data = data.astype(np.uint8)
        elif not np.all((data == 0) | (data == 1)):
            raise RasterError("label map values must be 0 or 1")
        self.data = data.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])


@dataclass(eq=False)
class ProbMap:
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise RasterError(f"probability map must be 2-D, got shape {data.shape}")
        _check_extent(data.shape[0], data.shape[1])
        if not np.all((data >= 0.0) & (data <= 1.0)):
            raise RasterError("probability values must lie in [0, 1]")
        self.data = data

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])


Raster = Union[RasterImage, LabelMap, ProbMap]


class Region(NamedTuple):
    """Axis-aligned rectangle; grid cells on ragged edges are not square."""

    y0: int
    x0: int
    height: int
    width: int


@dataclass(frozen=True)
class PatchRect:
    x0: int
    y0: int
    side: int

    def __post_init__(self) -> None:
        if self.side < 1 or self.x0 < 0 or self.y0 < 0:
            raise RasterError(f"invalid patch rectangle {self}")

    @property
    def region(self) -> Region:
        return Region(self.y0, self.x0, self.side, self.side)

    def fits(self, height: int, width: int) -> bool:
        return self.y0 + self.side <= height and self.x0 + self.side <= width


def _check_extent(height: int, width: int) -> None:
    if height < 1 or width < 1:
        raise RasterError(f"zero-sized raster ({height}x{width})")


def _format_for(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    fmt = SUPPORTED_FORMATS.get(ext)
    if fmt is None:
        raise RasterError(f"unsupported raster format '{ext}' ({path})")
    return fmt


def load_raster(
    path: str, kind: str = "image", binarize_threshold: float = DEFAULT_BINARIZE_THRESHOLD
) -> Union[RasterImage, LabelMap]:
    """Read an 8-bit PNG or binary PGM/PPM as an image or a label map.

    Labels are set to 1 where the stored intensity, scaled to [0, 1], is at
    least ``binarize_threshold``.
    """
    if kind not in ("image", "label"):
        raise RasterError(f"kind must be 'image' or 'label', got {kind!r}")
    expected = _format_for(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.format != expected:
                raise RasterError(f"{path}: content is {img.format}, expected {expected}")
            if img.mode in ("I;16", "I;16B", "I", "F"):
                raise RasterError(f"{path}: only 8-bit rasters are supported (mode {img.mode})")
            if kind == "label":
                gray = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
                _check_extent(*gray.shape)
                return LabelMap((gray >= binarize_threshold).astype(np.uint8))
            if img.mode in ("L", "1"):
                arr = np.asarray(img.convert("L"), dtype=np.float64)
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except FileNotFoundError as e:
        raise RasterError(f"{path}: file not found") from e
    except OSError as e:
        raise RasterError(f"{path}: unreadable raster ({e})") from e
    return RasterImage(arr / 255.0)


def _to_uint8(raster: Raster) -> np.ndarray:
    if isinstance(raster, LabelMap):
        return (raster.data * 255).astype(np.uint8)
    arr = np.round(raster.data * 255.0).astype(np.uint8)
    if isinstance(raster, RasterImage) and raster.channels == 1:
        arr = arr[:, :, 0]
    return arr


def save_raster(raster: Raster, path: str) -> None:
    """Write a raster as 8-bit PNG/PGM/PPM; labels are stored as {0, 255}."""
    fmt = _format_for(path)
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    arr = _to_uint8(raster)
    try:
        Image.fromarray(arr).save(path, format=fmt)
    except OSError as e:
        raise RasterError(f"{path}: cannot write raster ({e})") from e


def crop_region(src: Raster, region: Region) -> Raster:
    y0, x0, h, w = region
    if y0 < 0 or x0 < 0 or h < 1 or w < 1 or y0 + h > src.height or x0 + w > src.width:
        raise RasterError(f"region {tuple(region)} outside {src.height}x{src.width} raster")
    return type(src)(src.data[y0 : y0 + h, x0 : x0 + w].copy())


def crop(src: Raster, rect: PatchRect) -> Raster:
    """Square crop; output pixel (i, j) is source pixel (y0 + i, x0 + j)."""
    if not rect.fits(src.height, src.width):
        raise RasterError(f"{rect} extends past the {src.height}x{src.width} raster")
    return crop_region(src, rect.region)


def vessel_ratio(label: LabelMap) -> float:
    return float(np.count_nonzero(label.data)) / label.data.size


def _check_same_shape(a: Raster, b: Raster) -> None:
    if a.data.shape[:2] != b.data.shape[:2]:
        raise RasterError(f"dimension mismatch: {a.data.shape[:2]} vs {b.data.shape[:2]}")


def iou(a: LabelMap, b: LabelMap) -> float:
    """Intersection over union; two empty maps agree perfectly (1.0)."""
    _check_same_shape(a, b)
    av = a.data.astype(bool)
    bv = b.data.astype(bool)
    union = np.count_nonzero(av | bv)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(av & bv)) / union


def complement(label: LabelMap) -> LabelMap:
    return LabelMap(1 - label.data)


def to_rgb(image: RasterImage) -> RasterImage:
    if image.channels == 3:
        return image
    return RasterImage(np.repeat(image.data, 3, axis=2))


def agreement_map(first: LabelMap, second: LabelMap) -> RasterImage:
    """Overlay two annotations: common vessels white, first-only red, second-only green."""
    _check_same_shape(first, second)
    a = first.data.astype(bool)
    b = second.data.astype(bool)
    rgb = np.zeros(a.shape + (3,), dtype=np.float64)
    rgb[a & b] = (1.0, 1.0, 1.0)
    rgb[a & ~b] = (1.0, 0.0, 0.0)
    rgb[~a & b] = (0.0, 1.0, 0.0)
    return RasterImage(rgb)
