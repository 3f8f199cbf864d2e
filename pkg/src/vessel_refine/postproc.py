"""Probability map -> binary label map: Otsu threshold and small-component removal."""
import logging
from dataclasses import dataclass
from typing import List, NamedTuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .raster import LabelMap, ProbMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PostprocConfig:
    otsu_bins: int = 256
    min_size: int = 30
    min_size_reference_side: int = 256
    scale_min_size: bool = True
    connectivity: int = 8

    def __post_init__(self) -> None:
        if self.otsu_bins < 2:
            raise ConfigError(f"otsu_bins must be >= 2, got {self.otsu_bins}")
        if self.min_size < 0:
            raise ConfigError(f"min_size must be >= 0, got {self.min_size}")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {self.connectivity}")

    def min_size_for(self, height: int, width: int) -> int:
        if not self.scale_min_size or self.min_size == 0:
            return self.min_size
        area = float(self.min_size_reference_side) ** 2
        return max(1, int(round(self.min_size * height * width / area)))


class OtsuResult(NamedTuple):
    threshold: float
    binary: LabelMap


def otsu_bin_indices(values: np.ndarray, bins: int) -> np.ndarray:
    """Right-closed bins: bin 0 is [0, 1/bins], bin k is (k/bins, (k+1)/bins]."""
    idx = np.ceil(np.asarray(values, dtype=np.float64) * bins).astype(np.int64) - 1
    return np.clip(idx, 0, bins - 1)


def between_class_variance(hist: np.ndarray) -> np.ndarray:
    """Unnormalised between-class variance for every split ``k`` in 1..bins-1.

    Class 0 holds bins ``< k``. Splits leaving a class empty get -1.
    """
    hist = hist.astype(np.float64)
    levels = np.arange(hist.size, dtype=np.float64)
    w0 = np.cumsum(hist)[:-1]
    s0 = np.cumsum(hist * levels)[:-1]
    total, total_sum = hist.sum(), float((hist * levels).sum())
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    out = np.full(w0.shape, -1.0)
    mu0 = s0[valid] / w0[valid]
    mu1 = (total_sum - s0[valid]) / w1[valid]
    out[valid] = w0[valid] * w1[valid] * (mu0 - mu1) ** 2
    return out


def otsu_threshold(p: ProbMap, bins: int = 256) -> OtsuResult:
    """Binarise at the bin edge maximising between-class variance.

    Ties go to the lowest edge. ``binary`` is 1 where ``p > threshold``.
    A map occupying a single bin has no split: its threshold is its maximum
    and its binary map is empty.
    """
    if bins < 2:
        raise ConfigError(f"bins must be >= 2, got {bins}")
    idx = otsu_bin_indices(p.data, bins)
    variance = between_class_variance(np.bincount(idx.ravel(), minlength=bins))
    if variance.max() < 0:
        return OtsuResult(float(p.data.max()), LabelMap(np.zeros(p.data.shape, dtype=np.uint8)))
    k = int(np.argmax(variance)) + 1
    return OtsuResult(k / bins, LabelMap((idx >= k).astype(np.uint8)))


@dataclass(eq=False)
class ComponentLabeling:
    labels: np.ndarray
    count: int
    sizes: np.ndarray

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])


def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in (4, 8):
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def connected_components(v: LabelMap, connectivity: int = 8) -> ComponentLabeling:
    labels, count = ndimage.label(v.data, structure=_structure(connectivity))
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return ComponentLabeling(labels=labels, count=int(count), sizes=sizes)


def remove_small(v: LabelMap, min_size: int, connectivity: int = 8) -> LabelMap:
    """Clear foreground components with fewer than ``min_size`` pixels."""
    if min_size < 0:
        raise ConfigError(f"min_size must be >= 0, got {min_size}")
    if min_size == 0:
        return LabelMap(v.data.copy())
    cc = connected_components(v, connectivity)
    keep = np.concatenate([[False], cc.sizes >= min_size])
    return LabelMap(keep[cc.labels].astype(np.uint8))


@dataclass
class PostprocResult:
    threshold: float
    binary: LabelMap
    cleaned: LabelMap
    removed_sizes: List[int]
    min_size: int


def postprocess(p: ProbMap, cfg: PostprocConfig) -> PostprocResult:
    threshold, binary = otsu_threshold(p, cfg.otsu_bins)
    min_size = cfg.min_size_for(p.height, p.width)
    cc = connected_components(binary, cfg.connectivity)
    removed = sorted(int(s) for s in cc.sizes if s < min_size)
    cleaned = remove_small(binary, min_size, cfg.connectivity)
    if removed:
        logger.debug("removed %d components below %d px", len(removed), min_size)
    return PostprocResult(threshold, binary, cleaned, removed, min_size)
