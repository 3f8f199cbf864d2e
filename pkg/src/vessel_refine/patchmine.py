"""High-quality patch mining, training-pair construction and synthetic corpora."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, RasterError
from .morphnoise import NoiseConfig, StructuringElement, _dilate_array, simulate_noise
from .raster import LabelMap, PatchRect, RasterImage, crop, iou, vessel_ratio

logger = logging.getLogger(__name__)

RETRY_FACTOR = 50


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for ``(seed, *keys)``."""
    if seed is None:
        raise ConfigError("a base seed is required to derive child seeds")
    state = np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(1, dtype=np.uint64)
    return int(state[0])


@dataclass(frozen=True)
class MineConfig:
    patch_side: int = 256
    patches_per_image: int = 300
    ratio_min: float = 0.05
    iou_min: float = 0.90
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.ratio_min <= 1.0 or not 0.0 <= self.iou_min <= 1.0:
            raise ConfigError("ratio_min and iou_min must lie in [0, 1]")
        if self.patch_side < 1 or self.patches_per_image < 0:
            raise ConfigError("patch_side must be >= 1 and patches_per_image >= 0")


@dataclass
class MinedPatch:
    image: RasterImage
    label: LabelMap
    rect: PatchRect
    source_id: str = ""


@dataclass
class MineResult:
    patches: List[MinedPatch]
    attempts: int
    shortfall: int


def _passes(value: float, minimum: float) -> bool:
    # A zero threshold disables its gate.
    return minimum <= 0.0 or value > minimum


def mine_patches(
    image: RasterImage,
    annot1: LabelMap,
    annot2: LabelMap,
    cfg: MineConfig,
    image_index: int = 0,
    source_id: str = "",
) -> MineResult:
    """Rejection-sample square patches whose first annotation is dense enough
    and agrees with the verification annotation.

    Draw ``k`` of image ``image_index`` uses the seed
    ``derive_seed(cfg.seed, image_index, k)``, so images can be mined in any
    order or in parallel with identical results.
    """
    shapes = {(r.height, r.width) for r in (image, annot1, annot2)}
    if len(shapes) != 1:
        raise RasterError(f"image and annotations differ in size: {sorted(shapes)}")
    side = cfg.patch_side
    if side > image.height or side > image.width:
        raise RasterError(f"patch side {side} does not fit {image.height}x{image.width} image")
    seed = 0 if cfg.seed is None else cfg.seed

    budget = RETRY_FACTOR * cfg.patches_per_image
    accepted: List[MinedPatch] = []
    attempts = 0
    while len(accepted) < cfg.patches_per_image and attempts < budget:
        rng = np.random.default_rng(derive_seed(seed, image_index, attempts))
        attempts += 1
        rect = PatchRect(
            x0=int(rng.integers(0, image.width - side + 1)),
            y0=int(rng.integers(0, image.height - side + 1)),
            side=side,
        )
        first = crop(annot1, rect)
        ratio = vessel_ratio(first)
        if not _passes(ratio, cfg.ratio_min):
            logger.debug("%s rect %s rejected: vessel ratio %.4f", source_id, rect, ratio)
            continue
        agreement = iou(first, crop(annot2, rect))
        if not _passes(agreement, cfg.iou_min):
            logger.debug("%s rect %s rejected: IoU %.4f", source_id, rect, agreement)
            continue
        accepted.append(MinedPatch(image=crop(image, rect), label=first, rect=rect, source_id=source_id))

    shortfall = cfg.patches_per_image - len(accepted)
    if shortfall > 0:
        logger.warning("%s: retry budget of %d draws exhausted, %d patches short",
                       source_id or f"image {image_index}", budget, shortfall)
    return MineResult(patches=accepted, attempts=attempts, shortfall=shortfall)


@dataclass
class Provenance:
    source_id: str
    rect: Optional[PatchRect]
    noise_seed: Optional[int]
    ops: str = ""


@dataclass
class PatchPair:
    image: RasterImage
    clean: LabelMap
    noisy: LabelMap
    provenance: Provenance

    def __post_init__(self) -> None:
        dims = {(self.image.height, self.image.width), self.clean.data.shape, self.noisy.data.shape}
        if len(dims) != 1:
            raise RasterError(f"patch pair rasters differ in size: {sorted(dims)}")


def build_training_set(
    mined: Sequence[MinedPatch], noise_cfg: NoiseConfig, corpus_seed: Optional[int] = None
) -> List[PatchPair]:
    """Attach a simulated noisy label to every mined patch.

    Patch ``i`` is degraded with ``derive_seed(corpus_seed, i)``.
    """
    base = noise_cfg.seed if corpus_seed is None else corpus_seed
    base = 0 if base is None else base
    pairs: List[PatchPair] = []
    for index, patch in enumerate(mined):
        seed = derive_seed(base, index)
        result = simulate_noise(patch.label, noise_cfg, seed=seed)
        pairs.append(
            PatchPair(
                image=patch.image,
                clean=patch.label,
                noisy=result.label,
                provenance=Provenance(patch.source_id, patch.rect, seed, result.op_log),
            )
        )
    return pairs


@dataclass(frozen=True)
class VesselStyle:
    min_ratio: float = 0.03
    max_ratio: float = 0.15
    width_min: int = 1
    width_max: int = 4
    branch_prob: float = 0.03
    turn_sigma: float = 0.08
    max_vessels: int = 64
    blur_sigma: float = 1.0
    contrast: float = 0.35
    noise_sigma: float = 0.02
    background_level: float = 0.55
    background_amplitude: float = 0.06
    background_sigma: float = 6.0
    tint: Tuple[float, float, float] = (0.95, 0.6, 0.3)

    def __post_init__(self) -> None:
        if not 0.0 < self.min_ratio <= self.max_ratio < 1.0:
            raise ConfigError("need 0 < min_ratio <= max_ratio < 1")
        if not 1 <= self.width_min <= self.width_max:
            raise ConfigError("need 1 <= width_min <= width_max")


def _stamp(label: np.ndarray, cy: float, cx: float, width: int) -> None:
    side_y, side_x = label.shape
    r2 = (width / 2.0) ** 2 + 0.25
    r = int(np.ceil(np.sqrt(r2)))
    y_lo, y_hi = max(0, int(cy) - r), min(side_y, int(cy) + r + 2)
    x_lo, x_hi = max(0, int(cx) - r), min(side_x, int(cx) + r + 2)
    if y_lo >= y_hi or x_lo >= x_hi:
        return
    yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    label[y_lo:y_hi, x_lo:x_hi] |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r2


def _grow_vessel(rng: np.random.Generator, label: np.ndarray, style: VesselStyle) -> None:
    side = label.shape[0]
    # Enter from a random border point, heading roughly towards the centre.
    t = rng.uniform(0, side)
    edge = int(rng.integers(4))
    y, x = [(0.0, t), (side - 1.0, t), (t, 0.0), (t, side - 1.0)][edge]
    heading = np.arctan2(side / 2.0 - y, side / 2.0 - x) + rng.normal(0.0, 0.5)
    width = int(rng.integers(style.width_min, style.width_max + 1))

    stack = [(y, x, heading, width, 0)]
    while stack:
        y, x, heading, width, depth = stack.pop()
        turn = 0.0
        for _ in range(3 * side):
            if not (0.0 <= y < side and 0.0 <= x < side):
                break
            _stamp(label, y, x, width)
            turn = 0.8 * turn + rng.normal(0.0, style.turn_sigma)
            heading += turn
            y += np.sin(heading)
            x += np.cos(heading)
            if depth < 2 and rng.random() < style.branch_prob:
                angle = heading + rng.choice((-1.0, 1.0)) * rng.uniform(0.4, 1.0)
                stack.append((y, x, angle, max(style.width_min, width - 1), depth + 1))


def _appearance(rng: np.random.Generator, label: np.ndarray, style: VesselStyle) -> np.ndarray:
    side = label.shape[0]
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (side, side)), style.background_sigma)
    texture /= max(float(texture.std()), 1e-12)
    background = style.background_level + style.background_amplitude * texture
    vessels = ndimage.gaussian_filter(label.astype(np.float64), style.blur_sigma)
    gray = background - style.contrast * vessels + rng.normal(0.0, style.noise_sigma, (side, side))
    rgb = gray[:, :, None] * np.asarray(style.tint)[None, None, :] + 0.05
    return np.clip(rgb, 0.0, 1.0)


def synth_corpus(
    count: int, side: int, seed: int, style: Optional[VesselStyle] = None
) -> List[Tuple[RasterImage, LabelMap]]:
    """Procedural vessel trees on a textured background.

    Sample ``i`` depends only on ``derive_seed(seed, i)``. Every label has a
    vessel ratio of at least ``style.min_ratio``.
    """
    if side < 32:
        raise ConfigError(f"synthetic patches need side >= 32, got {side}")
    style = style or VesselStyle()
    thicken = StructuringElement.square(3)
    samples: List[Tuple[RasterImage, LabelMap]] = []
    for index in range(count):
        rng = np.random.default_rng(derive_seed(seed, index))
        label = np.zeros((side, side), dtype=bool)
        target = rng.uniform(style.min_ratio, style.max_ratio)
        grown = 0
        while label.mean() < target and grown < style.max_vessels:
            _grow_vessel(rng, label, style)
            grown += 1
        while label.mean() < style.min_ratio:
            label = _dilate_array(label.astype(np.uint8), thicken).astype(bool)
            if not label.any():
                label[side // 2, :] = True
        image = _appearance(rng, label, style)
        samples.append((RasterImage(image), LabelMap(label.astype(np.uint8))))
    return samples
