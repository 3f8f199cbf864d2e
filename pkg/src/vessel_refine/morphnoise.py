"""Binary morphology and the grid-wise label-noise simulator.

Erosion reads ``v(p + d)`` with foreground (1) outside the raster, dilation
reads ``v(p - d)`` with background (0) outside. With these conventions the
pair is an adjunction on the finite grid, so opening and closing are exactly
idempotent and ``dilate(v, se) == complement(erode(complement(v), se.reflect()))``.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .raster import LabelMap, Region, complement

logger = logging.getLogger(__name__)

OP_CODES = ("E", "D", "O", "C", "I")


@dataclass(frozen=True)
class StructuringElement:
    side: int
    offsets: Tuple[Tuple[int, int], ...]

    def __post_init__(self) -> None:
        if self.side < 1:
            raise ConfigError(f"structuring element side must be >= 1, got {self.side}")
        if len(self.offsets) != self.side * self.side:
            raise ConfigError("structuring element must cover side*side offsets")

    @classmethod
    def square(cls, side: int) -> "StructuringElement":
        # side 2 -> {0, 1}; side 3 -> {-1, 0, 1}
        lo = -((side - 1) // 2)
        span = range(lo, lo + side)
        return cls(side=side, offsets=tuple((dy, dx) for dy in span for dx in span))

    def reflect(self) -> "StructuringElement":
        return StructuringElement(self.side, tuple((-dy, -dx) for dy, dx in self.offsets))

    @property
    def reach(self) -> int:
        return max(max(abs(dy), abs(dx)) for dy, dx in self.offsets)


def _shifted(arr: np.ndarray, dy: int, dx: int, fill: int, pad: int) -> np.ndarray:
    """out[i, j] = arr[i + dy, j + dx], or ``fill`` outside the raster."""
    if pad == 0:
        return arr
    padded = np.pad(arr, pad, mode="constant", constant_values=fill)
    h, w = arr.shape
    return padded[pad + dy : pad + dy + h, pad + dx : pad + dx + w]


def _erode_array(arr: np.ndarray, se: StructuringElement) -> np.ndarray:
    pad = se.reach
    out = np.ones_like(arr)
    for dy, dx in se.offsets:
        out &= _shifted(arr, dy, dx, 1, pad)
    return out


def _dilate_array(arr: np.ndarray, se: StructuringElement) -> np.ndarray:
    pad = se.reach
    out = np.zeros_like(arr)
    for dy, dx in se.offsets:
        out |= _shifted(arr, -dy, -dx, 0, pad)
    return out


def erode(v: LabelMap, se: StructuringElement) -> LabelMap:
    return LabelMap(_erode_array(v.data, se))


def dilate(v: LabelMap, se: StructuringElement) -> LabelMap:
    return LabelMap(_dilate_array(v.data, se))


def open(v: LabelMap, se: StructuringElement) -> LabelMap:  # noqa: A001
    return LabelMap(_dilate_array(_erode_array(v.data, se), se))


def close(v: LabelMap, se: StructuringElement) -> LabelMap:
    return LabelMap(_erode_array(_dilate_array(v.data, se), se))


def dual_dilate(v: LabelMap, se: StructuringElement) -> LabelMap:
    """Dilation computed through erosion of the complement."""
    return complement(erode(complement(v), se.reflect()))


@dataclass(frozen=True)
class GridSpec:
    cell_side: int = 32

    def __post_init__(self) -> None:
        if self.cell_side < 1:
            raise ConfigError(f"cell_side must be >= 1, got {self.cell_side}")

    def cell_count(self, height: int, width: int) -> int:
        return -(-height // self.cell_side) * -(-width // self.cell_side)


@dataclass(frozen=True)
class NoiseConfig:
    p_erode: float = 0.25
    p_dilate: float = 0.25
    p_open: float = 0.10
    p_close: float = 0.10
    se_erode_dilate: StructuringElement = field(default_factory=lambda: StructuringElement.square(2))
    se_open_close: StructuringElement = field(default_factory=lambda: StructuringElement.square(3))
    grid: GridSpec = field(default_factory=GridSpec)
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        probs = self.probabilities
        if any(p < 0 for p in probs) or sum(probs) > 1.0 + 1e-12:
            raise ConfigError(f"noise probabilities must be >= 0 and sum to <= 1, got {probs}")
        largest = max(self.se_erode_dilate.side, self.se_open_close.side)
        if self.grid.cell_side < largest:
            raise ConfigError(
                f"cell_side {self.grid.cell_side} is smaller than the structuring element ({largest})"
            )

    @property
    def probabilities(self) -> Tuple[float, float, float, float]:
        return (self.p_erode, self.p_dilate, self.p_open, self.p_close)


def choose_op(p: float, cfg: NoiseConfig) -> str:
    """Map a uniform draw onto E/D/O/C/I using cumulative bins."""
    edge = 0.0
    for code, width in zip(OP_CODES, cfg.probabilities):
        edge += width
        if p < edge:
            return code
    return "I"


def partition_grid(v: LabelMap, grid: GridSpec) -> List[Tuple[LabelMap, Region]]:
    """Tile ``v`` with cells in row-major order; edge cells may be smaller."""
    cells: List[Tuple[LabelMap, Region]] = []
    step = grid.cell_side
    for y0 in range(0, v.height, step):
        for x0 in range(0, v.width, step):
            h = min(step, v.height - y0)
            w = min(step, v.width - x0)
            cells.append((LabelMap(v.data[y0 : y0 + h, x0 : x0 + w].copy()), Region(y0, x0, h, w)))
    return cells


@dataclass
class NoiseResult:
    label: LabelMap
    ops: List[str]
    seed: Optional[int] = None

    @property
    def op_log(self) -> str:
        return "".join(self.ops)


def _apply_op(code: str, cell: np.ndarray, cfg: NoiseConfig) -> np.ndarray:
    if code == "E":
        return _erode_array(cell, cfg.se_erode_dilate)
    if code == "D":
        return _dilate_array(cell, cfg.se_erode_dilate)
    if code == "O":
        return _dilate_array(_erode_array(cell, cfg.se_open_close), cfg.se_open_close)
    if code == "C":
        return _erode_array(_dilate_array(cell, cfg.se_open_close), cfg.se_open_close)
    return cell


def _se_for(code: str, cfg: NoiseConfig) -> StructuringElement:
    return cfg.se_erode_dilate if code in ("E", "D") else cfg.se_open_close


def simulate_noise(
    v: LabelMap, cfg: NoiseConfig, seed: Optional[int] = None, draws: Optional[Sequence[float]] = None
) -> NoiseResult:
    """Degrade a clean patch cell by cell.

    One uniform draw per grid cell, taken in row-major order from a PCG64
    generator seeded with ``seed`` (or ``cfg.seed``). Explicit ``draws``
    replace the generator. Each cell is processed with its own borders and
    written back in place.
    """
    cells = partition_grid(v, cfg.grid)
    if draws is None:
        seed = cfg.seed if seed is None else seed
        rng = np.random.Generator(np.random.PCG64(seed))
        draws = rng.random(len(cells))
    elif len(draws) != len(cells):
        raise ConfigError(f"expected {len(cells)} draws, got {len(draws)}")

    out = v.data.copy()
    ops: List[str] = []
    for index, ((cell, region), p) in enumerate(zip(cells, draws)):
        code = choose_op(float(p), cfg)
        if code != "I":
            side = _se_for(code, cfg).side
            if region.height < side or region.width < side:
                logger.debug("cell %d (%dx%d) smaller than SE %d, identity applied",
                             index, region.height, region.width, side)
                code = "I"
        if code != "I":
            y0, x0, h, w = region
            out[y0 : y0 + h, x0 : x0 + w] = _apply_op(code, cell.data, cfg)
        ops.append(code)
    return NoiseResult(label=LabelMap(out), ops=ops, seed=seed)
