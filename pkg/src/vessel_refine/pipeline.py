import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

from .errors import ConfigError, DataError, RefineError
from .ganrefine import Network, RefineConfig, refine_full_image
from .postproc import PostprocConfig, PostprocResult, postprocess
from .raster import LabelMap, ProbMap, RasterImage
from .tensornet import load_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class RefinementOutcome:
    item_id: str
    prob: Optional[ProbMap] = None
    post: Optional[PostprocResult] = None
    iterations: List[ProbMap] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class RefinementPipeline:
    """Tiled refinement of a noisy label followed by Otsu and small-component removal."""

    def __init__(
        self,
        generator: Network,
        refine_cfg: Optional[RefineConfig] = None,
        postproc_cfg: Optional[PostprocConfig] = None,
        n_iters: Optional[int] = None,
    ) -> None:
        self.generator = generator
        self.refine_cfg = refine_cfg or RefineConfig()
        self.postproc_cfg = postproc_cfg or PostprocConfig()
        self.n_iters = self.refine_cfg.n_iters if n_iters is None else n_iters
        if self.n_iters < 1:
            raise ConfigError(f"n_iters must be >= 1, got {self.n_iters}")

    @classmethod
    def from_checkpoint(
        cls,
        path: str,
        refine_cfg: Optional[RefineConfig] = None,
        postproc_cfg: Optional[PostprocConfig] = None,
        n_iters: Optional[int] = None,
    ) -> "RefinementPipeline":
        ckpt = load_checkpoint(path)
        if "generator" not in ckpt.networks:
            raise DataError(f"{path}: checkpoint holds no generator")
        return cls(ckpt.networks["generator"], refine_cfg, postproc_cfg, n_iters)

    def _tile(self, image: RasterImage) -> int:
        # U-Net inputs must divide by 2**depth
        unit = 2 ** getattr(self.generator, "depth", 0)
        tile = min(self.refine_cfg.tile, image.height, image.width) // unit * unit
        if tile < 1:
            raise DataError(f"{image.height}x{image.width} image is smaller than one generator tile ({unit})")
        return tile

    def refine(self, image: RasterImage, label: LabelMap, n_iters: Optional[int] = None) -> ProbMap:
        tile = self._tile(image)
        overlap = min(self.refine_cfg.overlap, tile - 1)
        n = self.n_iters if n_iters is None else n_iters
        return refine_full_image(self.generator, image, label, tile, overlap, n)

    def run(self, image: RasterImage, label: LabelMap, item_id: str = "", keep_iterations: bool = False) -> RefinementOutcome:
        if keep_iterations:
            iterations = [self.refine(image, label, k) for k in range(1, self.n_iters + 1)]
            prob = iterations[-1]
        else:
            iterations = []
            prob = self.refine(image, label)
        return RefinementOutcome(item_id, prob, postprocess(prob, self.postproc_cfg), iterations)

    def run_many(self, items: Iterable[Tuple[str, RasterImage, LabelMap]]) -> List[RefinementOutcome]:
        outcomes: List[RefinementOutcome] = []
        for item_id, image, label in items:
            try:
                outcomes.append(self.run(image, label, item_id))
            except RefineError as e:
                # Continue with the remaining items
                logger.warning("%s: %s", item_id, e)
                outcomes.append(RefinementOutcome(item_id, error=str(e)))
        return outcomes
