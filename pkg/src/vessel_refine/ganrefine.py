"""Iterative conditional-GAN label refiner: losses, training loop, inference."""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .errors import ConfigError, DataError, DivergenceError, RasterError
from .patchmine import PatchPair, derive_seed
from .postproc import PostprocConfig, postprocess
from .raster import LabelMap, ProbMap, RasterImage, iou, to_rgb
from .tensornet import (
    Adam,
    PatchDiscriminator,
    Tensor,
    UNetGenerator,
    bce_loss,
    build_discriminator,
    build_generator,
    concat,
    no_grad,
)

logger = logging.getLogger(__name__)

Network = Callable[[Tensor], Tensor]
LabelLike = Union[LabelMap, ProbMap]


@dataclass(frozen=True)
class RefineConfig:
    lambda_bce: float = 50.0
    n_iters: int = 3
    iter_weights: Tuple[float, ...] = (1.0, 1.6, 2.2)
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 20
    seed: Optional[int] = None
    depth: int = 3
    base_channels: int = 8
    disc_base_channels: int = 8
    through_iterations: bool = False
    holdout_fraction: float = 0.2
    precision: str = "float32"
    tile: int = 64
    overlap: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "iter_weights", tuple(float(w) for w in self.iter_weights))
        if self.n_iters < 1:
            raise ConfigError(f"n_iters must be >= 1, got {self.n_iters}")
        if len(self.iter_weights) != self.n_iters:
            raise ConfigError(f"{self.n_iters} iterations need {self.n_iters} weights, got {self.iter_weights}")
        if any(w <= 0 for w in self.iter_weights) or self.lambda_bce <= 0:
            raise ConfigError("iteration weights and lambda_bce must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction must lie in [0, 1), got {self.holdout_fraction}")
        if not 0 <= self.overlap < self.tile:
            raise ConfigError(f"overlap must lie in [0, tile), got {self.overlap}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class IterLosses:
    d_loss: object
    g_adv: object
    bce: object


@dataclass
class IterTrace:
    """Generator outputs G^1..G^N, each an N x 1 x H x W tensor."""

    outputs: List[Tensor]
    losses: List[IterLosses] = field(default_factory=list)

    def maps_for(self, index: int = 0) -> List[ProbMap]:
        return [ProbMap(np.asarray(o.data[index, 0], dtype=np.float64)) for o in self.outputs]

    @property
    def maps(self) -> List[ProbMap]:
        return self.maps_for(0)


def _image_planes(x: RasterImage) -> np.ndarray:
    return to_rgb(x).data.transpose(2, 0, 1)


def concat_condition(x: RasterImage, z: LabelLike) -> Tensor:
    """Stack R, G, B and the label as a 4 x H x W tensor (gray is replicated)."""
    if (x.height, x.width) != z.data.shape:
        raise RasterError(f"image {x.height}x{x.width} and label {z.data.shape} differ in size")
    return Tensor(np.concatenate([_image_planes(x), z.data.astype(np.float64)[None]], axis=0))


def _batch_images(images: Sequence[RasterImage], dtype=np.float64) -> Tensor:
    return Tensor(np.stack([_image_planes(x) for x in images]).astype(dtype))


def _batch_labels(labels: Sequence[LabelLike], dtype=np.float64) -> Tensor:
    return Tensor(np.stack([z.data[None] for z in labels]).astype(dtype))


def refine_chain(
    gen: Network, images: Tensor, labels: Tensor, n_iters: int, through_iterations: bool = False
) -> List[Tensor]:
    """Run the generator ``n_iters`` times, feeding each output back as the label.

    Outputs stay continuous probabilities. Unless ``through_iterations`` is
    set, the map fed to the next round is detached from the graph.
    """
    outputs: List[Tensor] = []
    current = labels
    for _ in range(n_iters):
        out = gen(concat([images, current], axis=1))
        outputs.append(out)
        current = out if through_iterations else out.detach()
    return outputs


def _network_dtype(gen: Network):
    params = gen.parameters() if hasattr(gen, "parameters") else []
    return params[0].dtype if params else np.float64


def iterate_refine(gen: Network, x: RasterImage, z: LabelLike, n_iters: int) -> IterTrace:
    dtype = _network_dtype(gen)
    with no_grad():
        outputs = refine_chain(gen, _batch_images([x], dtype), _batch_labels([z], dtype), n_iters)
    return IterTrace(outputs=outputs)


def _as_tensor(value, dtype=np.float64) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, RasterImage):
        return _batch_images([value], dtype)
    if isinstance(value, (LabelMap, ProbMap)):
        return _batch_labels([value], dtype)
    return Tensor(np.asarray(value, dtype=dtype))


def discriminator_loss(disc: Network, x, y, g_out) -> Tensor:
    """-[log D(x, y) + log(1 - D(x, G))] averaged over score patches; G is detached."""
    x, y, g_out = _as_tensor(x), _as_tensor(y), _as_tensor(g_out)
    s_real = disc(concat([x, y], axis=1))
    s_fake = disc(concat([x, g_out.detach()], axis=1))
    return bce_loss(s_real, 1.0) + bce_loss(s_fake, 0.0)


def generator_adv_loss(disc: Network, x, g_out) -> Tensor:
    """Non-saturating generator term -log D(x, G) averaged over score patches."""
    x, g_out = _as_tensor(x), _as_tensor(g_out)
    return bce_loss(disc(concat([x, g_out], axis=1)), 1.0)


def adv_losses(disc: Network, x, y, g_out) -> Tuple[Tensor, Tensor]:
    return discriminator_loss(disc, x, y, g_out), generator_adv_loss(disc, x, g_out)


def weighted_objective(per_iter: Sequence[IterLosses], cfg: RefineConfig):
    """``g = sum_i w_i (g_adv_i + lambda * bce_i)`` and ``d = sum_i w_i d_i``.

    Works on plain floats as well as tensors.
    """
    if len(per_iter) != cfg.n_iters:
        raise ConfigError(f"config expects {cfg.n_iters} iterations, trace has {len(per_iter)}")
    g_total = 0.0
    d_total = 0.0
    for w, losses in zip(cfg.iter_weights, per_iter):
        g_total = g_total + w * (losses.g_adv + cfg.lambda_bce * losses.bce)
        d_total = d_total + w * losses.d_loss
    return g_total, d_total


def _weighted(values: Sequence, weights: Sequence[float]):
    total = 0.0
    for w, v in zip(weights, values):
        total = total + w * v
    return total


def discriminator_objective(trace: IterTrace, x: Tensor, y: Tensor, disc: Network, cfg: RefineConfig) -> Tensor:
    """Every iteration's output is a fake sample, weighted by w_i."""
    if len(trace.outputs) != cfg.n_iters:
        raise ConfigError(f"config expects {cfg.n_iters} iterations, trace has {len(trace.outputs)}")
    real = bce_loss(disc(concat([x, y], axis=1)), 1.0)
    fakes = [bce_loss(disc(concat([x, out.detach()], axis=1)), 0.0) for out in trace.outputs]
    return _weighted([real + f for f in fakes], cfg.iter_weights)


def generator_objective(
    trace: IterTrace, x: Tensor, y: Tensor, disc: Network, cfg: RefineConfig
) -> Tuple[Tensor, List[Tuple[Tensor, Tensor]]]:
    if len(trace.outputs) != cfg.n_iters:
        raise ConfigError(f"config expects {cfg.n_iters} iterations, trace has {len(trace.outputs)}")
    parts = [(generator_adv_loss(disc, x, out), bce_loss(out, y.data)) for out in trace.outputs]
    total = _weighted([adv + cfg.lambda_bce * bce for adv, bce in parts], cfg.iter_weights)
    return total, parts


@dataclass
class ObjectiveBreakdown:
    g_total: Tensor
    d_total: Tensor
    per_iter: List[IterLosses]


def total_objective(trace: IterTrace, y, disc: Network, cfg: RefineConfig, x=None) -> ObjectiveBreakdown:
    """Weighted iterative objective for one batch, evaluated with the current D."""
    if len(trace.outputs) != cfg.n_iters:
        raise ConfigError(f"config expects {cfg.n_iters} iterations, trace has {len(trace.outputs)}")
    if x is None:
        raise ConfigError("total_objective needs the conditioning image batch x")
    x, y = _as_tensor(x), _as_tensor(y)
    per_iter = []
    for out in trace.outputs:
        d_loss, g_adv = adv_losses(disc, x, y, out)
        per_iter.append(IterLosses(d_loss=d_loss, g_adv=g_adv, bce=bce_loss(out, y.data)))
    g_total, d_total = weighted_objective(per_iter, cfg)
    trace.losses = per_iter
    return ObjectiveBreakdown(g_total=g_total, d_total=d_total, per_iter=per_iter)


@dataclass
class StepLog:
    d_total: float
    g_total: float
    bce: float
    g_adv: float


@dataclass
class EpochLog:
    epoch: int
    d_total: float
    g_total: float
    bce: float
    g_adv: float
    holdout_iou: Optional[float] = None


@dataclass
class TrainResult:
    generator: UNetGenerator
    discriminator: PatchDiscriminator
    g_optimizer: Adam
    d_optimizer: Adam
    log: List[EpochLog]
    steps: List[StepLog]


def _stack_corpus(pairs: Sequence[PatchPair], dtype):
    shapes = {p.clean.data.shape for p in pairs}
    if len(shapes) != 1:
        raise DataError(f"training pairs must share one patch size, found {sorted(shapes)}")
    images = np.stack([_image_planes(p.image) for p in pairs]).astype(dtype)
    clean = np.stack([p.clean.data[None] for p in pairs]).astype(dtype)
    noisy = np.stack([p.noisy.data[None] for p in pairs]).astype(dtype)
    return images, clean, noisy


def _check_finite(where: str, *values: float) -> None:
    if not all(math.isfinite(v) for v in values):
        raise DivergenceError(f"non-finite loss at {where}: {values}")


def refine_batch(gen: Network, images: np.ndarray, labels: np.ndarray, n_iters: int, batch_size: int = 16) -> np.ndarray:
    """Final-iteration maps for N x 3 x H x W images and N x 1 x H x W labels."""
    finals = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            outs = refine_chain(
                gen, Tensor(images[start : start + batch_size]), Tensor(labels[start : start + batch_size]), n_iters
            )
            finals.append(outs[-1].data[:, 0])
    return np.concatenate(finals, axis=0)


def holdout_iou(
    gen: Network, pairs: Sequence[PatchPair], cfg: RefineConfig, postproc_cfg: Optional[PostprocConfig] = None
) -> float:
    """Mean IoU against the clean label after Otsu and small-component removal."""
    postproc_cfg = postproc_cfg or PostprocConfig()
    images, _, noisy = _stack_corpus(pairs, cfg.dtype)
    finals = refine_batch(gen, images, noisy, cfg.n_iters, cfg.batch_size)
    scores = []
    for pair, final in zip(pairs, finals):
        cleaned = postprocess(ProbMap(np.clip(final.astype(np.float64), 0.0, 1.0)), postproc_cfg).cleaned
        scores.append(iou(cleaned, pair.clean))
    return float(np.mean(scores))


def train(
    corpus: Sequence[PatchPair],
    cfg: RefineConfig,
    holdout: Optional[Sequence[PatchPair]] = None,
    on_epoch_end: Optional[Callable[[EpochLog, "TrainResult"], None]] = None,
    postproc_cfg: Optional[PostprocConfig] = None,
    max_steps: Optional[int] = None,
    progress: bool = False,
) -> TrainResult:
    """Alternate one Adam step on D (G frozen) with one on G (D frozen) per mini-batch.

    Batches are drawn in a seeded per-epoch permutation, so a fixed seed
    gives a bit-identical log. ``max_steps`` stops early after that many
    mini-batches.
    """
    if not corpus:
        raise DataError("training corpus is empty")
    seed = 0 if cfg.seed is None else cfg.seed
    gen = build_generator(cfg.depth, cfg.base_channels, 4, derive_seed(seed, 1), cfg.precision)
    disc = build_discriminator(cfg.disc_base_channels, 4, derive_seed(seed, 2), cfg.precision)
    g_opt = Adam(gen.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    d_opt = Adam(disc.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(derive_seed(seed, 3))
    images, clean, noisy = _stack_corpus(corpus, cfg.dtype)
    weight_sum = sum(cfg.iter_weights)

    result = TrainResult(gen, disc, g_opt, d_opt, log=[], steps=[])
    step = 0
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="train", unit="epoch", disable=not progress):
        order = rng.permutation(len(corpus))
        epoch_steps: List[StepLog] = []
        for start in range(0, len(order), cfg.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            idx = order[start : start + cfg.batch_size]
            x, y, z = Tensor(images[idx]), Tensor(clean[idx]), Tensor(noisy[idx])
            trace = IterTrace(refine_chain(gen, x, z, cfg.n_iters, cfg.through_iterations))

            disc.zero_grad()
            d_total = discriminator_objective(trace, x, y, disc, cfg)
            _check_finite(f"epoch {epoch} step {step} (D)", d_total.item())
            d_total.backward()
            d_opt.step()

            gen.zero_grad()
            g_total, parts = generator_objective(trace, x, y, disc, cfg)
            bce = sum(w * b.item() for w, (_, b) in zip(cfg.iter_weights, parts)) / weight_sum
            g_adv = sum(w * a.item() for w, (a, _) in zip(cfg.iter_weights, parts)) / weight_sum
            _check_finite(f"epoch {epoch} step {step} (G)", g_total.item(), bce, g_adv)
            g_total.backward()
            g_opt.step()

            log = StepLog(d_total.item(), g_total.item(), bce, g_adv)
            epoch_steps.append(log)
            result.steps.append(log)
            step += 1
        if not epoch_steps:
            break

        entry = EpochLog(
            epoch=epoch,
            d_total=float(np.mean([s.d_total for s in epoch_steps])),
            g_total=float(np.mean([s.g_total for s in epoch_steps])),
            bce=float(np.mean([s.bce for s in epoch_steps])),
            g_adv=float(np.mean([s.g_adv for s in epoch_steps])),
            holdout_iou=holdout_iou(gen, holdout, cfg, postproc_cfg) if holdout else None,
        )
        result.log.append(entry)
        logger.info(
            "epoch %d: d_total=%.4f g_total=%.4f bce=%.4f g_adv=%.4f holdout_iou=%s",
            entry.epoch, entry.d_total, entry.g_total, entry.bce, entry.g_adv,
            "n/a" if entry.holdout_iou is None else f"{entry.holdout_iou:.4f}",
        )
        if on_epoch_end is not None:
            on_epoch_end(entry, result)
    return result


def _tile_starts(size: int, tile: int, stride: int) -> List[int]:
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def refine_full_image(
    gen: Network, x: RasterImage, z: LabelLike, tile: int, overlap: int, n_iters: int = 3, batch_size: int = 16
) -> ProbMap:
    """Refine a whole image tile by tile; overlapping predictions are averaged."""
    if (x.height, x.width) != z.data.shape:
        raise RasterError(f"image {x.height}x{x.width} and label {z.data.shape} differ in size")
    if tile > x.height or tile > x.width:
        raise RasterError(f"tile {tile} larger than the {x.height}x{x.width} image")
    if not 0 <= overlap < tile:
        raise ConfigError(f"overlap must lie in [0, {tile}), got {overlap}")
    dtype = _network_dtype(gen)
    stride = tile - overlap
    corners = [(y, xx) for y in _tile_starts(x.height, tile, stride) for xx in _tile_starts(x.width, tile, stride)]
    planes = _image_planes(x)
    images = np.stack([planes[:, y : y + tile, xx : xx + tile] for y, xx in corners]).astype(dtype)
    labels = np.stack([z.data[None, y : y + tile, xx : xx + tile] for y, xx in corners]).astype(dtype)
    finals = refine_batch(gen, images, labels, n_iters, batch_size)

    total = np.zeros((x.height, x.width), dtype=np.float64)
    count = np.zeros((x.height, x.width), dtype=np.float64)
    for (y, xx), final in zip(corners, finals):
        total[y : y + tile, xx : xx + tile] += final
        count[y : y + tile, xx : xx + tile] += 1.0
    return ProbMap(np.clip(total / count, 0.0, 1.0))
