import argparse
import logging
import os
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.vessel_refine.config import PipelineConfig, describe_defaults, load_config
from src.vessel_refine.corpus import (
    CorpusRecord,
    load_prob_map,
    read_corpus,
    read_path_table,
    write_corpus,
    write_provenance_tsv,
)
from src.vessel_refine.errors import ConfigError, DataError, DivergenceError, RefineError
from src.vessel_refine.evalmetrics import ImageReport, auc, confusion, refinement_report, write_report_tsv
from src.vessel_refine.ganrefine import EpochLog, TrainResult, train
from src.vessel_refine.morphnoise import OP_CODES
from src.vessel_refine.patchmine import build_training_set, derive_seed, mine_patches, synth_corpus
from src.vessel_refine.pipeline import RefinementPipeline
from src.vessel_refine.raster import agreement_map, crop, load_raster, save_raster
from src.vessel_refine.storage import ResultStore
from src.vessel_refine.tensornet import Checkpoint, file_sha256, save_checkpoint

logger = logging.getLogger("vessel_refine.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

TRAIN_LOG_COLUMNS = ["epoch", "d_total", "g_total", "bce", "g_adv", "holdout_iou"]
REFINE_COLUMNS = ["id", "threshold", "min_size", "removed_components", "removed_pixels", "error"]


class UsageExitParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


def _parallel_map(fn: Callable[[Any], Any], items: Sequence[Any], jobs: int) -> List[Any]:
    # map() keeps input order, so output does not depend on the worker count
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _provenance(command: str, cfg: PipelineConfig, **extra: Any) -> Dict[str, Any]:
    return {"command": command, "config": cfg.to_dict(), **extra}


def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _require(args.out, "--out")
    samples = synth_corpus(args.count, args.side, cfg.seed, cfg.synth)
    records = [CorpusRecord(image, label, source_id=f"synth-{i:05d}") for i, (image, label) in enumerate(samples)]
    write_corpus(out, records, _provenance("synth", cfg, count=args.count, side=args.side))
    print(f"Wrote {len(records)} synthetic pairs ({args.side}x{args.side}) to {out}")
    return EXIT_OK


def cmd_mine(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _require(args.out, "--out")
    rows = read_path_table(_require(args.input, "--input"), ["image", "annot1", "annot2"])
    mine_cfg = cfg.resolved().mine

    def mine_one(indexed: Tuple[int, Dict[str, str]]):
        index, row = indexed
        source_id = row.get("id") or os.path.splitext(os.path.basename(row["image"]))[0]
        image = load_raster(row["image"], "image")
        annot1 = load_raster(row["annot1"], "label")
        annot2 = load_raster(row["annot2"], "label")
        result = mine_patches(image, annot1, annot2, mine_cfg, image_index=index, source_id=source_id)
        return source_id, annot1, annot2, result

    records: List[CorpusRecord] = []
    shortfalls: Dict[str, int] = {}
    for source_id, annot1, annot2, result in _parallel_map(mine_one, list(enumerate(rows)), args.jobs):
        print(f"Mined {source_id}: accepted={len(result.patches)} attempts={result.attempts} shortfall={result.shortfall}")
        if result.shortfall:
            shortfalls[source_id] = result.shortfall
        for patch in result.patches:
            if args.overlays:
                overlay = agreement_map(crop(annot1, patch.rect), crop(annot2, patch.rect))
                save_raster(overlay, os.path.join(out, "overlays", f"{len(records):05d}_agree.png"))
            records.append(CorpusRecord.from_mined(patch))
    write_corpus(out, records, _provenance("mine", cfg, input=os.path.basename(args.input), shortfalls=shortfalls))
    print(f"Wrote {len(records)} patches from {len(rows)} images to {out}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _require(args.out, "--out")
    records, source = read_corpus(_require(args.input, "--input"))
    noise_cfg = cfg.resolved().noise
    pairs = build_training_set([r.to_mined() for r in records], noise_cfg, corpus_seed=noise_cfg.seed)
    write_corpus(out, [CorpusRecord.from_pair(p) for p in pairs], _provenance("simulate", cfg, source=source))
    ops = Counter(code for p in pairs for code in p.provenance.ops)
    total = sum(ops.values())
    freqs = " ".join(f"{code}={ops[code] / total:.3f}" for code in OP_CODES) if total else "no cells"
    print(f"Wrote {len(pairs)} noisy pairs to {out} ({total} cells: {freqs})")
    return EXIT_OK


def _split_holdout(records: List[CorpusRecord], fraction: float, seed: int) -> Tuple[List, List]:
    pairs = [r.to_pair() for r in records]
    count = int(len(pairs) * fraction)
    if count == 0:
        return pairs, []
    order = np.random.default_rng(derive_seed(seed, 4)).permutation(len(pairs))
    held = set(int(i) for i in order[:count])
    train_set = [p for i, p in enumerate(pairs) if i not in held]
    holdout = [p for i, p in enumerate(pairs) if i in held]
    if not train_set:
        raise DataError("holdout_fraction leaves no training pairs")
    return train_set, holdout


def _checkpoint(result: TrainResult, cfg: PipelineConfig, epoch: int) -> Checkpoint:
    return Checkpoint(
        networks={"generator": result.generator, "discriminator": result.discriminator},
        optimizers={"generator": result.g_optimizer.state, "discriminator": result.d_optimizer.state},
        meta={"epoch": epoch, "config": cfg.to_dict()},
    )


def _log_row(entry: EpochLog) -> List[Any]:
    return [entry.epoch, repr(entry.d_total), repr(entry.g_total), repr(entry.bce), repr(entry.g_adv),
            "" if entry.holdout_iou is None else repr(entry.holdout_iou)]


def cmd_train(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _require(args.out, "--out")
    cfg = cfg.resolved()
    records, source = read_corpus(_require(args.input, "--input"))
    train_set, holdout = _split_holdout(records, cfg.refine.holdout_fraction, cfg.refine.seed)
    os.makedirs(out, exist_ok=True)

    def on_epoch_end(entry: EpochLog, result: TrainResult) -> None:
        path = os.path.join(out, f"epoch_{entry.epoch:03d}.lprf")
        save_checkpoint(path, _checkpoint(result, cfg, entry.epoch))
        holdout_txt = "n/a" if entry.holdout_iou is None else f"{entry.holdout_iou:.4f}"
        print(f"Epoch {entry.epoch}: d_total={entry.d_total:.4f} g_total={entry.g_total:.4f} "
              f"bce={entry.bce:.4f} holdout_iou={holdout_txt} -> {path}")

    result = train(
        train_set, cfg.refine, holdout=holdout, on_epoch_end=on_epoch_end,
        postproc_cfg=cfg.postproc, max_steps=args.max_steps, progress=sys.stderr.isatty(),
    )
    final = os.path.join(out, "final.lprf")
    save_checkpoint(final, _checkpoint(result, cfg, len(result.log)))
    write_provenance_tsv(
        os.path.join(out, "train_log.tsv"),
        _provenance("train", cfg, source=source, train_pairs=len(train_set), holdout_pairs=len(holdout)),
        TRAIN_LOG_COLUMNS,
        [_log_row(e) for e in result.log],
    )
    print(f"Trained {len(result.steps)} steps on {len(train_set)} pairs -> {final} sha256={file_sha256(final)}")
    return EXIT_OK


def _refine_items(path: str) -> Iterable[Tuple[str, Any, Any]]:
    if os.path.isdir(path):
        records, _ = read_corpus(path)
        for index, rec in enumerate(records):
            if rec.noisy is None:
                raise DataError(f"{path}: entry {index} has no noisy label")
            yield f"{index:05d}", rec.image, rec.noisy
        return
    for row in read_path_table(path, ["image", "label"]):
        item_id = row.get("id") or os.path.splitext(os.path.basename(row["image"]))[0]
        yield item_id, load_raster(row["image"], "image"), load_raster(row["label"], "label")


def cmd_refine(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _require(args.out, "--out")
    checkpoint = _require(args.checkpoint, "--checkpoint")
    pipeline = RefinementPipeline.from_checkpoint(checkpoint, cfg.refine, cfg.postproc, n_iters=args.n_iters)
    outcomes = pipeline.run_many(_refine_items(_require(args.input, "--input")))
    rows = []
    for outcome in outcomes:
        if not outcome.ok:
            print(f"Failed {outcome.item_id}: {outcome.error}")
            rows.append([outcome.item_id, None, None, None, None, outcome.error])
            continue
        save_raster(outcome.prob, os.path.join(out, f"{outcome.item_id}_prob.png"))
        save_raster(outcome.post.cleaned, os.path.join(out, f"{outcome.item_id}_bin.png"))
        removed = outcome.post.removed_sizes
        rows.append([outcome.item_id, repr(outcome.post.threshold), outcome.post.min_size, len(removed), sum(removed), None])
        print(f"Refined {outcome.item_id}: threshold={outcome.post.threshold:.4f} removed={len(removed)} components")
    write_provenance_tsv(
        os.path.join(out, "manifest.tsv"),
        _provenance("refine", cfg, checkpoint_sha256=file_sha256(checkpoint), n_iters=pipeline.n_iters),
        REFINE_COLUMNS,
        rows,
    )
    failed = sum(1 for o in outcomes if not o.ok)
    return EXIT_DATA if failed else EXIT_OK


def _eval_items(gt: str) -> List[Dict[str, Any]]:
    if os.path.isdir(gt):
        records, _ = read_corpus(gt)
        return [{"id": f"{i:05d}", "label": r.clean, "noisy": r.noisy, "mask": None} for i, r in enumerate(records)]
    items = []
    for row in read_path_table(gt, ["id", "label"]):
        items.append({
            "id": row["id"],
            "label": load_raster(row["label"], "label"),
            "noisy": load_raster(row["noisy"], "label") if row.get("noisy") else None,
            "mask": load_raster(row["mask"], "label") if row.get("mask") else None,
        })
    return items


def cmd_evaluate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _require(args.out, "--out")
    pred_dir = _require(args.pred, "--pred")
    items = _eval_items(_require(args.gt, "--gt"))

    def evaluate_one(item: Dict[str, Any]) -> ImageReport:
        binary = load_raster(os.path.join(pred_dir, f"{item['id']}_bin.png"), "label")
        prob_path = os.path.join(pred_dir, f"{item['id']}_prob.png")
        counts = confusion(binary, item["label"], item["mask"])
        area = None
        if os.path.isfile(prob_path):
            try:
                area = auc(load_prob_map(prob_path), item["label"], item["mask"])
            except DataError as e:
                logger.warning("%s: %s", item["id"], e)
        refinement = refinement_report(item["label"], item["noisy"], binary) if item["noisy"] is not None else None
        return ImageReport(item["id"], counts, area, refinement)

    reports = _parallel_map(evaluate_one, items, args.jobs)
    path = os.path.join(out, "metrics.tsv")
    mean = write_report_tsv(path, reports)
    m = mean.metrics
    summary = " ".join(f"{k}={'undefined' if v is None else f'{v:.4f}'}" for k, v in
                       [("acc", m.acc), ("se", m.se), ("sp", m.sp), ("auc", mean.auc)])
    if mean.refinement is not None:
        summary += f" iou_gain={mean.refinement.delta:+.4f}"
    print(f"Evaluated {len(reports)} images -> {path}: {summary}")
    if args.out_db:
        sha = file_sha256(args.checkpoint) if args.checkpoint else None
        run_id = ResultStore(db_path=args.out_db).save_run("evaluate", cfg.to_dict(), reports, sha)
        print(f"Stored run_id={run_id} in {args.out_db}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, PipelineConfig], int]] = {
    "synth": cmd_synth,
    "mine": cmd_mine,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "refine": cmd_refine,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = UsageExitParser(add_help=False)
    common.add_argument("--config", default=None, help="Pipeline JSON config path")
    common.add_argument("--seed", type=int, default=None, help="Global seed (overrides the config)")
    common.add_argument("--out", default=None, help="Output directory")
    common.add_argument("--jobs", type=int, default=1, help="Worker threads where order cannot change results")
    common.add_argument("--dump-config", action="store_true", help="Print the effective config and exit")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="Override a config key")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = UsageExitParser(description="Simulate vessel label noise, train the iterative refiner, refine and evaluate labels")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    epilog = "configuration keys and defaults:\n" + describe_defaults()

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("synth", "Generate a synthetic image/label corpus")
    p.add_argument("--count", type=int, default=200, help="Number of pairs")
    p.add_argument("--side", type=int, default=64, help="Patch side in pixels")

    p = add("mine", "Mine high-quality patches from doubly annotated images")
    p.add_argument("--input", help="TSV with columns image, annot1, annot2 (optional id)")
    p.add_argument("--overlays", action="store_true", help="Also write annotation agreement overlays")

    p = add("simulate", "Attach simulated noisy labels to a corpus")
    p.add_argument("--input", help="Corpus directory")

    p = add("train", "Train the iterative refiner on a noisy corpus")
    p.add_argument("--input", help="Corpus directory with noisy labels")
    p.add_argument("--max-steps", type=int, default=None, help="Stop after this many mini-batches")
    p.add_argument("--through-iterations", action="store_true",
                   help="Backpropagate through the whole refinement chain (sets refine.through_iterations)")

    p = add("refine", "Refine noisy labels with a trained checkpoint")
    p.add_argument("--input", help="Corpus directory, or TSV with columns image, label (optional id)")
    p.add_argument("--checkpoint", help="Checkpoint written by train")
    p.add_argument("--n-iters", type=int, default=None, help="Refinement rounds (defaults to refine.n_iters)")

    p = add("evaluate", "Score refined labels against ground truth")
    p.add_argument("--pred", help="Directory written by refine")
    p.add_argument("--gt", help="Corpus directory, or TSV with columns id, label (optional noisy, mask)")
    p.add_argument("--out-db", default=None, help="Also store the run in this SQLite DB")
    p.add_argument("--checkpoint", default=None, help="Checkpoint to record with the stored run")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config).with_overrides(args.set).with_seed(args.seed)
        if getattr(args, "through_iterations", False):
            cfg = cfg.with_overrides(["refine.through_iterations=true"])
        if args.dump_config:
            print(cfg.dumps())
            return EXIT_OK
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except RefineError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
