"""On-disk corpora: ``pairs/NNNNN_{img,clean,noisy}.png`` plus ``manifest.tsv``.

The first manifest line is ``# provenance: {json}`` (command, config, seeds);
then a header and one row per pair. Nothing time-dependent is written, so
rerunning a seeded command reproduces the directory byte for byte.
"""
import csv
import glob
import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, RasterError
from .patchmine import MinedPatch, PatchPair, Provenance
from .raster import LabelMap, PatchRect, ProbMap, RasterImage, load_raster, save_raster

logger = logging.getLogger(__name__)

MANIFEST = "manifest.tsv"
PAIRS_DIR = "pairs"
PROVENANCE_PREFIX = "# provenance: "
MANIFEST_COLUMNS = ["index", "source_id", "x0", "y0", "side", "noise_seed", "ops"]
ROLES = ("img", "clean", "noisy")


@dataclass
class CorpusRecord:
    image: RasterImage
    clean: LabelMap
    noisy: Optional[LabelMap] = None
    source_id: str = ""
    rect: Optional[PatchRect] = None
    noise_seed: Optional[int] = None
    ops: str = ""

    @classmethod
    def from_pair(cls, pair: PatchPair) -> "CorpusRecord":
        p = pair.provenance
        return cls(pair.image, pair.clean, pair.noisy, p.source_id, p.rect, p.noise_seed, p.ops)

    @classmethod
    def from_mined(cls, patch: MinedPatch) -> "CorpusRecord":
        return cls(patch.image, patch.label, None, patch.source_id, patch.rect)

    def to_mined(self) -> MinedPatch:
        return MinedPatch(self.image, self.clean, self.rect, self.source_id)

    def to_pair(self) -> PatchPair:
        if self.noisy is None:
            raise DataError(f"corpus entry '{self.source_id}' has no noisy label; run simulate first")
        return PatchPair(self.image, self.clean, self.noisy, Provenance(self.source_id, self.rect, self.noise_seed, self.ops))


def pair_path(root: str, index: int, role: str) -> str:
    return os.path.join(root, PAIRS_DIR, f"{index:05d}_{role}.png")


def _clear_pairs(root: str) -> None:
    for role in ROLES:
        for stale in glob.glob(os.path.join(root, PAIRS_DIR, f"*_{role}.png")):
            os.remove(stale)


def write_provenance_tsv(path: str, provenance: Dict[str, Any], header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(PROVENANCE_PREFIX + json.dumps(provenance, sort_keys=True, separators=(",", ":")) + "\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def write_corpus(root: str, records: Sequence[CorpusRecord], provenance: Dict[str, Any]) -> str:
    """Write every record under ``root`` and return the manifest path."""
    os.makedirs(os.path.join(root, PAIRS_DIR), exist_ok=True)
    _clear_pairs(root)
    rows = []
    for index, rec in enumerate(records):
        save_raster(rec.image, pair_path(root, index, "img"))
        save_raster(rec.clean, pair_path(root, index, "clean"))
        if rec.noisy is not None:
            save_raster(rec.noisy, pair_path(root, index, "noisy"))
        rect = rec.rect
        rows.append([
            index, rec.source_id,
            rect.x0 if rect else None, rect.y0 if rect else None, rect.side if rect else None,
            rec.noise_seed, rec.ops,
        ])
    manifest = os.path.join(root, MANIFEST)
    write_provenance_tsv(manifest, provenance, MANIFEST_COLUMNS, rows)
    logger.info("wrote %d corpus entries to %s", len(records), root)
    return manifest


def read_provenance_tsv(path: str) -> Tuple[Dict[str, Any], List[Dict[str, str]]]:
    """Return the provenance object and the data rows of a manifest-style TSV."""
    if not os.path.isfile(path):
        raise DataError(f"{path}: manifest not found")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    provenance: Dict[str, Any] = {}
    if lines and lines[0].startswith(PROVENANCE_PREFIX):
        try:
            provenance = json.loads(lines[0][len(PROVENANCE_PREFIX):])
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: malformed provenance line ({e})") from e
        lines = lines[1:]
    body = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    return provenance, list(csv.DictReader(body, delimiter="\t"))


def _opt_int(value: str) -> Optional[int]:
    return int(value) if value not in ("", None) else None


def read_corpus(root: str) -> Tuple[List[CorpusRecord], Dict[str, Any]]:
    provenance, rows = read_provenance_tsv(os.path.join(root, MANIFEST))
    records: List[CorpusRecord] = []
    for row in rows:
        try:
            index = int(row["index"])
            side = _opt_int(row.get("side", ""))
            rect = PatchRect(int(row["x0"]), int(row["y0"]), side) if side else None
            noisy_path = pair_path(root, index, "noisy")
            records.append(CorpusRecord(
                image=load_raster(pair_path(root, index, "img"), "image"),
                clean=load_raster(pair_path(root, index, "clean"), "label"),
                noisy=load_raster(noisy_path, "label") if os.path.isfile(noisy_path) else None,
                source_id=row.get("source_id", "") or "",
                rect=rect,
                noise_seed=_opt_int(row.get("noise_seed", "")),
                ops=row.get("ops", "") or "",
            ))
        except (KeyError, ValueError) as e:
            raise DataError(f"{root}: malformed manifest row {row} ({e})") from e
        except RasterError as e:
            raise DataError(f"{root}: {e}") from e
    return records, provenance


def read_path_table(path: str, required: Sequence[str]) -> List[Dict[str, str]]:
    """Rows of a TSV listing input files; relative paths resolve against the TSV's folder."""
    _, rows = read_provenance_tsv(path)
    if not rows:
        raise DataError(f"{path}: no entries")
    missing = [c for c in required if c not in rows[0]]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    base = os.path.dirname(os.path.abspath(path))
    resolved = []
    for row in rows:
        entry = dict(row)
        for col in required:
            if not os.path.isabs(entry[col]):
                entry[col] = os.path.join(base, entry[col])
            if not os.path.isfile(entry[col]):
                raise DataError(f"{path}: file not found: {entry[col]}")
        resolved.append(entry)
    return resolved


def load_prob_map(path: str) -> ProbMap:
    """Read an 8-bit probability map written by ``save_raster``."""
    image = load_raster(path, "image")
    return ProbMap(np.asarray(image.data[:, :, 0], dtype=np.float64))
