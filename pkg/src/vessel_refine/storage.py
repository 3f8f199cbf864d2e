import json
import os
import sqlite3
from typing import Any, Dict, List, Optional, Sequence

from .evalmetrics import ConfusionCounts, ImageReport, scalar_metrics

SCHEMA_SQL = """
CREATE TABLE IF NOT EXISTS runs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    command TEXT,
    config TEXT,
    checkpoint_sha256 TEXT,
    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
);

CREATE TABLE IF NOT EXISTS image_metrics (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    run_id INTEGER,
    image_id TEXT,
    tp INTEGER,
    fp INTEGER,
    tn INTEGER,
    fn INTEGER,
    acc REAL,
    se REAL,
    sp REAL,
    auc REAL,
    iou_noisy REAL,
    iou_refined REAL,
    delta REAL,
    FOREIGN KEY(run_id) REFERENCES runs(id)
);
"""

_METRIC_COLUMNS = ["image_id", "tp", "fp", "tn", "fn", "acc", "se", "sp", "auc", "iou_noisy", "iou_refined", "delta"]


def _row_values(report: ImageReport) -> List[Any]:
    m = report.metrics
    ref = report.refinement
    c = report.counts
    return [
        report.image_id, c.tp, c.fp, c.tn, c.fn, m.acc, m.se, m.sp, report.auc,
        ref.iou_noisy if ref else None, ref.iou_refined if ref else None, ref.delta if ref else None,
    ]


class ResultStore:
    """Evaluation runs and their per-image metrics in SQLite. Undefined metrics are stored as NULL."""

    def __init__(self, db_path: str = "data/results.db") -> None:
        self.db_path = db_path
        self._persistent = False
        self._conn: Optional[sqlite3.Connection] = None

        dirname = os.path.dirname(db_path)
        if db_path == ":memory:":
            # Keep a persistent in-memory connection so schema persists across calls
            self._conn = sqlite3.connect(db_path)
            self._persistent = True
        elif db_path.startswith("file::memory:"):
            self._conn = sqlite3.connect(db_path, uri=True)
            self._persistent = True
        else:
            if dirname:
                os.makedirs(dirname, exist_ok=True)
        self._init_db()

    def _connect(self) -> sqlite3.Connection:
        if self._conn is not None:
            return self._conn
        return sqlite3.connect(self.db_path)

    def _release(self, con: sqlite3.Connection) -> None:
        if not self._persistent:
            con.close()

    def _init_db(self) -> None:
        con = self._connect()
        con.executescript(SCHEMA_SQL)
        self._release(con)

    def save_run(
        self, command: str, config: Dict[str, Any], reports: Sequence[ImageReport], checkpoint_sha256: Optional[str] = None
    ) -> int:
        con = self._connect()
        cur = con.cursor()
        cur.execute(
            "INSERT INTO runs(command, config, checkpoint_sha256) VALUES(?,?,?)",
            (command, json.dumps(config, sort_keys=True), checkpoint_sha256),
        )
        run_id = cur.lastrowid
        placeholders = ",".join("?" * (len(_METRIC_COLUMNS) + 1))
        for report in reports:
            cur.execute(
                f"INSERT INTO image_metrics(run_id, {', '.join(_METRIC_COLUMNS)}) VALUES({placeholders})",
                [run_id, *_row_values(report)],
            )
        con.commit()
        self._release(con)
        return int(run_id)

    def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        con = self._connect()
        cur = con.cursor()
        cur.execute("SELECT id, command, config, checkpoint_sha256, created_at FROM runs WHERE id=?", (run_id,))
        row = cur.fetchone()
        if not row:
            self._release(con)
            return None
        cur.execute(
            f"SELECT {', '.join(_METRIC_COLUMNS)} FROM image_metrics WHERE run_id=? ORDER BY id", (run_id,)
        )
        images = [dict(zip(_METRIC_COLUMNS, r)) for r in cur.fetchall()]
        self._release(con)
        return {
            "id": row[0],
            "command": row[1],
            "config": json.loads(row[2]) if row[2] else {},
            "checkpoint_sha256": row[3],
            "created_at": row[4],
            "images": images,
        }

    def recent_runs(self, limit: int = 20) -> List[Dict[str, Any]]:
        """Newest runs first, each with its image count and mean row."""
        con = self._connect()
        cur = con.cursor()
        q = (
            "SELECT r.id, r.command, r.checkpoint_sha256, COUNT(m.id), "
            "SUM(m.tp), SUM(m.fp), SUM(m.tn), SUM(m.fn), AVG(m.auc), AVG(m.delta) "
            "FROM runs r LEFT JOIN image_metrics m ON m.run_id = r.id "
            "GROUP BY r.id ORDER BY r.id DESC LIMIT ?"
        )
        rows = list(cur.execute(q, (limit,)))
        self._release(con)
        out = []
        for run_id, command, sha, count, tp, fp, tn, fn, mean_auc, mean_delta in rows:
            m = scalar_metrics(ConfusionCounts(tp or 0, fp or 0, tn or 0, fn or 0))
            out.append({
                "id": run_id,
                "command": command,
                "checkpoint_sha256": sha,
                "images": count,
                "acc": m.acc,
                "se": m.se,
                "sp": m.sp,
                "auc": mean_auc,
                "delta": mean_delta,
            })
        return out
