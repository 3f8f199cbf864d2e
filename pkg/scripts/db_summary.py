import argparse

from src.vessel_refine.storage import ResultStore


def _fmt(value) -> str:
    return "undefined" if value is None else f"{value:.4f}"


def main(db_path: str = "data/results.db", limit: int = 20) -> None:
    store = ResultStore(db_path=db_path)
    for run in store.recent_runs(limit):
        sha = (run["checkpoint_sha256"] or "n/a")[:12]
        print(
            f"run_id={run['id']:>3} images={run['images']:>4} acc={_fmt(run['acc'])} se={_fmt(run['se'])} "
            f"sp={_fmt(run['sp'])} auc={_fmt(run['auc'])} iou_gain={_fmt(run['delta'])}  checkpoint={sha}"
        )


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Summarize evaluation runs stored in SQLite")
    parser.add_argument("--db", default="data/results.db", help="SQLite DB path")
    parser.add_argument("--limit", type=int, default=20, help="Number of recent runs")
    args = parser.parse_args()
    main(args.db, args.limit)
