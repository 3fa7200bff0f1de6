# analytics.py - learning curves and ablation tables from finished runs

import json
import logging
from io import BytesIO
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from config import ABLATION_VARIANTS  # noqa: E402
from state import METRICS_FILE, RunReport, read_jsonl  # noqa: E402

logger = logging.getLogger(__name__)

SeriesKey = Tuple[int, int]  # (round, seed)


# ---------------------- curves ---------------------- #
def curve_series(metrics: Iterable[dict]) -> Dict[SeriesKey, List[Tuple[int, Optional[float]]]]:
    """(frames, success) points per round and seed; unevaluated iterations keep None."""
    series: Dict[SeriesKey, List[Tuple[int, Optional[float]]]] = {}
    for m in metrics:
        key = (int(m.get("round", 1)), int(m.get("seed", 0)))
        points = series.setdefault(key, [])
        frames = int(m["frames"])
        if points and frames <= points[-1][0]:
            logger.warning("Dropping non-increasing frame count %s in series %s", frames, key)
            continue
        success = m.get("success_rate")
        points.append((frames, None if success is None else float(success)))
    return series


def curve_records(run_dir) -> List[dict]:
    """Line records for one run; a run without RL metrics yields a single gap record."""
    run_dir = Path(run_dir)
    run_id = run_dir.name
    series = curve_series(read_jsonl(run_dir / METRICS_FILE))
    if not series:
        return [{"run_id": run_id, "round": None, "seed": None, "frames": None, "success": None, "gap": True}]
    records = []
    for (round_no, seed), points in sorted(series.items()):
        for frames, success in points:
            records.append({
                "run_id": run_id,
                "round": round_no,
                "seed": seed,
                "frames": frames,
                "success": success,
                "gap": success is None,
            })
    return records


def write_curves(run_dirs: Sequence, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    written = []
    for run_dir in run_dirs:
        records = curve_records(run_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{Path(run_dir).name}.curve.jsonl"
        with open(path, "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        written.append(path)
        png = Analytics.plot_learning_curves({Path(run_dir).name: records})
        if png is not None:
            (out_dir / f"{Path(run_dir).name}.curve.png").write_bytes(png.getvalue())
    logger.info("Wrote %s curve files to %s", len(written), out_dir)
    return written


# ---------------------- ablation ---------------------- #
def ablation_rows(results: Dict[str, List[RunReport]]) -> List[dict]:
    """One row per variant in the canonical order, one success column per seed."""
    rows = []
    order = [v for v in ABLATION_VARIANTS if v in results] + sorted(v for v in results if v not in ABLATION_VARIANTS)
    for variant in order:
        reports = results[variant]
        per_seed: Dict[str, float] = {}
        for report in reports:
            per_seed.update(report.per_seed)
        ratios = [r.dead_loop_ratio for r in reports]
        rows.append({
            "variant": variant,
            "per_seed": dict(sorted(per_seed.items(), key=lambda kv: int(kv[0]))),
            "success": float(np.mean(list(per_seed.values()))) if per_seed else 0.0,
            "dead_loop_ratio": float(np.mean(ratios)) if ratios else 0.0,
            "runs": [r.run_id for r in reports],
        })
    return rows


def format_table(rows: Sequence[dict]) -> str:
    seeds = sorted({s for row in rows for s in row["per_seed"]}, key=int)
    header = ["variant"] + [f"seed {s}" for s in seeds] + ["success", "dead loops"]
    body = [
        [row["variant"]]
        + [f"{row['per_seed'][s]:.2f}" if s in row["per_seed"] else "-" for s in seeds]
        + [f"{row['success']:.2f}", f"{row['dead_loop_ratio']:.2f}"]
        for row in rows
    ]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]

    def fmt(line: List[str]) -> str:
        return " | ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()

    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(line) for line in body]) + "\n"


def write_ablation(rows: Sequence[dict], out_dir) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"text": out_dir / "ablation.txt", "jsonl": out_dir / "ablation.jsonl", "png": out_dir / "ablation.png"}
    paths["text"].write_text(format_table(rows), encoding="utf-8")
    with open(paths["jsonl"], "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    png = Analytics.plot_ablation(rows)
    if png is not None:
        paths["png"].write_bytes(png.getvalue())
    else:
        paths.pop("png")
    return paths


# ---------------------- charts ---------------------- #
class Analytics:
    """PNG charts for curves and ablations."""

    @staticmethod
    def plot_learning_curves(runs: Dict[str, List[dict]]) -> Optional[BytesIO]:
        fig, ax = plt.subplots(figsize=(8, 5))
        drawn = 0
        for run_id, records in runs.items():
            series: Dict[SeriesKey, List[dict]] = {}
            for r in records:
                if r["frames"] is not None:
                    series.setdefault((r["round"], r["seed"]), []).append(r)
            for (round_no, seed), points in sorted(series.items()):
                # NaN breaks the line so gaps stay visible
                xs = [p["frames"] for p in points]
                ys = [np.nan if p["success"] is None else p["success"] for p in points]
                if all(np.isnan(ys)):
                    continue
                ax.plot(xs, ys, marker="o", linewidth=1.5, markersize=3, label=f"{run_id} r{round_no} s{seed}")
                drawn += 1
        if not drawn:
            plt.close(fig)
            return None
        ax.set_xlabel("frames")
        ax.set_ylabel("success rate")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        buf = BytesIO()
        fig.savefig(buf, format="png", dpi=120)
        buf.seek(0)
        plt.close(fig)
        return buf

    @staticmethod
    def plot_ablation(rows: Sequence[dict]) -> Optional[BytesIO]:
        if not rows:
            return None
        fig, ax = plt.subplots(figsize=(8, 4))
        names = [row["variant"] for row in rows]
        values = [row["success"] for row in rows]
        bars = ax.bar(names, values, color="#3498db")
        for bar, value in zip(bars, values):
            ax.text(bar.get_x() + bar.get_width() / 2, value + 0.01, f"{value:.2f}", ha="center", fontsize=8)
        ax.set_ylabel("success rate")
        ax.set_ylim(0, 1.05)
        ax.grid(True, axis="y", alpha=0.3)
        plt.xticks(rotation=20)
        fig.tight_layout()
        buf = BytesIO()
        fig.savefig(buf, format="png", dpi=120)
        buf.seek(0)
        plt.close(fig)
        return buf
